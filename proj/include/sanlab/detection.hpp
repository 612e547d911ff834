#pragma once

#include <sanlab/backbone.hpp>
#include <sanlab/ops.hpp>
#include <sanlab/optim.hpp>
#include <sanlab/rng.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace sanlab {

//! Ground-truth box with a foreground class in [1, K].
struct Annotation
{
  RoI box;
  int class_id = 1;

  auto operator==(const Annotation&) const -> bool = default;
};

//! Box regression deltas in the centre/log-size parameterisation.
struct RegressionTarget
{
  double tx = 0, ty = 0, tw = 0, th = 0;

  auto operator==(const RegressionTarget&) const -> bool = default;
};

inline auto iou(const RoI& a, const RoI& b) -> double
{
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0)
    return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

inline auto encode_regression(const RoI& roi, const RoI& gt) -> RegressionTarget
{
  if (!roi.valid() || !gt.valid())
    throw ValueError("encode_regression", "boxes must have positive size");
  const double rw = roi.width(), rh = roi.height();
  const double rx = roi.x1 + 0.5 * rw, ry = roi.y1 + 0.5 * rh;
  const double gw = gt.width(), gh = gt.height();
  const double gx = gt.x1 + 0.5 * gw, gy = gt.y1 + 0.5 * gh;
  return {(gx - rx) / rw, (gy - ry) / rh, std::log(gw / rw), std::log(gh / rh)};
}

inline auto decode_regression(const RegressionTarget& t, const RoI& roi) -> RoI
{
  const double rw = roi.width(), rh = roi.height();
  const double cx = roi.x1 + 0.5 * rw + t.tx * rw;
  const double cy = roi.y1 + 0.5 * rh + t.ty * rh;
  const double w = rw * std::exp(t.tw), h = rh * std::exp(t.th);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h, roi.image_id};
}

struct RoiLabel
{
  int class_id = 0;          // 0 = background
  RegressionTarget target;   // meaningful only for class_id >= 1
  int gt_index = -1;
};

//! Labels each RoI with the class of its best-overlapping ground truth when
//! IoU >= pos_iou (closed threshold); ties go to the lower ground-truth index.
inline auto assign_roi_labels(std::span<const RoI> rois,
                              std::span<const Annotation> gts,
                              double pos_iou = 0.5) -> std::vector<RoiLabel>
{
  if (!(pos_iou > 0 && pos_iou < 1))
    throw ValueError("assign_roi_labels", "IoU threshold must be in (0, 1)");
  std::vector<RoiLabel> labels(rois.size());
  for (std::size_t r = 0; r < rois.size(); ++r)
  {
    double best = -1;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g)
    {
      const double o = iou(rois[r], gts[g].box);
      if (o > best)
      {
        best = o;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0 && best >= pos_iou)
    {
      const auto& gt = gts[static_cast<std::size_t>(best_gt)];
      labels[r] = {gt.class_id, encode_regression(rois[r], gt.box), best_gt};
    }
  }
  return labels;
}

//! Uniform sample of min(n, count) indices without replacement, returned in
//! ascending order.
inline auto sample_san_rois(std::size_t count, std::size_t n, Rng& rng)
    -> std::vector<Index>
{
  std::vector<Index> idx(count);
  std::iota(idx.begin(), idx.end(), Index{0});
  if (n >= count)
    return idx;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < n; ++i)
  {
    const auto j = i + static_cast<std::size_t>(rng.below(count - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
auto sample_san_rois(std::span<const T> items, std::size_t n, Rng& rng)
    -> std::vector<T>
{
  std::vector<T> out;
  for (auto i : sample_san_rois(items.size(), n, rng))
    out.push_back(items[static_cast<std::size_t>(i)]);
  return out;
}

//! Classification and class-specific box regression from pooled RoI
//! features: 1x1 conv followed by global average pooling, for each branch.
template <typename S>
struct DetectionHead
{
  int num_classes = 0;  // K, excluding background
  Parameter<S> cls_weight;
  Parameter<S> cls_bias;
  Parameter<S> reg_weight;
  Parameter<S> reg_bias;

  auto parameters() -> std::vector<Parameter<S>*>
  {
    return {&cls_weight, &cls_bias, &reg_weight, &reg_bias};
  }
};

template <typename S>
auto make_detection_head(int num_classes, Index channels, Rng& rng)
    -> DetectionHead<S>
{
  if (num_classes < 1)
    throw ValueError("make_detection_head", "need at least one class");
  auto gaussian = [&](Shape shape, double std_dev) {
    auto t = Tensor<S>::zeros(std::move(shape));
    for (Index i = 0; i < t.numel(); ++i)
      t.data()[i] = static_cast<S>(rng.normal(0.0, std_dev));
    return t;
  };
  const Index K = num_classes;
  DetectionHead<S> h;
  h.num_classes = num_classes;
  h.cls_weight = Parameter<S>("head.cls.weight",
                              gaussian({K + 1, channels, 1, 1}, 0.01));
  h.cls_bias = Parameter<S>("head.cls.bias", Tensor<S>::zeros({K + 1}));
  h.reg_weight = Parameter<S>("head.reg.weight",
                              gaussian({4 * K, channels, 1, 1}, 0.001));
  h.reg_bias = Parameter<S>("head.reg.bias", Tensor<S>::zeros({4 * K}));
  return h;
}

template <typename S>
struct HeadOutput
{
  Tensor<S> logits;  // N x (K+1)
  Tensor<S> deltas;  // N x 4K, class k at columns 4(k-1)..4(k-1)+3
};

template <typename S>
auto head_forward(Tensor<S> feats, const DetectionHead<S>& h) -> HeadOutput<S>
{
  const Index N = feats.dim(0);
  const Index K = h.num_classes;
  auto cls = global_avg_pool(
      conv2d(feats, h.cls_weight.tensor, h.cls_bias.tensor, 1, 0));
  auto reg = global_avg_pool(
      conv2d(feats, h.reg_weight.tensor, h.reg_bias.tensor, 1, 0));
  return {reshape(cls, {N, K + 1}), reshape(reg, {N, 4 * K})};
}

struct LossFlags
{
  bool san_loss_enabled = true;
  double san_loss_weight = 1.0;
};

template <typename S>
struct LossTerms
{
  Tensor<S> total;
  Tensor<S> cls;
  Tensor<S> reg;
  Tensor<S> san;
};

//! L = L_cls + [u >= 1] L_reg + L_san. L_cls and L_reg are averaged over the
//! N RoIs (background RoIs contribute nothing to L_reg); `san_term` is the
//! already batch-averaged scale-aware loss and is ignored when disabled.
template <typename S>
auto multi_task_loss(const Tensor<S>& logits, std::span<const int> labels,
                     const Tensor<S>& deltas,
                     std::span<const RegressionTarget> targets,
                     const std::optional<Tensor<S>>& san_term,
                     const LossFlags& flags) -> LossTerms<S>
{
  const Index N = logits.dim(0);
  if (deltas.dim(0) != N || static_cast<Index>(targets.size()) != N)
    throw ShapeError("multi_task_loss", "per-RoI inputs disagree in count",
                     logits.shape(), deltas.shape());
  const Index K = deltas.dim(1) / 4;

  LossTerms<S> out;
  out.cls = softmax_cross_entropy(logits, labels);

  std::vector<Index> picked;
  typename Tensor<S>::Buffer goal;
  std::vector<S> goal_values;
  for (Index n = 0; n < N; ++n)
  {
    const int u = labels[static_cast<std::size_t>(n)];
    if (u < 1)
      continue;
    if (u > K)
      throw ValueError("multi_task_loss", "label exceeds regression classes");
    const auto& v = targets[static_cast<std::size_t>(n)];
    for (int i = 0; i < 4; ++i)
      picked.push_back(n * 4 * K + 4 * (u - 1) + i);
    goal_values.insert(goal_values.end(),
                       {static_cast<S>(v.tx), static_cast<S>(v.ty),
                        static_cast<S>(v.tw), static_cast<S>(v.th)});
  }
  if (picked.empty())
    out.reg = Tensor<S>::scalar(S(0));
  else
  {
    goal = Eigen::Map<typename Tensor<S>::Buffer>(
        goal_values.data(), static_cast<Index>(goal_values.size()));
    auto t = gather(deltas, std::span<const Index>(picked));
    Tensor<S> v({static_cast<Index>(goal_values.size())}, goal);
    out.reg = scale(sum(smooth_l1(elementwise_sub(t, v))),
                    S(1) / static_cast<S>(N));
  }

  out.total = elementwise_add(out.cls, out.reg);
  if (flags.san_loss_enabled && san_term)
  {
    out.san = *san_term;
    out.total = elementwise_add(
        out.total, flags.san_loss_weight == 1.0
                       ? out.san
                       : scale(out.san, static_cast<S>(flags.san_loss_weight)));
  }
  else
    out.san = Tensor<S>::scalar(S(0));
  return out;
}

}  // namespace sanlab
