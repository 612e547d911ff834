#pragma once

#include <sanlab/ops.hpp>
#include <sanlab/optim.hpp>
#include <sanlab/rng.hpp>
#include <sanlab/tensor.hpp>

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sanlab {

//! An RGB image as a 1 x 3 x H x W tensor with values in [0, 1].
struct Image
{
  Tensorf pixels;
  int id = 0;

  auto height() const -> Index { return pixels.dim(2); }
  auto width() const -> Index { return pixels.dim(3); }
};

//! Axis-aligned box in input-image pixel coordinates.
struct RoI
{
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int image_id = 0;

  auto width() const -> double { return x2 - x1; }
  auto height() const -> double { return y2 - y1; }
  auto area() const -> double { return width() * height(); }
  auto valid() const -> bool { return x2 > x1 && y2 > y1; }

  auto operator==(const RoI&) const -> bool = default;
};

enum class PoolMode
{
  average,
  max
};

inline auto to_string(PoolMode mode) -> std::string
{
  return mode == PoolMode::average ? "avg" : "max";
}

inline auto parse_pool_mode(const std::string& s) -> PoolMode
{
  if (s == "avg" || s == "ave" || s == "average")
    return PoolMode::average;
  if (s == "max")
    return PoolMode::max;
  throw ValueError("parse_pool_mode", "unknown pooling mode '" + s + "'");
}

template <typename S>
struct ConvLayer
{
  Parameter<S> weight;
  Parameter<S> bias;
  Index stride = 1;
  Index pad = 0;
};

//! Stack of conv + ReLU blocks producing the shared feature map. Convolutions
//! pad by edge replication, so a constant image gives a constant feature map
//! at any resolution.
template <typename S>
struct Backbone
{
  std::vector<ConvLayer<S>> layers;

  auto total_stride() const -> Index
  {
    Index s = 1;
    for (const auto& l : layers)
      s *= l.stride;
    return s;
  }

  auto channels() const -> Index
  {
    return layers.empty() ? 0 : layers.back().weight.tensor.dim(0);
  }

  auto parameters() -> std::vector<Parameter<S>*>
  {
    std::vector<Parameter<S>*> out;
    for (auto& l : layers)
    {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
};

//! He-normal kernel and zero bias for a K x C x k x k convolution.
template <typename S>
auto make_conv_layer(const std::string& name, Index in, Index out, Index k,
                     Index stride, Index pad, Rng& rng) -> ConvLayer<S>
{
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in * k * k));
  auto w = Tensor<S>::zeros({out, in, k, k});
  for (Index i = 0; i < w.numel(); ++i)
    w.data()[i] = static_cast<S>(rng.normal(0.0, std_dev));
  return {Parameter<S>(name + ".weight", w),
          Parameter<S>(name + ".bias", Tensor<S>::zeros({out})), stride, pad};
}

//! Three 3x3 stride-2 blocks (3 -> 16 -> 32 -> 32) and a 1x1 feature
//! extraction layer of 32 channels. Total stride 8.
template <typename S>
auto make_backbone(Rng& rng) -> Backbone<S>
{
  Backbone<S> bb;
  bb.layers.push_back(make_conv_layer<S>("backbone.conv1", 3, 16, 3, 2, 1, rng));
  bb.layers.push_back(make_conv_layer<S>("backbone.conv2", 16, 32, 3, 2, 1, rng));
  bb.layers.push_back(make_conv_layer<S>("backbone.conv3", 32, 32, 3, 2, 1, rng));
  bb.layers.push_back(make_conv_layer<S>("backbone.feat", 32, 32, 1, 1, 0, rng));
  return bb;
}

template <typename S>
auto backbone_forward(Tensor<S> pixels, const Backbone<S>& bb) -> Tensor<S>
{
  detail::require_rank("backbone_forward", pixels.shape(), 4);
  const Index stride = bb.total_stride();
  if (pixels.dim(2) < stride || pixels.dim(3) < stride)
    throw ShapeError("backbone_forward",
                     "image smaller than total stride " +
                         std::to_string(stride),
                     pixels.shape());
  Tensor<S> x = pixels;
  for (const auto& l : bb.layers)
    x = relu(conv2d(x, l.weight.tensor, l.bias.tensor, l.stride, l.pad,
                    Padding::replicate));
  return x;
}

inline auto backbone_forward(const Image& img, const Backbone<float>& bb)
    -> Tensorf
{
  return backbone_forward(img.pixels, bb);
}

//! Half-open cell range [begin, end) of a RoI on a feature axis.
struct CellSpan
{
  Index begin;
  Index end;
};

//! Maps pixel coordinates [lo, hi) to feature cells: floor(lo / stride),
//! ceil(hi / stride), clamped to [0, extent].
inline auto roi_cells(double lo, double hi, Index stride, Index extent)
    -> CellSpan
{
  auto b = static_cast<Index>(std::floor(lo / static_cast<double>(stride)));
  auto e = static_cast<Index>(std::ceil(hi / static_cast<double>(stride)));
  b = std::clamp<Index>(b, 0, extent);
  e = std::clamp<Index>(e, 0, extent);
  return {b, e};
}

//! Pools each RoI to an out x out grid over a 1 x C x h x w feature map.
//! Returns N x C x out x out. The RoI's cell region is cut into out x out bins
//! of equal fractional span; each bin covers cells floor(start)..ceil(end).
template <typename S>
auto roi_pool(Tensor<S> feat, std::span<const RoI> rois, Index out,
              PoolMode mode, Index stride) -> Tensor<S>
{
  detail::require_rank("roi_pool", feat.shape(), 4);
  if (feat.dim(0) != 1)
    throw ShapeError("roi_pool", "feature map batch must be 1", feat.shape());
  if (out < 1 || stride < 1)
    throw ValueError("roi_pool", "output size and stride must be >= 1");
  const Index C = feat.dim(1), h = feat.dim(2), w = feat.dim(3);
  const Index R = static_cast<Index>(rois.size());
  const Index bins = out * out;

  // For every (roi, bin) the list of covered cell offsets within a plane.
  std::vector<std::vector<Index>> cover(static_cast<std::size_t>(R * bins));
  for (Index r = 0; r < R; ++r)
  {
    const auto& roi = rois[static_cast<std::size_t>(r)];
    const auto xs = roi_cells(roi.x1, roi.x2, stride, w);
    const auto ys = roi_cells(roi.y1, roi.y2, stride, h);
    const Index rw = xs.end - xs.begin, rh = ys.end - ys.begin;
    if (rw < 1 || rh < 1)
      throw ValueError("roi_pool", "RoI maps to an empty feature region");
    auto bin_range = [out](Index begin, Index extent, Index j) {
      const double lo = static_cast<double>(begin) +
                        static_cast<double>(j * extent) / static_cast<double>(out);
      const double hi = static_cast<double>(begin) +
                        static_cast<double>((j + 1) * extent) /
                            static_cast<double>(out);
      Index a = static_cast<Index>(std::floor(lo));
      Index b = static_cast<Index>(std::ceil(hi));
      a = std::clamp(a, begin, begin + extent - 1);
      b = std::clamp(b, a + 1, begin + extent);
      return CellSpan{a, b};
    };
    for (Index by = 0; by < out; ++by)
    {
      const auto cy = bin_range(ys.begin, rh, by);
      for (Index bx = 0; bx < out; ++bx)
      {
        const auto cx = bin_range(xs.begin, rw, bx);
        auto& cells = cover[static_cast<std::size_t>(r * bins + by * out + bx)];
        for (Index y = cy.begin; y < cy.end; ++y)
          for (Index x = cx.begin; x < cx.end; ++x)
            cells.push_back(y * w + x);
      }
    }
  }

  typename Tensor<S>::Buffer result(R * C * bins);
  // For max mode, the flat feature index of each winner.
  std::vector<Index> winner(mode == PoolMode::max ? result.size() : 0);
  const S* f = feat.data().data();
  for (Index r = 0; r < R; ++r)
    for (Index c = 0; c < C; ++c)
    {
      const S* plane = f + c * h * w;
      for (Index b = 0; b < bins; ++b)
      {
        const auto& cells = cover[static_cast<std::size_t>(r * bins + b)];
        const Index o = (r * C + c) * bins + b;
        if (mode == PoolMode::average)
        {
          S acc = 0;
          for (Index cell : cells)
            acc += plane[cell];
          result[o] = acc / static_cast<S>(cells.size());
        }
        else
        {
          Index best = cells.front();
          for (Index cell : cells)
            if (plane[cell] > plane[best])
              best = cell;
          result[o] = plane[best];
          winner[static_cast<std::size_t>(o)] = c * h * w + best;
        }
      }
    }

  auto fnode = feat.node();
  auto backward = [fnode, cover = std::move(cover),
                   winner = std::move(winner), mode, R, C, h, w,
                   bins](const typename Tensor<S>::Buffer& g) {
    S* gf = fnode->grad.data();
    for (Index r = 0; r < R; ++r)
      for (Index c = 0; c < C; ++c)
        for (Index b = 0; b < bins; ++b)
        {
          const Index o = (r * C + c) * bins + b;
          if (mode == PoolMode::average)
          {
            const auto& cells = cover[static_cast<std::size_t>(r * bins + b)];
            const S share = g[o] / static_cast<S>(cells.size());
            for (Index cell : cells)
              gf[c * h * w + cell] += share;
          }
          else
            gf[winner[static_cast<std::size_t>(o)]] += g[o];
        }
  };
  return Tensor<S>::make_result({R, C, out, out}, std::move(result), {feat},
                                std::move(backward));
}

template <typename S>
auto roi_pool(Tensor<S> feat, const RoI& roi, Index out, PoolMode mode,
              Index stride) -> Tensor<S>
{
  return roi_pool(std::move(feat), std::span<const RoI>(&roi, 1), out, mode,
                  stride);
}

//! Crops a box out of a 1 x C x H x W image. Coordinates are widened to whole
//! pixels (floor/ceil) and clamped to the image; no padding is added.
template <typename S>
auto crop(const Tensor<S>& pixels, const RoI& roi) -> Tensor<S>
{
  const Index C = pixels.dim(1), H = pixels.dim(2), W = pixels.dim(3);
  const auto x0 = std::clamp<Index>(static_cast<Index>(std::floor(roi.x1)), 0, W);
  const auto x1 = std::clamp<Index>(static_cast<Index>(std::ceil(roi.x2)), 0, W);
  const auto y0 = std::clamp<Index>(static_cast<Index>(std::floor(roi.y1)), 0, H);
  const auto y1 = std::clamp<Index>(static_cast<Index>(std::ceil(roi.y2)), 0, H);
  if (x1 <= x0 || y1 <= y0)
    throw ValueError("crop", "RoI does not intersect the image");
  const Index ch = y1 - y0, cw = x1 - x0;
  typename Tensor<S>::Buffer data(C * ch * cw);
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < ch; ++y)
      data.segment((c * ch + y) * cw, cw) =
          pixels.data().segment((c * H + y0 + y) * W + x0, cw);
  return Tensor<S>({1, C, ch, cw}, std::move(data));
}

//! Channel vector of the scale-normalised patch behind a RoI: crop, resize to
//! ref_scale x ref_scale, run the backbone, average-pool. The result is a
//! constant (no gradient).
template <typename S>
auto extract_reference_feature(const Tensor<S>& pixels, const RoI& roi,
                               Index ref_scale, const Backbone<S>& bb)
    -> Tensor<S>
{
  NoGradGuard no_grad;
  auto patch = bilinear_resize(crop(pixels, roi), ref_scale, ref_scale);
  return detach(global_avg_pool(backbone_forward(patch, bb)));
}

inline auto extract_reference_feature(const Image& img, const RoI& roi,
                                      Index ref_scale,
                                      const Backbone<float>& bb) -> Tensorf
{
  return extract_reference_feature(img.pixels, roi, ref_scale, bb);
}

template <typename S>
struct ScaleSweep
{
  std::vector<int> scales;
  std::vector<Eigen::Matrix<S, Eigen::Dynamic, 1>> vectors;
  std::vector<std::string> warnings;
};

//! Resizes the image to s x s for each scale, runs the backbone and records
//! the pooled channel vector. With `normalize_to`, every resized image is
//! brought back to that reference size before the backbone (the scale
//! normalised variant). Scales below the backbone stride are skipped with a
//! warning.
template <typename S>
auto cam_scale_sweep(const Tensor<S>& pixels, const Backbone<S>& bb,
                     std::span<const int> scales,
                     std::optional<int> normalize_to = std::nullopt)
    -> ScaleSweep<S>
{
  NoGradGuard no_grad;
  ScaleSweep<S> sweep;
  const Index min_scale = bb.total_stride();
  for (int s : scales)
  {
    if (s < min_scale ||
        (normalize_to && *normalize_to < min_scale))
    {
      sweep.warnings.push_back("scale " + std::to_string(s) +
                               " below backbone stride " +
                               std::to_string(min_scale) + "; skipped");
      continue;
    }
    auto img = (s == pixels.dim(2) && s == pixels.dim(3))
                   ? pixels
                   : bilinear_resize(pixels, s, s);
    if (normalize_to && *normalize_to != s)
      img = bilinear_resize(img, *normalize_to, *normalize_to);
    auto v = global_avg_pool(backbone_forward(img, bb));
    sweep.scales.push_back(s);
    sweep.vectors.emplace_back(v.data().matrix());
  }
  return sweep;
}

}  // namespace sanlab
