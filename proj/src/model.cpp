#include <sanlab/model.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sanlab {

auto to_string(SanMode mode) -> std::string
{
  switch (mode)
  {
  case SanMode::off:
    return "off";
  case SanMode::no_loss:
    return "no-loss";
  default:
    return "full";
  }
}

auto to_string(InitMode mode) -> std::string
{
  switch (mode)
  {
  case InitMode::identity:
    return "identity";
  case InitMode::gaussian:
    return "gaussian";
  default:
    return "identity-zero-fusion";
  }
}

auto parse_san_mode(const std::string& s) -> SanMode
{
  if (s == "off")
    return SanMode::off;
  if (s == "no-loss")
    return SanMode::no_loss;
  if (s == "full")
    return SanMode::full;
  throw ValueError("parse_san_mode", "expected off, no-loss or full, got '" +
                                         s + "'");
}

auto parse_init_mode(const std::string& s) -> InitMode
{
  if (s == "identity")
    return InitMode::identity;
  if (s == "gaussian")
    return InitMode::gaussian;
  if (s == "identity-zero-fusion")
    return InitMode::identity_zero_fusion;
  throw ValueError("parse_init_mode",
                   "expected identity, gaussian or identity-zero-fusion, got '" +
                       s + "'");
}

auto DetectorModel::parameters() -> std::vector<Parameter<float>*>
{
  auto out = backbone_parameters();
  for (auto* p : san_parameters())
    out.push_back(p);
  for (auto* p : head.parameters())
    out.push_back(p);
  return out;
}

auto DetectorModel::backbone_parameters() -> std::vector<Parameter<float>*>
{
  return backbone.parameters();
}

auto DetectorModel::san_parameters() -> std::vector<Parameter<float>*>
{
  return san ? san->parameters() : std::vector<Parameter<float>*>{};
}

auto make_model(const ModelConfig& config) -> DetectorModel
{
  config.scheme.validate();
  if (config.pool_size < 1)
    throw ValueError("make_model", "pool size must be >= 1");
  DetectorModel m;
  m.config = config;
  auto backbone_rng = Rng::derive(config.seed, "init.backbone");
  m.backbone = make_backbone<float>(backbone_rng);
  auto head_rng = Rng::derive(config.seed, "init.head");
  m.head = make_detection_head<float>(config.num_classes, m.backbone.channels(),
                                      head_rng);
  if (config.san != SanMode::off)
  {
    auto san = make_san_module<float>(config.scheme, m.backbone.channels());
    switch (config.init)
    {
    case InitMode::identity:
      init_identity(san);
      break;
    case InitMode::gaussian:
      init_gaussian(san, config.gaussian_std, config.seed);
      break;
    case InitMode::identity_zero_fusion:
      init_identity(san);
      enable_fusion_gate(san, 0.0f);
      break;
    }
    m.san = std::move(san);
  }
  return m;
}

auto forward_rois(const DetectorModel& model,
                  std::span<const Image* const> images,
                  std::span<const std::vector<RoI>> rois) -> RoiForward
{
  if (images.size() != rois.size())
    throw ValueError("forward_rois", "one RoI list per image required");
  RoiForward f;
  std::vector<Tensorf> pooled;
  for (std::size_t i = 0; i < images.size(); ++i)
  {
    f.feature_maps.push_back(backbone_forward(*images[i], model.backbone));
    if (rois[i].empty())
      continue;
    pooled.push_back(roi_pool(f.feature_maps.back(),
                              std::span<const RoI>(rois[i]),
                              model.config.pool_size, PoolMode::average,
                              model.stride()));
    for (const auto& r : rois[i])
    {
      f.image_of.push_back(static_cast<int>(i));
      f.rois.push_back(r);
      f.partitions.push_back(partition_index(r, model.config.scheme));
    }
  }
  if (pooled.empty())
    throw ValueError("forward_rois", "no RoIs to process");
  f.pooled = pooled.size() == 1 ? pooled.front() : concat(pooled);
  if (model.san)
  {
    auto corrected = san_forward_partitioned(
        f.pooled, std::span<const int>(f.partitions), *model.san);
    f.fused = fuse(f.pooled, corrected, *model.san);
  }
  else
    f.fused = f.pooled;
  f.head = head_forward(f.fused, model.head);
  return f;
}

auto nms(std::span<const Detection> dets, double iou_threshold)
    -> std::vector<Detection>
{
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return dets[a].score > dets[b].score;
  });
  std::vector<Detection> kept;
  for (auto i : order)
  {
    const auto& d = dets[i];
    const bool suppressed =
        std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
          return k.class_id == d.class_id &&
                 k.box.image_id == d.box.image_id &&
                 iou(k.box, d.box) > iou_threshold;
        });
    if (!suppressed)
      kept.push_back(d);
  }
  return kept;
}

auto detect(const DetectorModel& model, const Image& image,
            std::span<const RoI> proposals, double score_threshold,
            double nms_threshold) -> std::vector<Detection>
{
  if (proposals.empty())
    return {};
  NoGradGuard no_grad;
  const Image* img = &image;
  std::vector<std::vector<RoI>> rois{{proposals.begin(), proposals.end()}};
  const auto f = forward_rois(model, std::span<const Image* const>(&img, 1),
                              std::span<const std::vector<RoI>>(rois));
  const Index N = f.head.logits.dim(0);
  const Index M = f.head.logits.dim(1);
  const int K = model.config.num_classes;
  const auto& z = f.head.logits.data();
  const auto& t = f.head.deltas.data();
  const double W = static_cast<double>(image.width());
  const double H = static_cast<double>(image.height());

  std::vector<Detection> raw;
  for (Index n = 0; n < N; ++n)
  {
    double peak = z[n * M];
    for (Index c = 1; c < M; ++c)
      peak = std::max(peak, static_cast<double>(z[n * M + c]));
    double norm = 0;
    for (Index c = 0; c < M; ++c)
      norm += std::exp(static_cast<double>(z[n * M + c]) - peak);
    for (int k = 1; k <= K; ++k)
    {
      const double p = std::exp(static_cast<double>(z[n * M + k]) - peak) / norm;
      if (p < score_threshold)
        continue;
      const Index o = n * 4 * K + 4 * (k - 1);
      RegressionTarget delta{t[o], t[o + 1], t[o + 2], t[o + 3]};
      auto box = decode_regression(delta, f.rois[static_cast<std::size_t>(n)]);
      box.x1 = std::clamp(box.x1, 0.0, W);
      box.x2 = std::clamp(box.x2, 0.0, W);
      box.y1 = std::clamp(box.y1, 0.0, H);
      box.y2 = std::clamp(box.y2, 0.0, H);
      if (!box.valid())
        continue;
      box.image_id = image.id;
      raw.push_back({box, k, p});
    }
  }
  return nms(raw, nms_threshold);
}

}  // namespace sanlab
