#pragma once

#include <sanlab/backbone.hpp>
#include <sanlab/detection.hpp>
#include <sanlab/san.hpp>
#include <sanlab/synth.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sanlab {

enum class SanMode
{
  off,      // baseline detector, no SAN constructed
  no_loss,  // SAN in the detection path, trained by detection losses only
  full      // detection losses plus the scale-aware loss
};

enum class InitMode
{
  identity,
  gaussian,
  identity_zero_fusion  // identity kernels, fusion gate starting at 0
};

auto to_string(SanMode mode) -> std::string;
auto to_string(InitMode mode) -> std::string;
auto parse_san_mode(const std::string& s) -> SanMode;
auto parse_init_mode(const std::string& s) -> InitMode;

struct ModelConfig
{
  int num_classes = 3;
  ScalePartitionScheme scheme = ScalePartitionScheme::toy();
  SanMode san = SanMode::full;
  InitMode init = InitMode::identity;
  double gaussian_std = 0.01;
  PoolMode san_pool = PoolMode::average;
  int pool_size = 7;
  std::uint64_t seed = 0;
};

//! Backbone, optional SAN and detection head. Every component draws its
//! initial weights from its own seeded stream, so a baseline and a SAN model
//! built from the same seed share backbone and head weights exactly.
struct DetectorModel
{
  ModelConfig config;
  Backbone<float> backbone;
  std::optional<SanModule<float>> san;
  DetectionHead<float> head;

  auto parameters() -> std::vector<Parameter<float>*>;
  auto backbone_parameters() -> std::vector<Parameter<float>*>;
  auto san_parameters() -> std::vector<Parameter<float>*>;
  auto stride() const -> Index { return backbone.total_stride(); }
};

auto make_model(const ModelConfig& config) -> DetectorModel;

//! Detection-path tensors for a set of RoIs spread over several images.
struct RoiForward
{
  std::vector<Tensorf> feature_maps;  // one per image
  std::vector<int> image_of;          // batch row -> image slot
  std::vector<RoI> rois;              // batch row -> RoI
  std::vector<int> partitions;        // batch row -> SAN partition
  Tensorf pooled;                     // N x C x P x P
  Tensorf fused;                      // pooled (+ SAN feature)
  HeadOutput<float> head;
};

auto forward_rois(const DetectorModel& model,
                  std::span<const Image* const> images,
                  std::span<const std::vector<RoI>> rois) -> RoiForward;

struct Detection
{
  RoI box;
  int class_id = 0;
  double score = 0;
};

//! Greedy non-maximum suppression within each (image, class); keeps the
//! higher score, ties resolved by lower input index.
auto nms(std::span<const Detection> dets, double iou_threshold)
    -> std::vector<Detection>;

//! Scores and regresses every proposal, keeps foreground classes above
//! `score_threshold`, and suppresses duplicates.
auto detect(const DetectorModel& model, const Image& image,
            std::span<const RoI> proposals, double score_threshold = 0.05,
            double nms_threshold = 0.3) -> std::vector<Detection>;

}  // namespace sanlab
