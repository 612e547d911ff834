#pragma once

#include <sanlab/backbone.hpp>
#include <sanlab/detection.hpp>
#include <sanlab/rng.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace sanlab {

struct DatasetConfig
{
  int num_images = 200;
  int image_size = 96;
  int num_classes = 3;  // square/solid, disk/stripes, triangle/checker
  double scale_min = 12;
  double scale_max = 80;
  int objects_min = 1;
  int objects_max = 3;
  double texture_amplitude = 0.08;
  std::uint64_t seed = 0;

  auto validate() const -> void;
};

struct Sample
{
  Image image;
  std::vector<Annotation> annotations;
};

struct Dataset
{
  std::vector<Sample> samples;
  // Objects that could not be placed, one human-readable line each.
  std::vector<std::string> skipped;
};

//! Renders `cfg.num_images` images whose ids start at `first_id`. Each image
//! draws from its own stream derived from (seed, id), so any image can be
//! regenerated in isolation.
auto generate_dataset(const DatasetConfig& cfg, int first_id = 0) -> Dataset;

//! One object of `class_id` with side `side`, centred in a fresh background
//! drawn from `seed`. Used to re-render held-out objects at chosen scales.
auto render_single_object(const DatasetConfig& cfg, int class_id, double side,
                          std::uint64_t seed, int image_id = 0) -> Sample;

//! Jittered copies of each ground truth (centre and size perturbed by up to
//! `jitter` of the box size) followed by `n_neg` uniformly placed boxes.
auto make_proposals(std::span<const Annotation> gts, int n_pos_jitter,
                    int n_neg, Rng& rng, int image_width, int image_height,
                    int image_id = 0, double jitter = 0.25,
                    double min_side = 8.0) -> std::vector<RoI>;

struct ClassScaleStats
{
  int class_id = 0;
  std::size_t count = 0;
  double median_area = 0;
  double std_area = 0;  // population standard deviation
};

auto scale_statistics(const Dataset& data, int num_classes)
    -> std::vector<ClassScaleStats>;
auto scale_statistics(std::span<const Annotation> annotations, int num_classes)
    -> std::vector<ClassScaleStats>;

// On-disk form: binary PPM (P6) images plus a manifest listing, per image, the
// file name followed by `class x1 y1 x2 y2` lines. Skipped objects appear as
// `#` comments.
auto write_ppm(const std::filesystem::path& path, const Image& img) -> void;
auto read_ppm(const std::filesystem::path& path, int id = 0) -> Image;
auto write_split(const std::filesystem::path& dir, const Dataset& data) -> void;
auto read_split(const std::filesystem::path& dir) -> Dataset;
auto write_scale_statistics(const std::filesystem::path& path,
                            std::span<const ClassScaleStats> stats) -> void;

}  // namespace sanlab
