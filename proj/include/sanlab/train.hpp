#pragma once

#include <sanlab/model.hpp>
#include <sanlab/synth.hpp>

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sanlab {

struct TrainingConfig
{
  ModelConfig model;
  double base_lr = 0.01;
  int lr_decay_step = 1500;
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int iterations = 2000;
  int images_per_batch = 2;
  int rois_per_image = 32;
  double positive_fraction = 0.25;
  int san_samples = 16;  // RoIs per mini-batch that get a reference feature
  double san_loss_weight = 1.0;
  double pos_iou = 0.5;
  // Recomputes every step with and without the scale-aware loss and fails if
  // any backbone gradient differs.
  bool check_gradient_blocking = false;

  auto validate() const -> void;
};

struct LogRow
{
  int iter = 0;
  double l_cls = 0;
  double l_reg = 0;
  double l_san = 0;
  double lr = 0;
};

//! RoIs, labels and scale-aware samples for one step.
struct Batch
{
  std::vector<const Sample*> samples;
  std::vector<std::vector<RoI>> rois;
  std::vector<int> labels;
  std::vector<RegressionTarget> targets;
  std::vector<Index> san_indices;  // rows of the merged RoI batch
};

struct LossValues
{
  double cls = 0;
  double reg = 0;
  double san = 0;
  double total = 0;
};

class TrainingDiverged : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

class Trainer
{
public:
  Trainer(TrainingConfig config, const Dataset& train);

  auto model() -> DetectorModel& { return model_; }
  auto model() const -> const DetectorModel& { return model_; }
  auto config() const -> const TrainingConfig& { return config_; }
  auto iteration() const -> int { return iteration_; }

  auto learning_rate(int iter) const -> double;

  //! Draws the next mini-batch (consumes the sampling stream).
  auto next_batch() -> Batch;

  //! Zeroes all gradients, then runs forward and backward for `batch`.
  //! With include_san_loss = false the scale-aware term is left out of the
  //! objective even in full mode.
  auto compute_gradients(const Batch& batch, bool include_san_loss)
      -> LossValues;

  //! One full SGD iteration; returns its log row.
  auto step() -> LogRow;

private:
  TrainingConfig config_;
  const Dataset* data_;
  DetectorModel model_;
  Rng rng_;
  int iteration_ = 0;
};

struct TrainResult
{
  DetectorModel model;
  std::vector<LogRow> log;
};

auto train(const Dataset& data, const TrainingConfig& config) -> TrainResult;

auto write_training_log(const std::filesystem::path& path,
                        std::span<const LogRow> log) -> void;

}  // namespace sanlab
