#include <sanlab/train.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sanlab {

auto TrainingConfig::validate() const -> void
{
  model.scheme.validate();
  if (!(base_lr > 0) || !(lr_decay_factor > 0) || lr_decay_step < 1)
    throw ValueError("TrainingConfig", "learning-rate schedule must be positive");
  if (momentum < 0 || weight_decay < 0)
    throw ValueError("TrainingConfig", "momentum and weight decay must be >= 0");
  if (iterations < 0)
    throw ValueError("TrainingConfig", "iterations must be >= 0");
  if (images_per_batch < 1 || rois_per_image < 1)
    throw ValueError("TrainingConfig", "batch sizes must be >= 1");
  if (positive_fraction < 0 || positive_fraction > 1)
    throw ValueError("TrainingConfig", "positive fraction must be in [0, 1]");
  if (san_samples < 0 || san_samples > images_per_batch * rois_per_image)
    throw ValueError("TrainingConfig",
                     "san_samples must not exceed the RoIs in a mini-batch");
  if (san_loss_weight < 0)
    throw ValueError("TrainingConfig", "san_loss_weight must be >= 0");
  if (model.num_classes < 1)
    throw ValueError("TrainingConfig", "need at least one class");
}

Trainer::Trainer(TrainingConfig config, const Dataset& train)
  : config_(std::move(config))
  , data_(&train)
  , model_(make_model(config_.model))
  , rng_(Rng::derive(config_.model.seed, "train.sampling"))
{
  config_.validate();
  if (train.samples.empty())
    throw ValueError("Trainer", "training set is empty");
  for (auto* p : model_.parameters())
    p->tensor.zero_grad();
}

auto Trainer::learning_rate(int iter) const -> double
{
  return config_.base_lr *
         std::pow(config_.lr_decay_factor, iter / config_.lr_decay_step);
}

auto Trainer::next_batch() -> Batch
{
  Batch b;
  const auto& samples = data_->samples;
  const int pos_cap = static_cast<int>(
      std::floor(config_.positive_fraction * config_.rois_per_image));
  for (int i = 0; i < config_.images_per_batch; ++i)
  {
    const auto& s = samples[static_cast<std::size_t>(rng_.below(samples.size()))];
    const int n_gt = static_cast<int>(s.annotations.size());
    const int per_gt = n_gt == 0 ? 0 : std::max(1, pos_cap / n_gt);
    const int n_neg = std::max(0, config_.rois_per_image - per_gt * n_gt);
    auto rois = make_proposals(s.annotations, per_gt, n_neg, rng_,
                               static_cast<int>(s.image.width()),
                               static_cast<int>(s.image.height()), s.image.id);
    for (const auto& l : assign_roi_labels(rois, s.annotations, config_.pos_iou))
    {
      b.labels.push_back(l.class_id);
      b.targets.push_back(l.target);
    }
    b.samples.push_back(&s);
    b.rois.push_back(std::move(rois));
  }
  if (config_.model.san == SanMode::full)
    b.san_indices = sample_san_rois(b.labels.size(),
                                    static_cast<std::size_t>(config_.san_samples),
                                    rng_);
  return b;
}

auto Trainer::compute_gradients(const Batch& batch, bool include_san_loss)
    -> LossValues
{
  for (auto* p : model_.parameters())
    p->tensor.zero_grad();

  std::vector<const Image*> images;
  for (const auto* s : batch.samples)
    images.push_back(&s->image);
  const auto f = forward_rois(model_, images, batch.rois);

  std::optional<Tensorf> san_term;
  const bool san_active = config_.model.san == SanMode::full && include_san_loss &&
                          !batch.san_indices.empty();
  if (san_active)
  {
    const auto& idx = batch.san_indices;
    std::vector<int> parts;
    std::vector<Tensorf> references;
    for (auto i : idx)
    {
      const auto row = static_cast<std::size_t>(i);
      parts.push_back(f.partitions[row]);
      const auto& img = *images[static_cast<std::size_t>(f.image_of[row])];
      references.push_back(extract_reference_feature(
          img, f.rois[row], model_.config.scheme.ref_scale, model_.backbone));
    }
    Tensorf feats;
    if (config_.model.san_pool == PoolMode::average)
      feats = select_batch(f.pooled, std::span<const Index>(idx));
    else
    {
      std::vector<Tensorf> pooled;
      for (auto i : idx)
      {
        const auto row = static_cast<std::size_t>(i);
        pooled.push_back(roi_pool(
            detach(f.feature_maps[static_cast<std::size_t>(f.image_of[row])]),
            f.rois[row], model_.config.pool_size, PoolMode::max,
            model_.stride()));
      }
      feats = concat(pooled);
    }
    san_term = san_loss_batch(feats, std::span<const int>(parts), *model_.san,
                              concat(references));
  }

  auto terms = multi_task_loss(
      f.head.logits, std::span<const int>(batch.labels), f.head.deltas,
      std::span<const RegressionTarget>(batch.targets), san_term,
      LossFlags{san_active, config_.san_loss_weight});
  LossValues v{terms.cls.item(), terms.reg.item(), terms.san.item(),
               terms.total.item()};
  if (!std::isfinite(v.total))
  {
    std::ostringstream os;
    os << "non-finite loss at iteration " << iteration_ << ": l_cls=" << v.cls
       << " l_reg=" << v.reg << " l_san=" << v.san
       << " lr=" << learning_rate(iteration_) << " images=";
    for (const auto* s : batch.samples)
      os << s->image.id << ' ';
    throw TrainingDiverged(os.str());
  }
  terms.total.backward();
  return v;
}

auto Trainer::step() -> LogRow
{
  const auto batch = next_batch();
  if (config_.check_gradient_blocking && config_.model.san == SanMode::full)
  {
    compute_gradients(batch, false);
    std::vector<Tensorf::Buffer> without;
    for (auto* p : model_.backbone_parameters())
      without.push_back(p->tensor.grad());
    compute_gradients(batch, true);
    const auto params = model_.backbone_parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
    {
      const auto& with = params[i]->tensor.grad();
      if (with.size() != without[i].size() ||
          std::memcmp(with.data(), without[i].data(),
                      sizeof(float) * static_cast<std::size_t>(with.size())) != 0)
        throw TrainingDiverged("scale-aware loss leaked into " +
                               params[i]->name + " at iteration " +
                               std::to_string(iteration_));
    }
  }
  const auto v = compute_gradients(batch, true);
  const double lr = learning_rate(iteration_);
  auto params = model_.parameters();
  sgd_step(std::span<Parameter<float>* const>(params), static_cast<float>(lr),
           static_cast<float>(config_.momentum),
           static_cast<float>(config_.weight_decay));
  LogRow row{iteration_, v.cls, v.reg, v.san, lr};
  ++iteration_;
  return row;
}

auto train(const Dataset& data, const TrainingConfig& config) -> TrainResult
{
  Trainer trainer(config, data);
  TrainResult result;
  for (int i = 0; i < config.iterations; ++i)
    result.log.push_back(trainer.step());
  result.model = std::move(trainer.model());
  return result;
}

auto write_training_log(const std::filesystem::path& path,
                        std::span<const LogRow> log) -> void
{
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
  os.precision(9);
  os << "iter,l_cls,l_reg,l_san,lr\n";
  for (const auto& r : log)
    os << r.iter << ',' << r.l_cls << ',' << r.l_reg << ',' << r.l_san << ','
       << r.lr << '\n';
}

}  // namespace sanlab
