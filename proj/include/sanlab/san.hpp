#pragma once

#include <sanlab/backbone.hpp>
#include <sanlab/ops.hpp>
#include <sanlab/optim.hpp>
#include <sanlab/rng.hpp>

#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sanlab {

//! Reference scale plus the RoI-area thresholds that split RoIs among the
//! sub-networks. Interval k is (b[k-1], b[k]]: a threshold belongs to the
//! lower interval.
struct ScalePartitionScheme
{
  int ref_scale = 224;
  std::vector<double> boundaries;

  auto num_partitions() const -> int
  {
    return static_cast<int>(boundaries.size()) + 1;
  }

  auto validate() const -> void
  {
    if (ref_scale < 1)
      throw ValueError("ScalePartitionScheme", "reference scale must be >= 1");
    for (std::size_t i = 0; i < boundaries.size(); ++i)
    {
      if (!(boundaries[i] > 0))
        throw ValueError("ScalePartitionScheme", "boundaries must be > 0");
      if (i > 0 && !(boundaries[i] > boundaries[i - 1]))
        throw ValueError("ScalePartitionScheme",
                         "boundaries must be strictly increasing");
    }
  }

  // Three intervals at 224^2 with thresholds 160^2 and 288^2.
  static auto voc() -> ScalePartitionScheme
  {
    return {224, {160.0 * 160.0, 288.0 * 288.0}};
  }
  static auto coco() -> ScalePartitionScheme
  {
    return {128, {64.0 * 64.0, 192.0 * 192.0}};
  }
  //! Scaled to the 96 px synthetic images.
  static auto toy() -> ScalePartitionScheme
  {
    return {48, {24.0 * 24.0, 48.0 * 48.0}};
  }
  static auto single(int ref_scale) -> ScalePartitionScheme
  {
    return {ref_scale, {}};
  }

  auto operator==(const ScalePartitionScheme&) const -> bool = default;
};

inline auto partition_index(double area, const ScalePartitionScheme& scheme)
    -> int
{
  int i = 0;
  while (i < static_cast<int>(scheme.boundaries.size()) &&
         area > scheme.boundaries[static_cast<std::size_t>(i)])
    ++i;
  return i;
}

inline auto partition_index(const RoI& roi, const ScalePartitionScheme& scheme)
    -> int
{
  return partition_index(roi.area(), scheme);
}

template <typename S>
struct SanSubNetwork
{
  Parameter<S> weight;  // C x C x 1 x 1
  Parameter<S> bias;    // C
};

//! One 1x1 conv + ReLU sub-network per scale partition. The optional fusion
//! gate scales the SAN branch before it is summed with the original feature.
template <typename S>
struct SanModule
{
  ScalePartitionScheme scheme;
  std::vector<SanSubNetwork<S>> subnets;
  std::optional<Parameter<S>> fusion_gate;

  auto channels() const -> Index
  {
    return subnets.empty() ? 0 : subnets.front().weight.tensor.dim(0);
  }

  auto parameters() -> std::vector<Parameter<S>*>
  {
    std::vector<Parameter<S>*> out;
    for (auto& s : subnets)
    {
      out.push_back(&s.weight);
      out.push_back(&s.bias);
    }
    if (fusion_gate)
      out.push_back(&*fusion_gate);
    return out;
  }
};

//! Zero-initialised module with one sub-network per partition of `scheme`.
template <typename S>
auto make_san_module(const ScalePartitionScheme& scheme, Index channels)
    -> SanModule<S>
{
  scheme.validate();
  SanModule<S> m;
  m.scheme = scheme;
  for (int i = 0; i < scheme.num_partitions(); ++i)
  {
    const auto prefix = "san.subnet" + std::to_string(i);
    m.subnets.push_back(
        {Parameter<S>(prefix + ".weight",
                      Tensor<S>::zeros({channels, channels, 1, 1})),
         Parameter<S>(prefix + ".bias", Tensor<S>::zeros({channels}))});
  }
  return m;
}

//! Kernels set to the identity channel mix, biases to zero.
template <typename S>
auto init_identity(SanModule<S>& m) -> void
{
  for (auto& s : m.subnets)
  {
    const Index C = s.weight.tensor.dim(0);
    auto& w = s.weight.tensor.data();
    w.setZero();
    for (Index c = 0; c < C; ++c)
      w[c * C + c] = S(1);
    s.bias.tensor.data().setZero();
  }
}

//! Kernels drawn from N(0, std^2), biases zero.
template <typename S>
auto init_gaussian(SanModule<S>& m, double std_dev, std::uint64_t seed) -> void
{
  if (std_dev < 0)
    throw ValueError("init_gaussian", "standard deviation must be >= 0");
  auto rng = Rng::derive(seed, "san.gaussian");
  for (auto& s : m.subnets)
  {
    auto& w = s.weight.tensor.data();
    for (Index k = 0; k < w.size(); ++k)
      w[k] = static_cast<S>(rng.normal(0.0, std_dev));
    s.bias.tensor.data().setZero();
  }
}

//! Adds a trainable fusion gate initialised to `value`.
template <typename S>
auto enable_fusion_gate(SanModule<S>& m, S value) -> void
{
  m.fusion_gate.emplace("san.fusion_gate", Tensor<S>::full(Shape{}, value));
}

template <typename S>
auto san_forward(Tensor<S> feat, int partition, const SanModule<S>& m)
    -> Tensor<S>
{
  if (partition < 0 || partition >= static_cast<int>(m.subnets.size()))
    throw ValueError("san_forward",
                     "partition " + std::to_string(partition) +
                         " outside [0, " + std::to_string(m.subnets.size()) +
                         ")");
  detail::require_rank("san_forward", feat.shape(), 4);
  if (feat.dim(1) != m.channels())
    throw ShapeError("san_forward", "channel count differs from SAN width",
                     feat.shape(), Shape{m.channels()});
  const auto& s = m.subnets[static_cast<std::size_t>(partition)];
  return relu(conv2d(feat, s.weight.tensor, s.bias.tensor, 1, 0));
}

//! Splits a batch of RoI features by partition, corrects each group with its
//! sub-network and merges the results back into the original order.
template <typename S>
auto san_forward_partitioned(Tensor<S> feats, std::span<const int> partitions,
                             const SanModule<S>& m) -> Tensor<S>
{
  if (static_cast<Index>(partitions.size()) != feats.dim(0))
    throw ShapeError("san_forward_partitioned",
                     "one partition index per batch entry required",
                     feats.shape(),
                     Shape{static_cast<Index>(partitions.size())});
  std::vector<Tensor<S>> groups;
  std::vector<Index> position(partitions.size());
  Index placed = 0;
  for (int p = 0; p < static_cast<int>(m.subnets.size()); ++p)
  {
    std::vector<Index> members;
    for (std::size_t k = 0; k < partitions.size(); ++k)
      if (partitions[k] == p)
        members.push_back(static_cast<Index>(k));
    if (members.empty())
      continue;
    for (auto k : members)
      position[static_cast<std::size_t>(k)] = placed++;
    groups.push_back(
        san_forward(select_batch(feats, std::span<const Index>(members)), p, m));
  }
  if (placed != feats.dim(0))
    throw ValueError("san_forward_partitioned", "partition index out of range");
  return select_batch(concat(groups), std::span<const Index>(position));
}

//! Sum of the original feature and the SAN feature; with a fusion gate the
//! SAN feature is scaled by it first.
template <typename S>
auto fuse(Tensor<S> original, Tensor<S> san_out) -> Tensor<S>
{
  return elementwise_add(original, san_out);
}

template <typename S>
auto fuse(Tensor<S> original, Tensor<S> san_out, const SanModule<S>& m)
    -> Tensor<S>
{
  if (m.fusion_gate)
    return elementwise_add(original, scale_by(san_out, m.fusion_gate->tensor));
  return elementwise_add(original, san_out);
}

//! Scale-aware loss for one RoI: sum over channels of
//! smooth_l1(GAP(SAN(feat))_c - r_tilde_c). The RoI feature is detached on
//! entry so this branch only trains the shared sub-network weights.
template <typename S>
auto san_loss_branch(const Tensor<S>& feat_roi, int partition,
                     const SanModule<S>& m, const Tensor<S>& r_tilde)
    -> Tensor<S>
{
  if (r_tilde.requires_grad())
    throw ValueError("san_loss_branch", "reference feature must be a constant");
  auto r = global_avg_pool(san_forward(detach(feat_roi), partition, m));
  detail::require_same("san_loss_branch", r.shape(), r_tilde.shape());
  return sum(smooth_l1(elementwise_sub(r, r_tilde)));
}

//! Batched scale-aware loss: the per-RoI branch loss averaged over the batch.
template <typename S>
auto san_loss_batch(const Tensor<S>& feats, std::span<const int> partitions,
                    const SanModule<S>& m, const Tensor<S>& r_tilde)
    -> Tensor<S>
{
  if (r_tilde.requires_grad())
    throw ValueError("san_loss_batch", "reference features must be constant");
  auto r = global_avg_pool(san_forward_partitioned(detach(feats), partitions, m));
  detail::require_same("san_loss_batch", r.shape(), r_tilde.shape());
  return scale(sum(smooth_l1(elementwise_sub(r, r_tilde))),
               S(1) / static_cast<S>(feats.dim(0)));
}

}  // namespace sanlab
