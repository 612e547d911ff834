#include "oracles.hpp"

#include <sanlab/san.hpp>

#include <gtest/gtest.h>

#include <cstring>

using namespace sanlab;

namespace {

auto random_feat(Shape shape, Rng& rng, double lo = 0, double hi = 1) -> Tensorf
{
  auto t = Tensorf::zeros(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

auto identity_module(const ScalePartitionScheme& scheme, Index C = 8)
    -> SanModule<float>
{
  auto m = make_san_module<float>(scheme, C);
  init_identity(m);
  return m;
}

auto bitwise_equal(const Tensorf& a, const Tensorf& b) -> bool
{
  return a.numel() == b.numel() &&
         std::memcmp(a.data().data(), b.data().data(),
                     sizeof(float) * static_cast<std::size_t>(a.numel())) == 0;
}

}  // namespace

TEST(Partition, VocPresetExamples)
{
  const auto voc = ScalePartitionScheme::voc();
  EXPECT_EQ(voc.ref_scale, 224);
  EXPECT_EQ(partition_index(120.0 * 120.0, voc), 0);
  EXPECT_EQ(partition_index(160.0 * 160.0, voc), 0);
  EXPECT_EQ(partition_index(200.0 * 200.0, voc), 1);
  EXPECT_EQ(partition_index(288.0 * 288.0, voc), 1);
  EXPECT_EQ(partition_index(300.0 * 300.0, voc), 2);
  EXPECT_EQ(partition_index(RoI{0, 0, 120, 120}, voc), 0);
}

TEST(Partition, CocoAndToyPresets)
{
  const auto coco = ScalePartitionScheme::coco();
  EXPECT_EQ(coco.ref_scale, 128);
  EXPECT_EQ(partition_index(64.0 * 64.0, coco), 0);
  EXPECT_EQ(partition_index(64.0 * 64.0 + 1, coco), 1);
  EXPECT_EQ(partition_index(192.0 * 192.0 + 1, coco), 2);
  const auto toy = ScalePartitionScheme::toy();
  EXPECT_EQ(toy.ref_scale, 48);
  EXPECT_EQ(toy.num_partitions(), 3);
  EXPECT_EQ(partition_index(24.0 * 24.0, toy), 0);
  EXPECT_EQ(partition_index(48.0 * 48.0, toy), 1);
  EXPECT_EQ(partition_index(49.0 * 49.0, toy), 2);
}

TEST(Partition, TotalMonotoneAndMatchesIntervalScan)
{
  Rng rng(1);
  for (const auto& scheme : {ScalePartitionScheme::voc(), ScalePartitionScheme::coco(),
                             ScalePartitionScheme::toy(), ScalePartitionScheme::single(50)})
  {
    double prev_area = 0;
    int prev = 0;
    std::vector<double> areas;
    for (int i = 0; i < 2000; ++i)
      areas.push_back(std::exp(rng.uniform(0, std::log(1e6))));
    std::sort(areas.begin(), areas.end());
    for (double a : areas)
    {
      const int p = partition_index(a, scheme);
      ASSERT_EQ(p, oracle::partition(a, scheme.boundaries));
      ASSERT_GE(p, 0);
      ASSERT_LT(p, scheme.num_partitions());
      if (a >= prev_area)
        ASSERT_GE(p, prev);
      prev_area = a;
      prev = p;
    }
  }
}

TEST(Partition, SchemeValidation)
{
  EXPECT_THROW((ScalePartitionScheme{48, {100, 100}}.validate()), ValueError);
  EXPECT_THROW((ScalePartitionScheme{48, {0}}.validate()), ValueError);
  EXPECT_THROW((ScalePartitionScheme{0, {}}.validate()), ValueError);
  EXPECT_NO_THROW(ScalePartitionScheme::single(48).validate());
  EXPECT_EQ(ScalePartitionScheme::single(48).num_partitions(), 1);
}

TEST(SanModule, OneSubnetPerPartition)
{
  auto m = make_san_module<float>(ScalePartitionScheme::voc(), 6);
  EXPECT_EQ(m.subnets.size(), 3u);
  EXPECT_EQ(m.channels(), 6);
  EXPECT_EQ(m.subnets[0].weight.tensor.shape(), (Shape{6, 6, 1, 1}));
  EXPECT_EQ(m.parameters().size(), 6u);
  EXPECT_EQ(m.parameters()[2]->name, "san.subnet1.weight");
}

TEST(SanForward, IdentityInitIsReluAndIdentityOnNonnegative)
{
  Rng rng(2);
  auto m = identity_module(ScalePartitionScheme::toy());
  auto signed_feat = random_feat({2, 8, 3, 3}, rng, -1, 1);
  auto nonneg = random_feat({2, 8, 3, 3}, rng, 0, 2);
  for (int i = 0; i < 3; ++i)
  {
    EXPECT_TRUE(bitwise_equal(san_forward(signed_feat, i, m), relu(signed_feat)));
    EXPECT_TRUE(bitwise_equal(san_forward(nonneg, i, m), nonneg));
  }
}

TEST(SanForward, IdentityFuseDoublesExactly)
{
  Rng rng(3);
  auto m = identity_module(ScalePartitionScheme::toy());
  auto x = random_feat({1, 8, 7, 7}, rng, 0, 5);
  auto fused = fuse(x, san_forward(x, 1, m), m);
  for (Index i = 0; i < x.numel(); ++i)
    ASSERT_EQ(fused.data()[i], 2 * x.data()[i]);
}

TEST(SanForward, ZeroFeatureGivesZero)
{
  Rng rng(4);
  auto m = make_san_module<float>(ScalePartitionScheme::toy(), 8);
  init_gaussian(m, 0.5, 7);
  auto y = san_forward(Tensorf::zeros({1, 8, 2, 2}), 2, m);
  EXPECT_EQ(y.data().abs().maxCoeff(), 0.0f);
}

TEST(SanForward, PositionwiseMixing)
{
  Rng rng(5);
  auto m = make_san_module<float>(ScalePartitionScheme::toy(), 8);
  init_gaussian(m, 0.5, 3);
  auto x = random_feat({1, 8, 4, 4}, rng, -1, 1);
  auto before = san_forward(x, 0, m);
  auto y = x.clone();
  for (Index c = 0; c < 8; ++c)
    y.data()[c * 16 + 5] += 0.75f;  // position (1, 1)
  auto after = san_forward(y, 0, m);
  for (Index c = 0; c < 8; ++c)
    for (Index p = 0; p < 16; ++p)
      if (p != 5)
        ASSERT_EQ(before.data()[c * 16 + p], after.data()[c * 16 + p]);
}

TEST(SanForward, ErrorsAreStructured)
{
  auto m = identity_module(ScalePartitionScheme::toy());
  EXPECT_THROW(san_forward(Tensorf::zeros({1, 8, 1, 1}), 3, m), ValueError);
  EXPECT_THROW(san_forward(Tensorf::zeros({1, 8, 1, 1}), -1, m), ValueError);
  EXPECT_THROW(san_forward(Tensorf::zeros({1, 5, 1, 1}), 0, m), ShapeError);
}

TEST(SanForward, PartitionedMatchesPerRoiBitwise)
{
  Rng rng(6);
  auto m = make_san_module<float>(ScalePartitionScheme::voc(), 8);
  init_gaussian(m, 0.4, 11);
  auto feats = random_feat({9, 8, 3, 3}, rng, -1, 1);
  std::vector<int> parts{2, 0, 1, 1, 0, 2, 2, 0, 1};
  auto merged = san_forward_partitioned(feats, std::span<const int>(parts), m);
  for (Index n = 0; n < 9; ++n)
  {
    std::vector<Index> one{n};
    auto single = san_forward(select_batch(feats, std::span<const Index>(one)),
                              parts[static_cast<std::size_t>(n)], m);
    for (Index i = 0; i < single.numel(); ++i)
      ASSERT_EQ(merged.data()[n * single.numel() + i], single.data()[i]);
  }
}

TEST(InitGaussian, ReplayAndStatistics)
{
  auto a = make_san_module<float>(ScalePartitionScheme::toy(), 32);
  auto b = make_san_module<float>(ScalePartitionScheme::toy(), 32);
  init_gaussian(a, 0.05, 42);
  init_gaussian(b, 0.05, 42);
  for (std::size_t i = 0; i < a.subnets.size(); ++i)
    EXPECT_TRUE(bitwise_equal(a.subnets[i].weight.tensor, b.subnets[i].weight.tensor));
  for (const auto& s : a.subnets)
  {
    const auto& w = s.weight.tensor.data();
    const double mean = w.template cast<double>().mean();
    const double var = (w.template cast<double>() - mean).square().mean();
    EXPECT_NEAR(std::sqrt(var), 0.05, 0.005);
    EXPECT_EQ(s.bias.tensor.data().abs().maxCoeff(), 0.0f);
  }
  init_gaussian(a, 0.0, 1);
  EXPECT_EQ(a.subnets[0].weight.tensor.data().abs().maxCoeff(), 0.0f);
  EXPECT_THROW(init_gaussian(a, -1.0, 1), ValueError);
}

TEST(Fuse, ZeroSanOutputIsBaseline)
{
  Rng rng(7);
  auto x = random_feat({2, 4, 3, 3}, rng, -1, 1);
  EXPECT_TRUE(bitwise_equal(fuse(x, Tensorf::zeros(x.shape())), x));
  EXPECT_THROW(fuse(x, Tensorf::zeros({2, 4, 3, 2})), ShapeError);
}

TEST(Fuse, ZeroGateStartsAtBaseline)
{
  Rng rng(8);
  auto m = identity_module(ScalePartitionScheme::toy());
  enable_fusion_gate(m, 0.0f);
  auto x = random_feat({1, 8, 3, 3}, rng, 0, 1);
  EXPECT_TRUE(bitwise_equal(fuse(x, san_forward(x, 0, m), m), x));
  EXPECT_EQ(m.parameters().back()->name, "san.fusion_gate");
}

TEST(Fuse, GradientReachesBothBranches)
{
  Rng rng(9);
  auto m = make_san_module<double>(ScalePartitionScheme::single(8), 3);
  init_gaussian(m, 0.5, 5);
  enable_fusion_gate(m, 0.7);
  auto x = Tensord::zeros({1, 3, 2, 2});
  for (Index i = 0; i < x.numel(); ++i)
    x.data()[i] = rng.uniform(0.2, 1.0);
  auto w = m.subnets[0].weight.tensor;
  auto gate = m.fusion_gate->tensor;
  const auto err = oracle::gradient_error(
      [&](std::vector<Tensord>& in) {
        m.subnets[0].weight.tensor = in[1];
        m.fusion_gate->tensor = in[2];
        auto out = fuse(in[0], san_forward(in[0], 0, m), m);
        return sum(out);
      },
      {x, w.clone(), gate.clone()});
  EXPECT_LT(err, 1e-4);
}

TEST(SanLoss, ZeroWhenMatchedAndHalfPerChannel)
{
  Rng rng(10);
  auto m = identity_module(ScalePartitionScheme::toy());
  auto feat = random_feat({1, 8, 7, 7}, rng, 0, 1);
  auto r = global_avg_pool(feat);
  EXPECT_EQ(san_loss_branch(feat, 0, m, detach(r)).item(), 0.0f);

  auto ones = Tensorf::full({1, 8, 2, 2}, 1.0f);
  auto target = Tensorf::full({1, 8, 1, 1}, 0.5f);
  EXPECT_FLOAT_EQ(san_loss_branch(ones, 1, m, target).item(), 0.125f * 8);
}

TEST(SanLoss, RejectsTrainableTarget)
{
  auto m = identity_module(ScalePartitionScheme::toy());
  auto t = Tensorf::zeros({1, 8, 1, 1});
  t.set_requires_grad(true);
  EXPECT_THROW(san_loss_branch(Tensorf::zeros({1, 8, 2, 2}), 0, m, t), ValueError);
}

TEST(SanLoss, BlocksUpstreamAndTrainsSubnet)
{
  Rng rng(11);
  auto m = make_san_module<float>(ScalePartitionScheme::toy(), 8);
  init_gaussian(m, 0.3, 2);
  auto upstream = Tensorf::zeros({8, 8, 1, 1});
  for (Index i = 0; i < upstream.numel(); ++i)
    upstream.data()[i] = static_cast<float>(rng.uniform(-0.5, 0.5));
  upstream.set_requires_grad(true);
  auto input = random_feat({1, 8, 3, 3}, rng, 0, 1);
  auto target = random_feat({1, 8, 1, 1}, rng, 0, 1);

  auto run = [&](bool with_san) {
    for (auto* p : m.parameters())
      p->tensor.zero_grad();
    upstream.zero_grad();
    auto feat = relu(conv2d(input, upstream, Tensorf::zeros({8}), 1, 0));
    auto loss = sum(fuse(feat, san_forward(feat, 1, m)));
    if (with_san)
      loss = elementwise_add(loss, san_loss_branch(feat, 1, m, target));
    loss.backward();
    return std::pair{Tensorf::Buffer(upstream.grad()),
                     Tensorf::Buffer(m.subnets[1].weight.tensor.grad())};
  };
  const auto [up_without, san_without] = run(false);
  const auto [up_with, san_with] = run(true);
  ASSERT_EQ(up_with.size(), up_without.size());
  EXPECT_EQ(std::memcmp(up_with.data(), up_without.data(),
                        sizeof(float) * static_cast<std::size_t>(up_with.size())),
            0);
  EXPECT_GT((san_with - san_without).abs().maxCoeff(), 0.0f);
}

TEST(SanLoss, BatchIsMeanOfBranches)
{
  Rng rng(12);
  auto m = make_san_module<double>(ScalePartitionScheme::toy(), 4);
  init_gaussian(m, 0.5, 9);
  auto feats = Tensord::zeros({5, 4, 2, 2});
  for (Index i = 0; i < feats.numel(); ++i)
    feats.data()[i] = rng.uniform(-1, 1);
  auto targets = Tensord::zeros({5, 4, 1, 1});
  for (Index i = 0; i < targets.numel(); ++i)
    targets.data()[i] = rng.uniform(0, 1);
  std::vector<int> parts{0, 2, 1, 0, 2};
  const double batch =
      san_loss_batch(feats, std::span<const int>(parts), m, targets).item();
  double mean = 0;
  for (Index n = 0; n < 5; ++n)
  {
    std::vector<Index> one{n};
    mean += san_loss_branch(select_batch(feats, std::span<const Index>(one)),
                            parts[static_cast<std::size_t>(n)], m,
                            select_batch(targets, std::span<const Index>(one)))
                .item();
  }
  EXPECT_NEAR(batch, mean / 5, 1e-12);
}

TEST(SanModule, SiameseWeightsAreShared)
{
  // The detection path and the loss branch read the same Parameter storage,
  // so an update is seen by both.
  Rng rng(13);
  auto m = identity_module(ScalePartitionScheme::toy());
  auto feat = random_feat({1, 8, 2, 2}, rng, 0, 1);
  m.subnets[0].weight.tensor.data() *= 2.0f;
  auto det = san_forward(feat, 0, m);
  auto target = detach(global_avg_pool(det));
  EXPECT_EQ(san_loss_branch(feat, 0, m, target).item(), 0.0f);
}
