#include <sanlab/san.hpp>
#include <sanlab/synth.hpp>

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

using namespace sanlab;
namespace fs = std::filesystem;

namespace {

auto config(int n, std::uint64_t seed = 7) -> DatasetConfig
{
  DatasetConfig cfg;
  cfg.num_images = n;
  cfg.seed = seed;
  return cfg;
}

auto same_pixels(const Image& a, const Image& b) -> bool
{
  return a.pixels.shape() == b.pixels.shape() &&
         std::memcmp(a.pixels.data().data(), b.pixels.data().data(),
                     sizeof(float) *
                         static_cast<std::size_t>(a.pixels.numel())) == 0;
}

auto temp_dir(const std::string& name) -> fs::path
{
  auto dir = fs::temp_directory_path() / ("sanlab_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Dataset, EmptyConfig)
{
  const auto data = generate_dataset(config(0));
  EXPECT_TRUE(data.samples.empty());
  EXPECT_TRUE(data.skipped.empty());
}

TEST(Dataset, ConfigValidation)
{
  auto cfg = config(1);
  cfg.num_classes = 1;
  EXPECT_THROW(generate_dataset(cfg), ValueError);
  cfg = config(1);
  cfg.scale_max = 200;
  EXPECT_THROW(generate_dataset(cfg), ValueError);
  cfg = config(1);
  cfg.scale_min = 0;
  EXPECT_THROW(generate_dataset(cfg), ValueError);
  cfg = config(-1);
  EXPECT_THROW(generate_dataset(cfg), ValueError);
}

TEST(Dataset, DeterministicUnderSeed)
{
  const auto a = generate_dataset(config(12));
  const auto b = generate_dataset(config(12));
  ASSERT_EQ(a.samples.size(), 12u);
  for (std::size_t i = 0; i < a.samples.size(); ++i)
  {
    EXPECT_TRUE(same_pixels(a.samples[i].image, b.samples[i].image));
    EXPECT_EQ(a.samples[i].annotations, b.samples[i].annotations);
  }
  const auto c = generate_dataset(config(12, 8));
  EXPECT_FALSE(same_pixels(a.samples[0].image, c.samples[0].image));
}

TEST(Dataset, ImagesAreIndependentOfBatchPosition)
{
  const auto whole = generate_dataset(config(10));
  const auto tail = generate_dataset(config(3), 7);
  for (std::size_t i = 0; i < 3; ++i)
  {
    EXPECT_EQ(tail.samples[i].image.id, 7 + static_cast<int>(i));
    EXPECT_TRUE(same_pixels(tail.samples[i].image, whole.samples[7 + i].image));
    EXPECT_EQ(tail.samples[i].annotations, whole.samples[7 + i].annotations);
  }
}

TEST(Dataset, AnnotationInvariants)
{
  const auto cfg = config(200);
  const auto data = generate_dataset(cfg);
  for (const auto& s : data.samples)
  {
    ASSERT_EQ(s.image.pixels.shape(), (Shape{1, 3, 96, 96}));
    ASSERT_GE(s.annotations.size(), 1u);
    ASSERT_LE(s.annotations.size(), 3u);
    for (std::size_t i = 0; i < s.annotations.size(); ++i)
    {
      const auto& a = s.annotations[i];
      ASSERT_TRUE(a.box.valid());
      ASSERT_GE(a.box.x1, 0);
      ASSERT_GE(a.box.y1, 0);
      ASSERT_LE(a.box.x2, 96);
      ASSERT_LE(a.box.y2, 96);
      ASSERT_GE(a.class_id, 1);
      ASSERT_LE(a.class_id, 3);
      ASSERT_EQ(a.box.image_id, s.image.id);
      for (std::size_t j = 0; j < i; ++j)
        ASSERT_EQ(iou(a.box, s.annotations[j].box), 0.0);
    }
    ASSERT_GE(s.image.pixels.data().minCoeff(), 0.0f);
    ASSERT_LE(s.image.pixels.data().maxCoeff(), 1.0f);
  }
}

TEST(Dataset, EveryToyPartitionGetsTwentyPercent)
{
  const auto data = generate_dataset(config(200));
  const auto scheme = ScalePartitionScheme::toy();
  std::vector<int> counts(3, 0);
  int total = 0;
  for (const auto& s : data.samples)
    for (const auto& a : s.annotations)
    {
      ++counts[static_cast<std::size_t>(partition_index(a.box, scheme))];
      ++total;
    }
  for (int c : counts)
    EXPECT_GE(c, 0.2 * total) << c << " of " << total;
}

TEST(Dataset, CrowdedPlacementIsSkippedAndRecorded)
{
  auto cfg = config(5);
  cfg.image_size = 16;
  cfg.scale_min = 12;
  cfg.scale_max = 16;
  cfg.objects_min = 3;
  cfg.objects_max = 3;
  const auto data = generate_dataset(cfg);
  EXPECT_EQ(data.samples.size(), 5u);
  EXPECT_FALSE(data.skipped.empty());
  for (const auto& s : data.samples)
    EXPECT_EQ(s.annotations.size(), 1u);
}

TEST(RenderSingleObject, CentredAndSeeded)
{
  const auto cfg = config(0);
  const auto a = render_single_object(cfg, 2, 40, 5, 9);
  ASSERT_EQ(a.annotations.size(), 1u);
  EXPECT_EQ(a.annotations[0].box, (RoI{28, 28, 68, 68, 9}));
  EXPECT_EQ(a.annotations[0].class_id, 2);
  EXPECT_TRUE(same_pixels(a.image, render_single_object(cfg, 2, 40, 5, 9).image));
  EXPECT_THROW(render_single_object(cfg, 4, 40, 5), ValueError);
  EXPECT_THROW(render_single_object(cfg, 1, 97, 5), ValueError);
}

TEST(Proposals, EmptyAndExactCopies)
{
  Rng rng(1);
  const std::vector<Annotation> gts{{{10, 12, 40, 50, 4}, 1}, {{50, 50, 90, 95, 4}, 2}};
  EXPECT_TRUE(make_proposals(gts, 0, 0, rng, 96, 96, 4).empty());
  const auto copies = make_proposals(gts, 3, 0, rng, 96, 96, 4, 0.0);
  ASSERT_EQ(copies.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i)
    EXPECT_EQ(copies[i], gts[i / 3].box);
}

TEST(Proposals, InvariantsAndReplay)
{
  const auto data = generate_dataset(config(50));
  Rng a(3), b(3);
  for (const auto& s : data.samples)
  {
    const auto p = make_proposals(s.annotations, 8, 16, a, 96, 96, s.image.id);
    const auto q = make_proposals(s.annotations, 8, 16, b, 96, 96, s.image.id);
    ASSERT_EQ(p, q);
    ASSERT_EQ(p.size(), 8 * s.annotations.size() + 16);
    for (const auto& r : p)
    {
      ASSERT_TRUE(r.valid());
      ASSERT_GE(r.x1, 0);
      ASSERT_GE(r.y1, 0);
      ASSERT_LE(r.x2, 96);
      ASSERT_LE(r.y2, 96);
      ASSERT_EQ(r.image_id, s.image.id);
    }
  }
}

TEST(ScaleStatistics, HandValues)
{
  std::vector<Annotation> one{{{0, 0, 3, 3}, 1}};
  auto st = scale_statistics(one, 2);
  ASSERT_EQ(st.size(), 2u);
  EXPECT_EQ(st[0].count, 1u);
  EXPECT_DOUBLE_EQ(st[0].median_area, 9);
  EXPECT_DOUBLE_EQ(st[0].std_area, 0);
  EXPECT_EQ(st[1].count, 0u);
  EXPECT_TRUE(std::isnan(st[1].median_area));

  std::vector<Annotation> two{{{0, 0, 2, 2}, 1}, {{0, 0, 4, 4}, 1}};
  st = scale_statistics(two, 1);
  EXPECT_DOUBLE_EQ(st[0].median_area, 10);
  EXPECT_DOUBLE_EQ(st[0].std_area, 6);
}

TEST(ScaleStatistics, MatchesBruteForce)
{
  Rng rng(11);
  std::vector<Annotation> anns;
  for (int i = 0; i < 1000; ++i)
  {
    const double w = rng.uniform(1, 90), h = rng.uniform(1, 90);
    anns.push_back({{0, 0, w, h}, 1 + static_cast<int>(rng.below(3))});
  }
  const auto st = scale_statistics(anns, 3);
  for (int c = 1; c <= 3; ++c)
  {
    // Selection by counting: the median is the average of the elements of
    // rank floor((n-1)/2) and floor(n/2).
    std::vector<double> v;
    for (const auto& a : anns)
      if (a.class_id == c)
        v.push_back(a.box.area());
    const auto n = v.size();
    auto rank_value = [&](std::size_t k) {
      for (double x : v)
      {
        std::size_t less = 0, equal = 0;
        for (double y : v)
        {
          less += y < x;
          equal += y == x;
        }
        if (less <= k && k < less + equal)
          return x;
      }
      return std::nan("");
    };
    const double median = 0.5 * (rank_value((n - 1) / 2) + rank_value(n / 2));
    long double s = 0, s2 = 0;
    for (double x : v)
    {
      s += x;
      s2 += static_cast<long double>(x) * x;
    }
    const long double mean = s / n;
    const double sd = std::sqrt(static_cast<double>(s2 / n - mean * mean));
    const auto& row = st[static_cast<std::size_t>(c - 1)];
    EXPECT_EQ(row.count, n);
    EXPECT_DOUBLE_EQ(row.median_area, median);
    EXPECT_NEAR(row.std_area, sd, 1e-6 * sd);
  }
}

TEST(ScaleStatistics, CsvHasOneRowPerClass)
{
  const auto data = generate_dataset(config(30));
  const auto dir = temp_dir("stats");
  const auto st = scale_statistics(data, 3);
  write_scale_statistics(dir / "scale_stats.csv", st);
  std::ifstream in(dir / "scale_stats.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "class,median_area,std_area");
  int rows = 0;
  while (std::getline(in, line))
    EXPECT_EQ(line.rfind(std::to_string(++rows) + ",", 0), 0u);
  EXPECT_EQ(rows, 3);
}

TEST(DiskFormat, PpmRoundTripIsExact)
{
  const auto data = generate_dataset(config(2));
  const auto dir = temp_dir("ppm");
  write_ppm(dir / "a.ppm", data.samples[0].image);
  const auto back = read_ppm(dir / "a.ppm", 0);
  // Pixels are stored as bytes; rendered values are already quantised.
  EXPECT_TRUE(same_pixels(back, data.samples[0].image));
  std::ifstream in(dir / "a.ppm", std::ios::binary);
  std::string magic;
  in >> magic;
  EXPECT_EQ(magic, "P6");
  EXPECT_THROW(read_ppm(dir / "missing.ppm"), std::runtime_error);
}

TEST(DiskFormat, SplitRoundTrip)
{
  auto cfg = config(6);
  const auto data = generate_dataset(cfg, 100);
  const auto dir = temp_dir("split");
  write_split(dir, data);
  const auto back = read_split(dir);
  ASSERT_EQ(back.samples.size(), data.samples.size());
  for (std::size_t i = 0; i < data.samples.size(); ++i)
  {
    EXPECT_EQ(back.samples[i].image.id, data.samples[i].image.id);
    EXPECT_EQ(back.samples[i].annotations, data.samples[i].annotations);
    EXPECT_TRUE(same_pixels(back.samples[i].image, data.samples[i].image));
  }
  EXPECT_EQ(back.skipped, data.skipped);
  EXPECT_THROW(read_split(dir / "nope"), std::runtime_error);
}
