#include <sanlab/synth.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

namespace sanlab {

namespace {

  constexpr int kSubsamples = 2;  // per axis
  constexpr double kBackground = 0.45;
  constexpr double kOffLevel = 0.08;

  auto quantize(float v) -> float
  {
    return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
  }

  // Shape and fill texture for a class id >= 1.
  auto shape_of(int class_id) -> int { return (class_id - 1) % 3; }
  auto texture_of(int class_id) -> int
  {
    return ((class_id - 1) + (class_id - 1) / 3) % 3;
  }

  // u, v in [0, 1) relative to the box.
  auto inside(int shape, double u, double v) -> bool
  {
    switch (shape)
    {
    case 0:
      return true;
    case 1:
      return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    default:
      return std::abs(u - 0.5) <= 0.5 * v;
    }
  }

  auto lit(int texture, double u, double v) -> bool
  {
    switch (texture)
    {
    case 0:
      return true;
    case 1:
      return static_cast<int>(std::floor(u * 6.0)) % 2 == 0;
    default:
      return (static_cast<int>(std::floor(u * 4.0)) +
              static_cast<int>(std::floor(v * 4.0))) %
                 2 ==
             0;
    }
  }

  auto background(int size, double amplitude, Rng& rng, int id) -> Image
  {
    auto pixels = Tensorf::zeros({1, 3, size, size});
    auto& d = pixels.data();
    for (Index i = 0; i < d.size(); ++i)
      d[i] = quantize(static_cast<float>(
          kBackground + amplitude * rng.uniform(-1.0, 1.0)));
    return {pixels, id};
  }

  // Texture coordinates scale with the box, so an object rendered at two
  // sizes differs only by resolution.
  auto draw(Image& img, const RoI& box, int class_id,
            const std::array<double, 3>& color) -> void
  {
    const int size = static_cast<int>(img.width());
    const int shape = shape_of(class_id), texture = texture_of(class_id);
    auto& d = img.pixels.data();
    const int x0 = std::max(0, static_cast<int>(std::floor(box.x1)));
    const int x1 = std::min(size, static_cast<int>(std::ceil(box.x2)));
    const int y0 = std::max(0, static_cast<int>(std::floor(box.y1)));
    const int y1 = std::min(size, static_cast<int>(std::ceil(box.y2)));
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x)
      {
        std::array<double, 3> acc{0, 0, 0};
        int covered = 0;
        for (int sy = 0; sy < kSubsamples; ++sy)
          for (int sx = 0; sx < kSubsamples; ++sx)
          {
            const double px = x + (sx + 0.5) / kSubsamples;
            const double py = y + (sy + 0.5) / kSubsamples;
            const double u = (px - box.x1) / box.width();
            const double v = (py - box.y1) / box.height();
            if (u < 0 || u >= 1 || v < 0 || v >= 1 || !inside(shape, u, v))
              continue;
            ++covered;
            const bool on = lit(texture, u, v);
            for (int c = 0; c < 3; ++c)
              acc[static_cast<std::size_t>(c)] +=
                  on ? color[static_cast<std::size_t>(c)] : kOffLevel;
          }
        if (covered == 0)
          continue;
        const double w = static_cast<double>(covered) /
                         (kSubsamples * kSubsamples);
        for (int c = 0; c < 3; ++c)
        {
          float& p = d[(c * size + y) * size + x];
          const double mean = acc[static_cast<std::size_t>(c)] / covered;
          p = quantize(static_cast<float>((1.0 - w) * p + w * mean));
        }
      }
  }

  auto object_color(Rng& rng) -> std::array<double, 3>
  {
    return {rng.uniform(0.65, 1.0), rng.uniform(0.65, 1.0),
            rng.uniform(0.65, 1.0)};
  }

  auto disjoint(const RoI& a, const RoI& b, double gap) -> bool
  {
    return a.x2 + gap <= b.x1 || b.x2 + gap <= a.x1 || a.y2 + gap <= b.y1 ||
           b.y2 + gap <= a.y1;
  }

}  // namespace

auto DatasetConfig::validate() const -> void
{
  if (num_images < 0)
    throw ValueError("DatasetConfig", "num_images must be >= 0");
  if (image_size < 16)
    throw ValueError("DatasetConfig", "image_size must be >= 16");
  if (num_classes < 2 || num_classes > 9)
    throw ValueError("DatasetConfig", "num_classes must be in [2, 9]");
  if (!(scale_min > 0) || scale_max < scale_min || scale_max > image_size)
    throw ValueError("DatasetConfig",
                     "scale range must lie within (0, image_size]");
  if (objects_min < 1 || objects_max < objects_min)
    throw ValueError("DatasetConfig", "invalid objects-per-image range");
  if (texture_amplitude < 0)
    throw ValueError("DatasetConfig", "texture amplitude must be >= 0");
}

auto generate_dataset(const DatasetConfig& cfg, int first_id) -> Dataset
{
  cfg.validate();
  Dataset data;
  const double log_lo = std::log(cfg.scale_min);
  const double log_hi = std::log(cfg.scale_max);
  for (int k = 0; k < cfg.num_images; ++k)
  {
    const int id = first_id + k;
    auto rng = Rng::derive(cfg.seed, "image", static_cast<std::uint64_t>(id));
    Sample s{background(cfg.image_size, cfg.texture_amplitude, rng, id), {}};

    const int count =
        cfg.objects_min +
        static_cast<int>(rng.below(
            static_cast<std::uint64_t>(cfg.objects_max - cfg.objects_min + 1)));
    struct Pending
    {
      int class_id;
      int side;
    };
    std::vector<Pending> pending;
    for (int o = 0; o < count; ++o)
    {
      const int cls = 1 + static_cast<int>(rng.below(
                              static_cast<std::uint64_t>(cfg.num_classes)));
      const int side = std::clamp(
          static_cast<int>(std::lround(std::exp(rng.uniform(log_lo, log_hi)))),
          1, cfg.image_size);
      pending.push_back({cls, side});
    }
    // Largest first, so big objects are not crowded out.
    std::stable_sort(pending.begin(), pending.end(),
                     [](const Pending& a, const Pending& b) {
                       return a.side > b.side;
                     });
    for (const auto& p : pending)
    {
      bool placed = false;
      for (int attempt = 0; attempt < 100 && !placed; ++attempt)
      {
        const auto span = static_cast<std::uint64_t>(cfg.image_size - p.side + 1);
        const double x = static_cast<double>(rng.below(span));
        const double y = static_cast<double>(rng.below(span));
        RoI box{x, y, x + p.side, y + p.side, id};
        if (std::all_of(s.annotations.begin(), s.annotations.end(),
                        [&](const Annotation& a) {
                          return disjoint(a.box, box, 2.0);
                        }))
        {
          draw(s.image, box, p.class_id, object_color(rng));
          s.annotations.push_back({box, p.class_id});
          placed = true;
        }
      }
      if (!placed)
        data.skipped.push_back("image " + std::to_string(id) + " class " +
                               std::to_string(p.class_id) + " side " +
                               std::to_string(p.side));
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

auto render_single_object(const DatasetConfig& cfg, int class_id, double side,
                          std::uint64_t seed, int image_id) -> Sample
{
  if (class_id < 1 || class_id > cfg.num_classes)
    throw ValueError("render_single_object", "class id out of range");
  if (!(side > 0) || side > cfg.image_size)
    throw ValueError("render_single_object", "side must be in (0, image_size]");
  auto rng = Rng::derive(seed, "render");
  Sample s{background(cfg.image_size, cfg.texture_amplitude, rng, image_id), {}};
  const double origin = std::floor(0.5 * (cfg.image_size - side));
  RoI box{origin, origin, origin + side, origin + side, image_id};
  draw(s.image, box, class_id, object_color(rng));
  s.annotations.push_back({box, class_id});
  return s;
}

auto make_proposals(std::span<const Annotation> gts, int n_pos_jitter,
                    int n_neg, Rng& rng, int image_width, int image_height,
                    int image_id, double jitter, double min_side)
    -> std::vector<RoI>
{
  const double W = image_width, H = image_height;
  std::vector<RoI> out;
  for (const auto& gt : gts)
    for (int j = 0; j < n_pos_jitter; ++j)
    {
      const double w = gt.box.width(), h = gt.box.height();
      const double cx = gt.box.x1 + 0.5 * w + w * rng.uniform(-jitter, jitter);
      const double cy = gt.box.y1 + 0.5 * h + h * rng.uniform(-jitter, jitter);
      const double nw = w * (1.0 + rng.uniform(-jitter, jitter));
      const double nh = h * (1.0 + rng.uniform(-jitter, jitter));
      RoI r{std::clamp(cx - 0.5 * nw, 0.0, W), std::clamp(cy - 0.5 * nh, 0.0, H),
            std::clamp(cx + 0.5 * nw, 0.0, W), std::clamp(cy + 0.5 * nh, 0.0, H),
            image_id};
      if (r.width() < 1.0 || r.height() < 1.0)
        r = RoI{gt.box.x1, gt.box.y1, gt.box.x2, gt.box.y2, image_id};
      out.push_back(r);
    }
  const double lo = std::min(min_side, std::min(W, H));
  for (int k = 0; k < n_neg; ++k)
  {
    const double w = rng.uniform(lo, W), h = rng.uniform(lo, H);
    const double x = rng.uniform(0.0, W - w), y = rng.uniform(0.0, H - h);
    out.push_back({x, y, x + w, y + h, image_id});
  }
  return out;
}

auto scale_statistics(std::span<const Annotation> annotations, int num_classes)
    -> std::vector<ClassScaleStats>
{
  std::vector<std::vector<double>> areas(static_cast<std::size_t>(num_classes));
  for (const auto& a : annotations)
    if (a.class_id >= 1 && a.class_id <= num_classes)
      areas[static_cast<std::size_t>(a.class_id - 1)].push_back(a.box.area());
  std::vector<ClassScaleStats> out;
  for (int c = 1; c <= num_classes; ++c)
  {
    auto& v = areas[static_cast<std::size_t>(c - 1)];
    ClassScaleStats st{c, v.size(), std::nan(""), std::nan("")};
    if (!v.empty())
    {
      std::sort(v.begin(), v.end());
      const std::size_t n = v.size();
      st.median_area = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
      double mean = 0;
      for (double a : v)
        mean += a;
      mean /= static_cast<double>(n);
      double var = 0;
      for (double a : v)
        var += (a - mean) * (a - mean);
      st.std_area = std::sqrt(var / static_cast<double>(n));
    }
    out.push_back(st);
  }
  return out;
}

auto scale_statistics(const Dataset& data, int num_classes)
    -> std::vector<ClassScaleStats>
{
  std::vector<Annotation> all;
  for (const auto& s : data.samples)
    all.insert(all.end(), s.annotations.begin(), s.annotations.end());
  return scale_statistics(all, num_classes);
}

auto write_ppm(const std::filesystem::path& path, const Image& img) -> void
{
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
  const Index H = img.height(), W = img.width();
  os << "P6\n" << W << ' ' << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(W * 3));
  const auto& d = img.pixels.data();
  for (Index y = 0; y < H; ++y)
  {
    for (Index x = 0; x < W; ++x)
      for (Index c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(x * 3 + c)] = static_cast<unsigned char>(
            std::lround(std::clamp(d[(c * H + y) * W + x], 0.0f, 1.0f) * 255.0f));
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row.size()));
  }
  if (!os)
    throw std::runtime_error("short write to " + path.string());
}

auto read_ppm(const std::filesystem::path& path, int id) -> Image
{
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  Index W = 0, H = 0;
  int maxval = 0;
  is >> magic >> W >> H >> maxval;
  if (magic != "P6" || W < 1 || H < 1 || maxval != 255)
    throw std::runtime_error(path.string() + ": not an 8-bit P6 image");
  is.get();
  std::vector<unsigned char> raw(static_cast<std::size_t>(W * H * 3));
  is.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (!is)
    throw std::runtime_error(path.string() + ": truncated pixel data");
  auto pixels = Tensorf::zeros({1, 3, H, W});
  auto& d = pixels.data();
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      for (Index c = 0; c < 3; ++c)
        d[(c * H + y) * W + x] =
            static_cast<float>(raw[static_cast<std::size_t>((y * W + x) * 3 + c)]) /
            255.0f;
  return {pixels, id};
}

namespace {
  auto image_name(int id) -> std::string
  {
    std::ostringstream os;
    os << "image_";
    os.width(5);
    os.fill('0');
    os << id << ".ppm";
    return os.str();
  }
}  // namespace

auto write_split(const std::filesystem::path& dir, const Dataset& data) -> void
{
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest)
    throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
  manifest.precision(17);
  for (const auto& line : data.skipped)
    manifest << "# skipped " << line << '\n';
  for (const auto& s : data.samples)
  {
    const auto name = image_name(s.image.id);
    write_ppm(dir / name, s.image);
    manifest << name << '\n';
    for (const auto& a : s.annotations)
      manifest << a.class_id << ' ' << a.box.x1 << ' ' << a.box.y1 << ' '
               << a.box.x2 << ' ' << a.box.y2 << '\n';
  }
}

auto read_split(const std::filesystem::path& dir) -> Dataset
{
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest)
    throw std::runtime_error("missing manifest in " + dir.string());
  Dataset data;
  std::string line;
  while (std::getline(manifest, line))
  {
    if (line.empty())
      continue;
    if (line[0] == '#')
    {
      const std::string tag = "# skipped ";
      if (line.rfind(tag, 0) == 0)
        data.skipped.push_back(line.substr(tag.size()));
      continue;
    }
    std::istringstream fields(line);
    std::vector<std::string> tok;
    for (std::string t; fields >> t;)
      tok.push_back(t);
    if (tok.size() == 1)
    {
      const auto& name = tok[0];
      int id = 0;
      if (name.size() > 10)
        id = std::stoi(name.substr(6, name.size() - 10));
      data.samples.push_back({read_ppm(dir / name, id), {}});
    }
    else if (tok.size() == 5 && !data.samples.empty())
    {
      const int id = data.samples.back().image.id;
      data.samples.back().annotations.push_back(
          {RoI{std::stod(tok[1]), std::stod(tok[2]), std::stod(tok[3]),
               std::stod(tok[4]), id},
           std::stoi(tok[0])});
    }
    else
      throw std::runtime_error("malformed manifest line: " + line);
  }
  return data;
}

auto write_scale_statistics(const std::filesystem::path& path,
                            std::span<const ClassScaleStats> stats) -> void
{
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
  os.precision(10);
  os << "class,median_area,std_area\n";
  for (const auto& s : stats)
    os << s.class_id << ',' << s.median_area << ',' << s.std_area << '\n';
}

}  // namespace sanlab
