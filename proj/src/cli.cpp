#include <sanlab/cli.hpp>
#include <sanlab/checkpoint.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace sanlab {

namespace fs = std::filesystem;

namespace {

  enum class Kind
  {
    integer,
    seed,
    real,
    boolean,
    choice,
    int_list,
    optional_int,
  };

  struct KeySpec
  {
    const char* key;
    const char* fallback;
    Kind kind;
    const char* help;
    std::vector<std::string> choices = {};
  };

  auto key_table() -> const std::vector<KeySpec>&
  {
    static const std::vector<KeySpec> table{
        {"seed", "0", Kind::seed, "master seed (falls back to $SANLAB_SEED)"},
        // data
        {"num_images", "200", Kind::integer, "training images"},
        {"test_images", "50", Kind::integer, "held-out images"},
        {"image_size", "96", Kind::integer, "square image side in pixels"},
        {"num_classes", "3", Kind::integer, "object classes (2..9)"},
        {"scale_min", "12", Kind::real, "smallest object side"},
        {"scale_max", "80", Kind::real, "largest object side"},
        {"objects_min", "1", Kind::integer, "objects per image, lower bound"},
        {"objects_max", "3", Kind::integer, "objects per image, upper bound"},
        {"texture_amplitude", "0.08", Kind::real, "background noise amplitude"},
        // training
        {"iterations", "2000", Kind::integer, "SGD iterations"},
        {"base_lr", "0.01", Kind::real, "initial learning rate"},
        {"lr_decay_step", "1500", Kind::integer, "iterations per decay"},
        {"lr_decay_factor", "0.1", Kind::real, "learning-rate decay factor"},
        {"momentum", "0.9", Kind::real, "SGD momentum"},
        {"weight_decay", "0.0005", Kind::real, "L2 weight decay"},
        {"images_per_batch", "2", Kind::integer, "images per mini-batch"},
        {"rois_per_image", "32", Kind::integer, "RoIs sampled per image"},
        {"positive_fraction", "0.25", Kind::real, "cap on positive RoIs"},
        {"san_samples", "16", Kind::integer,
         "RoIs per mini-batch used by the scale-aware loss"},
        {"san_loss_weight", "1", Kind::real, "weight of the scale-aware loss"},
        {"check_gradient_blocking", "false", Kind::boolean,
         "verify every step that the scale-aware loss leaves the backbone alone"},
        // model
        {"san", "full", Kind::choice, "off | no-loss | full",
         {"off", "no-loss", "full"}},
        {"init", "identity", Kind::choice,
         "identity | gaussian | identity-zero-fusion",
         {"identity", "gaussian", "identity-zero-fusion"}},
        {"gaussian_std", "0.01", Kind::real, "std of gaussian SAN init"},
        {"san_pool", "avg", Kind::choice, "avg | max", {"avg", "max"}},
        {"pool_size", "7", Kind::integer, "RoI pooling output size"},
        {"scheme", "toy", Kind::choice, "partition preset: toy | voc | coco",
         {"toy", "voc", "coco"}},
        {"partitions", "", Kind::optional_int, "number of scale partitions"},
        {"ref_scale", "", Kind::optional_int, "reference RoI side"},
        {"boundaries", "", Kind::int_list,
         "partition boundaries as side lengths, e.g. 24,48"},
        // evaluation and analysis
        {"eval_proposals_per_gt", "8", Kind::integer,
         "jittered proposals per ground truth at test time"},
        {"eval_negatives", "16", Kind::integer, "random proposals per test image"},
        {"score_threshold", "0.05", Kind::real, "minimum detection score"},
        {"nms_threshold", "0.3", Kind::real, "NMS IoU threshold"},
        {"cam_k", "10", Kind::integer, "top channels per scale"},
        {"cam_scales", "16,24,32,48,64,96", Kind::int_list, "CAM sweep sides"},
        {"cam_class", "3", Kind::integer, "class of the rendered CAM image"},
        {"cam_side", "80", Kind::integer, "object side of the rendered CAM image"},
        {"normalize_rois", "false", Kind::boolean,
         "resize every scale back to ref_scale before the backbone"},
        {"cam_per_column", "false", Kind::boolean,
         "per-column max normalisation of the CAM heatmap"},
        {"rmse_scales", "16,24,32,48,64,80", Kind::int_list,
         "object sides rendered for the RMSE report"},
    };
    return table;
  }

  auto find_key(const std::string& key) -> const KeySpec*
  {
    for (const auto& k : key_table())
      if (key == k.key)
        return &k;
    return nullptr;
  }

  auto trim(std::string s) -> std::string
  {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos)
      return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  auto parse_long(const std::string& key, const std::string& v) -> long long
  {
    std::size_t used = 0;
    long long x = 0;
    try
    {
      x = std::stoll(v, &used);
    }
    catch (const std::exception&)
    {
      used = 0;
    }
    if (v.empty() || used != v.size())
      throw UsageError(key + ": expected an integer, got '" + v + "'");
    return x;
  }

  auto parse_real(const std::string& key, const std::string& v) -> double
  {
    std::size_t used = 0;
    double x = 0;
    try
    {
      x = std::stod(v, &used);
    }
    catch (const std::exception&)
    {
      used = 0;
    }
    if (v.empty() || used != v.size() || !std::isfinite(x))
      throw UsageError(key + ": expected a finite number, got '" + v + "'");
    return x;
  }

  auto parse_list(const std::string& key, const std::string& v)
      -> std::vector<int>
  {
    std::vector<int> out;
    if (trim(v).empty())
      return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
      out.push_back(static_cast<int>(parse_long(key, trim(item))));
    return out;
  }

  auto normalise(const KeySpec& spec, const std::string& raw) -> std::string
  {
    const auto v = trim(raw);
    const std::string key = spec.key;
    switch (spec.kind)
    {
    case Kind::integer:
      return std::to_string(parse_long(key, v));
    case Kind::seed:
    {
      const auto x = parse_long(key, v);
      if (x < 0)
        throw UsageError("seed must be >= 0");
      return std::to_string(x);
    }
    case Kind::optional_int:
      return v.empty() ? v : std::to_string(parse_long(key, v));
    case Kind::real:
      parse_real(key, v);
      return v;
    case Kind::boolean:
      if (v == "true" || v == "1" || v == "yes" || v == "on")
        return "true";
      if (v == "false" || v == "0" || v == "no" || v == "off")
        return "false";
      throw UsageError(key + ": expected true or false, got '" + v + "'");
    case Kind::choice:
    {
      // `average` is accepted as a synonym for `avg`.
      const auto w = (key == "san_pool" && v == "average") ? "avg" : v;
      if (std::find(spec.choices.begin(), spec.choices.end(), w) ==
          spec.choices.end())
      {
        std::string all;
        for (const auto& c : spec.choices)
          all += (all.empty() ? "" : ", ") + c;
        throw UsageError(key + ": expected one of " + all + ", got '" + v + "'");
      }
      return w;
    }
    case Kind::int_list:
    {
      std::string out;
      for (int x : parse_list(key, v))
        out += (out.empty() ? "" : ",") + std::to_string(x);
      return out;
    }
    }
    return v;
  }

  auto ensure_dir(const fs::path& dir) -> void
  {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir))
      throw UsageError("cannot create output directory " + dir.string() +
                       (ec ? ": " + ec.message() : ""));
    const auto probe = dir / ".sanlab-write-test";
    {
      std::ofstream os(probe);
      if (!os)
        throw UsageError("output directory " + dir.string() + " is not writable");
    }
    fs::remove(probe, ec);
  }

  auto require_file(const fs::path& p, const std::string& what) -> void
  {
    if (!fs::is_regular_file(p))
      throw UsageError(what + " not found: " + p.string());
  }

  auto require_split(const fs::path& data_dir, const std::string& split) -> fs::path
  {
    const auto dir = data_dir / split;
    require_file(dir / "manifest.txt", split + " manifest");
    return dir;
  }

  auto load_model(const fs::path& checkpoint) -> DetectorModel
  {
    require_file(checkpoint, "checkpoint");
    return read_checkpoint(checkpoint);
  }

}  // namespace

RunConfig::RunConfig()
{
  for (const auto& k : key_table())
  {
    values_[k.key] = k.fallback;
    explicit_[k.key] = false;
  }
}

auto RunConfig::known_keys() -> std::vector<std::string>
{
  std::vector<std::string> out;
  for (const auto& k : key_table())
    out.emplace_back(k.key);
  return out;
}

auto RunConfig::is_known(const std::string& key) -> bool
{
  return find_key(key) != nullptr;
}

auto RunConfig::load_file(const fs::path& path) -> void
{
  std::ifstream is(path);
  if (!is)
    throw UsageError("cannot read config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(is, line))
  {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    if (trim(line).empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(path.string() + ":" + std::to_string(lineno) +
                       ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    try
    {
      set(key, line.substr(eq + 1));
    }
    catch (const UsageError& e)
    {
      throw UsageError(path.string() + ":" + std::to_string(lineno) + ": " +
                       e.what());
    }
  }
}

auto RunConfig::set(const std::string& key, const std::string& value) -> void
{
  const auto* spec = find_key(key);
  if (!spec)
    throw UsageError("unknown configuration key '" + key + "'");
  values_[key] = normalise(*spec, value);
  explicit_[key] = true;
}

auto RunConfig::get(const std::string& key) const -> const std::string&
{
  auto it = values_.find(key);
  if (it == values_.end())
    throw UsageError("unknown configuration key '" + key + "'");
  return it->second;
}

auto RunConfig::is_set(const std::string& key) const -> bool
{
  auto it = explicit_.find(key);
  return it != explicit_.end() && it->second;
}

auto RunConfig::apply_environment() -> void
{
  if (is_set("seed"))
    return;
  if (const char* env = std::getenv("SANLAB_SEED"); env && *env)
  {
    try
    {
      set("seed", env);
    }
    catch (const UsageError& e)
    {
      throw UsageError(std::string("SANLAB_SEED: ") + e.what());
    }
  }
}

auto RunConfig::get_int(const std::string& key) const -> int
{
  return static_cast<int>(parse_long(key, get(key)));
}

auto RunConfig::get_double(const std::string& key) const -> double
{
  return parse_real(key, get(key));
}

auto RunConfig::get_bool(const std::string& key) const -> bool
{
  return get(key) == "true";
}

auto RunConfig::get_ints(const std::string& key) const -> std::vector<int>
{
  return parse_list(key, get(key));
}

auto RunConfig::seed() const -> std::uint64_t
{
  return static_cast<std::uint64_t>(parse_long("seed", get("seed")));
}

auto RunConfig::dataset_config() const -> DatasetConfig
{
  DatasetConfig c;
  c.num_images = get_int("num_images");
  c.image_size = get_int("image_size");
  c.num_classes = get_int("num_classes");
  c.scale_min = get_double("scale_min");
  c.scale_max = get_double("scale_max");
  c.objects_min = get_int("objects_min");
  c.objects_max = get_int("objects_max");
  c.texture_amplitude = get_double("texture_amplitude");
  c.seed = seed();
  return c;
}

auto RunConfig::test_config() const -> DatasetConfig
{
  auto c = dataset_config();
  c.num_images = get_int("test_images");
  return c;
}

auto RunConfig::scheme() const -> ScalePartitionScheme
{
  const auto& preset = get("scheme");
  auto s = preset == "voc"    ? ScalePartitionScheme::voc()
           : preset == "coco" ? ScalePartitionScheme::coco()
                              : ScalePartitionScheme::toy();
  if (!get("ref_scale").empty())
  {
    s.ref_scale = get_int("ref_scale");
    if (s.ref_scale < 1)
      throw UsageError("ref_scale must be >= 1");
  }
  const auto sides = get_ints("boundaries");
  const bool have_bounds = is_set("boundaries") && !sides.empty();
  if (have_bounds)
  {
    s.boundaries.clear();
    for (int side : sides)
    {
      if (side < 1)
        throw UsageError("boundaries must be positive side lengths");
      s.boundaries.push_back(static_cast<double>(side) * side);
    }
  }
  if (!get("partitions").empty())
  {
    const int p = get_int("partitions");
    if (p < 1)
      throw UsageError("partitions must be >= 1");
    if (have_bounds && p != s.num_partitions())
      throw UsageError("partitions = " + std::to_string(p) + " but " +
                       std::to_string(sides.size()) +
                       " boundaries give " +
                       std::to_string(s.num_partitions()) + " partitions");
    if (!have_bounds && p == 1)
      s.boundaries.clear();
    else if (!have_bounds && p != s.num_partitions())
      throw UsageError("partitions = " + std::to_string(p) +
                       " needs explicit boundaries (p - 1 side lengths)");
  }
  try
  {
    s.validate();
  }
  catch (const ValueError& e)
  {
    throw UsageError(e.what());
  }
  return s;
}

auto RunConfig::model_config() const -> ModelConfig
{
  ModelConfig m;
  m.num_classes = get_int("num_classes");
  m.scheme = scheme();
  m.san = parse_san_mode(get("san"));
  m.init = parse_init_mode(get("init"));
  m.gaussian_std = get_double("gaussian_std");
  m.san_pool = parse_pool_mode(get("san_pool"));
  m.pool_size = get_int("pool_size");
  m.seed = seed();
  if (m.san == SanMode::off &&
      (m.init != InitMode::identity || is_set("partitions") ||
       is_set("boundaries")))
    throw UsageError("san = off builds no SAN; init, partitions and boundaries "
                     "do not apply");
  if (m.san != SanMode::full && is_set("san_samples"))
    throw UsageError("san_samples only applies with san = full");
  return m;
}

auto RunConfig::training_config() const -> TrainingConfig
{
  TrainingConfig t;
  t.model = model_config();
  t.base_lr = get_double("base_lr");
  t.lr_decay_step = get_int("lr_decay_step");
  t.lr_decay_factor = get_double("lr_decay_factor");
  t.momentum = get_double("momentum");
  t.weight_decay = get_double("weight_decay");
  t.iterations = get_int("iterations");
  t.images_per_batch = get_int("images_per_batch");
  t.rois_per_image = get_int("rois_per_image");
  t.positive_fraction = get_double("positive_fraction");
  t.san_samples = get_int("san_samples");
  t.san_loss_weight = get_double("san_loss_weight");
  t.check_gradient_blocking = get_bool("check_gradient_blocking");
  try
  {
    t.validate();
  }
  catch (const ValueError& e)
  {
    throw UsageError(e.what());
  }
  return t;
}

auto RunConfig::to_json() const -> std::string
{
  nlohmann::ordered_json j;
  for (const auto& [k, v] : values_)
    j[k] = v;
  return j.dump(2);
}

auto write_run_meta(const fs::path& dir, const std::string& command,
                    const RunConfig& config,
                    const std::vector<std::string>& outputs) -> void
{
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config"] = nlohmann::ordered_json::parse(config.to_json());
  j["outputs"] = outputs;
  std::ofstream os(dir / "run-meta.json");
  if (!os)
    throw std::runtime_error("cannot write " + (dir / "run-meta.json").string());
  os << j.dump(2) << '\n';
}

auto cmd_gen_data(const RunConfig& config, const fs::path& out_dir) -> void
{
  const auto train_cfg = config.dataset_config();
  const auto test_cfg = config.test_config();
  try
  {
    train_cfg.validate();
    test_cfg.validate();
  }
  catch (const ValueError& e)
  {
    throw UsageError(e.what());
  }
  ensure_dir(out_dir);
  const auto train = generate_dataset(train_cfg, 0);
  const auto test = generate_dataset(test_cfg, train_cfg.num_images);
  write_split(out_dir / "train", train);
  write_split(out_dir / "test", test);
  const auto stats = scale_statistics(train, train_cfg.num_classes);
  write_scale_statistics(out_dir / "scale_stats.csv", stats);
  write_run_meta(out_dir, "gen-data", config,
                 {"train/manifest.txt", "test/manifest.txt", "scale_stats.csv"});
}

auto cmd_train(const RunConfig& config, const fs::path& data_dir,
               const fs::path& out_dir) -> TrainResult
{
  const auto cfg = config.training_config();
  const auto split = require_split(data_dir, "train");
  ensure_dir(out_dir);
  const auto data = read_split(split);
  for (const auto& s : data.samples)
    for (const auto& a : s.annotations)
      if (a.class_id < 1 || a.class_id > cfg.model.num_classes)
        throw UsageError("training data has class " +
                         std::to_string(a.class_id) + " but num_classes = " +
                         std::to_string(cfg.model.num_classes));
  auto result = train(data, cfg);
  write_checkpoint(out_dir / "model.ckpt", result.model);
  write_training_log(out_dir / "train_log.csv", result.log);
  write_run_meta(out_dir, "train", config, {"model.ckpt", "train_log.csv"});
  return result;
}

auto cmd_eval(const RunConfig& config, const fs::path& checkpoint,
              const fs::path& data_dir, const fs::path& out_dir,
              EvalOptions options) -> ApResult
{
  auto model = load_model(checkpoint);
  const auto split = require_split(data_dir, "test");
  ensure_dir(out_dir);
  const auto data = read_split(split);
  if (data.samples.empty())
    throw UsageError("test split in " + data_dir.string() + " has no images");

  std::vector<Detection> dets;
  std::vector<Annotation> gts;
  const int per_gt = config.get_int("eval_proposals_per_gt");
  const int negatives = config.get_int("eval_negatives");
  for (const auto& s : data.samples)
  {
    gts.insert(gts.end(), s.annotations.begin(), s.annotations.end());
    if (options.oracle)
    {
      for (const auto& a : s.annotations)
        dets.push_back({a.box, a.class_id, 1.0});
      continue;
    }
    auto rng = Rng::derive(config.seed(), "eval.proposals",
                           static_cast<std::uint64_t>(s.image.id));
    const auto props = make_proposals(
        s.annotations, per_gt, negatives, rng, static_cast<int>(s.image.width()),
        static_cast<int>(s.image.height()), s.image.id);
    for (const auto& d :
         detect(model, s.image, props, config.get_double("score_threshold"),
                config.get_double("nms_threshold")))
      dets.push_back(d);
  }
  const auto ap = evaluate_ap(dets, gts, model.config.num_classes);

  nlohmann::ordered_json j;
  j["map"] = ap.map;
  j["per_class"] = ap.per_class;
  j["class_present"] = ap.present;
  j["images"] = data.samples.size();
  j["detections"] = dets.size();
  j["oracle"] = options.oracle;
  std::ofstream os(out_dir / "metrics.json");
  if (!os)
    throw std::runtime_error("cannot write metrics.json");
  os << j.dump(2) << '\n';
  write_run_meta(out_dir, "eval", config, {"metrics.json"});
  return ap;
}

auto cmd_cam(const RunConfig& config, const fs::path& checkpoint,
             const fs::path& image, const fs::path& out_dir) -> CamOutput
{
  const auto scales = config.get_ints("cam_scales");
  if (scales.empty())
    throw UsageError("cam_scales is empty");
  for (int s : scales)
    if (s < 1)
      throw UsageError("cam_scales must be positive, got " + std::to_string(s));
  const int k = config.get_int("cam_k");
  if (k < 1)
    throw UsageError("cam_k must be >= 1");
  auto model = load_model(checkpoint);
  Tensorf pixels;
  if (image.empty())
  {
    auto dc = config.dataset_config();
    const int cls = config.get_int("cam_class");
    if (cls < 1 || cls > dc.num_classes)
      throw UsageError("cam_class out of range");
    pixels = render_single_object(dc, cls, config.get_int("cam_side"),
                                  config.seed())
                 .image.pixels;
  }
  else
  {
    require_file(image, "image");
    pixels = read_ppm(image).pixels;
  }
  ensure_dir(out_dir);

  std::optional<int> normalize;
  if (config.get_bool("normalize_rois"))
    normalize = model.config.scheme.ref_scale;
  const auto sweep = cam_scale_sweep(pixels, model.backbone,
                                     std::span<const int>(scales), normalize);
  if (sweep.scales.empty())
    throw UsageError("no usable scale in cam_scales (all below the backbone "
                     "stride of " + std::to_string(model.stride()) + ")");
  CamOutput out;
  out.cam = compute_cam(sweep, k);
  out.warnings = sweep.warnings;
  if (sweep.scales.size() >= 2)
    out.stability = cam_stability(out.cam, k);
  write_cam_csv(out_dir / "cam.csv", out.cam);
  write_cam_pgm(out_dir / "cam.pgm", out.cam, config.get_bool("cam_per_column"));

  nlohmann::ordered_json j;
  j["scales"] = out.cam.scales;
  j["k"] = k;
  j["normalize_rois"] = normalize.has_value();
  j["stability"] = out.stability ? nlohmann::ordered_json(*out.stability)
                                 : nlohmann::ordered_json(nullptr);
  j["warnings"] = out.warnings;
  std::ofstream os(out_dir / "cam.json");
  os << j.dump(2) << '\n';
  write_run_meta(out_dir, "cam", config, {"cam.csv", "cam.pgm", "cam.json"});
  return out;
}

auto cmd_rmse(const RunConfig& config, const fs::path& checkpoint,
              const fs::path& data_dir, const fs::path& out_dir) -> RmseSummary
{
  auto model = load_model(checkpoint);
  const auto split = require_split(data_dir, "test");
  const auto scales = config.get_ints("rmse_scales");
  auto render = config.test_config();
  render.num_classes = std::max(render.num_classes, model.config.num_classes);
  if (scales.empty())
    throw UsageError("rmse_scales is empty");
  for (int s : scales)
    if (s < 1 || s > render.image_size)
      throw UsageError("rmse_scales must lie in [1, image_size], got " +
                       std::to_string(s));
  ensure_dir(out_dir);
  const auto data = read_split(split);
  if (data.samples.empty())
    throw UsageError("test split in " + data_dir.string() + " has no images");
  const auto rows = rmse_report(model, data, render, scales);
  const auto summary = summarize_rmse(rows, model.config.num_classes);
  write_rmse_csv(out_dir / "rmse.csv", rows);
  write_rmse_summary_csv(out_dir / "rmse_summary.csv", summary);
  write_run_meta(out_dir, "rmse", config, {"rmse.csv", "rmse_summary.csv"});
  return summary;
}

namespace {

  auto dashed(std::string key) -> std::string
  {
    std::replace(key.begin(), key.end(), '_', '-');
    return key;
  }

  //! Shared by every subcommand: --config, --set key=value and one flag per
  //! configuration key.
  struct CommonOptions
  {
    std::string config_file;
    std::vector<std::string> sets;
    std::map<std::string, std::string> flags;
    std::map<std::string, bool> bool_flags;

    auto attach(CLI::App* sub) -> void
    {
      sub->add_option("--config", config_file, "key = value configuration file");
      sub->add_option("--set", sets, "override, key=value (repeatable)");
      for (const auto& k : key_table())
      {
        const std::string name = "--" + dashed(k.key);
        if (k.kind == Kind::boolean)
          sub->add_flag(name, bool_flags[k.key], k.help);
        else
          sub->add_option(name, flags[k.key], k.help);
      }
    }

    auto resolve(CLI::App* sub) const -> RunConfig
    {
      RunConfig c;
      if (!config_file.empty())
        c.load_file(config_file);
      for (const auto& s : sets)
      {
        const auto eq = s.find('=');
        if (eq == std::string::npos)
          throw UsageError("--set expects key=value, got '" + s + "'");
        c.set(trim(s.substr(0, eq)), s.substr(eq + 1));
      }
      for (const auto& k : key_table())
      {
        const std::string name = "--" + dashed(k.key);
        if (sub->count(name) == 0)
          continue;
        if (k.kind == Kind::boolean)
          c.set(k.key, "true");
        else
          c.set(k.key, flags.at(k.key));
      }
      c.apply_environment();
      return c;
    }
  };

}  // namespace

auto run_cli(int argc, char** argv) -> int
{
  CLI::App app{"Scale-aware RoI features: data, training and analysis"};
  app.require_subcommand(1);

  CommonOptions gen_opts, train_opts, eval_opts, cam_opts, rmse_opts;
  std::string out, data, checkpoint, image;
  bool oracle = false;

  auto* gen = app.add_subcommand("gen-data", "render train and test splits");
  gen_opts.attach(gen);
  gen->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a detector");
  train_opts.attach(tr);
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--out", out, "output directory")->required();

  auto* ev = app.add_subcommand("eval", "average precision on the test split");
  eval_opts.attach(ev);
  ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--out", out, "output directory")->required();
  ev->add_flag("--oracle", oracle,
               "score the ground truth instead of the model (debug)");

  auto* cam = app.add_subcommand("cam", "channel activation matrix over scales");
  cam_opts.attach(cam);
  cam->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  cam->add_option("--image", image, "PPM image (default: rendered object)");
  cam->add_option("--out", out, "output directory")->required();

  auto* rm = app.add_subcommand("rmse", "feature RMSE across scales");
  rmse_opts.attach(rm);
  rm->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  rm->add_option("--data", data, "dataset directory")->required();
  rm->add_option("--out", out, "output directory")->required();

  try
  {
    app.parse(argc, argv);
  }
  catch (const CLI::ParseError& e)
  {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try
  {
    if (gen->parsed())
    {
      cmd_gen_data(gen_opts.resolve(gen), out);
      std::cout << "wrote dataset to " << out << '\n';
    }
    else if (tr->parsed())
    {
      const auto r = cmd_train(train_opts.resolve(tr), data, out);
      if (!r.log.empty())
      {
        const auto& last = r.log.back();
        std::cout << "iter " << last.iter << " l_cls " << last.l_cls << " l_reg "
                  << last.l_reg << " l_san " << last.l_san << '\n';
      }
      std::cout << "wrote " << (fs::path(out) / "model.ckpt").string() << '\n';
    }
    else if (ev->parsed())
    {
      const auto ap = cmd_eval(eval_opts.resolve(ev), checkpoint, data, out,
                               EvalOptions{oracle});
      std::cout << "mAP " << ap.map << '\n';
      for (std::size_t k = 0; k < ap.per_class.size(); ++k)
        std::cout << "  class " << k + 1 << " AP " << ap.per_class[k]
                  << (ap.present[k] ? "" : " (absent)") << '\n';
    }
    else if (cam->parsed())
    {
      const auto r = cmd_cam(cam_opts.resolve(cam), checkpoint, image, out);
      for (const auto& w : r.warnings)
        std::cerr << "warning: " << w << '\n';
      std::cout << "channels " << r.cam.channel_ids.size() << " scales "
                << r.cam.scales.size() << " stability ";
      if (r.stability)
        std::cout << *r.stability << '\n';
      else
        std::cout << "n/a (single scale)\n";
    }
    else if (rm->parsed())
    {
      const auto s = cmd_rmse(rmse_opts.resolve(rm), checkpoint, data, out);
      std::cout << "class  n  mean_without  std_without  mean_with  std_with\n";
      for (const auto& c : s.per_class)
        std::cout << c.class_id << "  " << c.count << "  " << c.mean_without
                  << "  " << c.std_without << "  " << c.mean_with << "  "
                  << c.std_with << '\n';
      std::cout << "overall " << s.mean_without << " -> " << s.mean_with
                << " (reduction " << 100.0 * s.relative_reduction() << "%)\n";
    }
  }
  catch (const UsageError& e)
  {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  catch (const std::exception& e)
  {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace sanlab
