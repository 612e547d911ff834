#pragma once

#include <sanlab/analysis.hpp>
#include <sanlab/train.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace sanlab {

//! Every tunable of the command-line tools as validated strings. Values come
//! from built-in defaults, then an optional `key = value` file, then explicit
//! overrides; the seed additionally falls back to $SANLAB_SEED when neither
//! the file nor an override sets it.
class RunConfig
{
public:
  RunConfig();

  static auto known_keys() -> std::vector<std::string>;
  static auto is_known(const std::string& key) -> bool;

  //! Parses `key = value` lines; `#` starts a comment. Unknown keys and
  //! malformed lines throw with the line number.
  auto load_file(const std::filesystem::path& path) -> void;
  auto set(const std::string& key, const std::string& value) -> void;
  auto get(const std::string& key) const -> const std::string&;
  auto is_set(const std::string& key) const -> bool;  // not a default
  //! Applies SANLAB_SEED if the seed is still at its default.
  auto apply_environment() -> void;

  auto get_int(const std::string& key) const -> int;
  auto get_double(const std::string& key) const -> double;
  auto get_bool(const std::string& key) const -> bool;
  auto get_ints(const std::string& key) const -> std::vector<int>;
  auto seed() const -> std::uint64_t;

  auto dataset_config() const -> DatasetConfig;
  auto test_config() const -> DatasetConfig;
  auto scheme() const -> ScalePartitionScheme;
  auto model_config() const -> ModelConfig;
  auto training_config() const -> TrainingConfig;

  //! Resolved configuration as a JSON object, keys sorted.
  auto to_json() const -> std::string;

  auto values() const -> const std::map<std::string, std::string>&
  {
    return values_;
  }

private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> explicit_;
};

//! Thrown for bad invocations; the tools print the message and exit 2.
class UsageError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

auto write_run_meta(const std::filesystem::path& dir, const std::string& command,
                    const RunConfig& config,
                    const std::vector<std::string>& outputs) -> void;

auto cmd_gen_data(const RunConfig& config, const std::filesystem::path& out_dir)
    -> void;

auto cmd_train(const RunConfig& config, const std::filesystem::path& data_dir,
               const std::filesystem::path& out_dir) -> TrainResult;

struct EvalOptions
{
  //! Replace model detections by the ground truth (score 1); checks the
  //! evaluation plumbing end to end.
  bool oracle = false;
};

auto cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint,
              const std::filesystem::path& data_dir,
              const std::filesystem::path& out_dir, EvalOptions options = {})
    -> ApResult;

struct CamOutput
{
  CamMatrix cam;
  std::optional<double> stability;  // needs two or more scales
  std::vector<std::string> warnings;
};

//! `image` may be empty, in which case a seeded single-object image is
//! rendered from the config (cam_class, cam_side, seed).
auto cmd_cam(const RunConfig& config, const std::filesystem::path& checkpoint,
             const std::filesystem::path& image,
             const std::filesystem::path& out_dir) -> CamOutput;

auto cmd_rmse(const RunConfig& config, const std::filesystem::path& checkpoint,
              const std::filesystem::path& data_dir,
              const std::filesystem::path& out_dir) -> RmseSummary;

//! Entry point of the `sanlab` executable; returns the process exit code.
auto run_cli(int argc, char** argv) -> int;

}  // namespace sanlab
