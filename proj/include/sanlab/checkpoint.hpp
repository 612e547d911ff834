#pragma once

#include <sanlab/model.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace sanlab {

//! Thrown for files that are not checkpoints, are truncated, or do not match
//! the model they are loaded into.
class CheckpointError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[] = "SANLAB01";

using NamedTensor = std::pair<std::string, Tensorf>;

// Layout: the 8-byte magic, then per tensor: u32 name length, name bytes,
// u32 rank, u32 dims, float32 payload. All integers and floats little-endian.
auto write_tensors(const std::filesystem::path& path,
                   const std::vector<NamedTensor>& tensors) -> void;
auto read_tensors(const std::filesystem::path& path) -> std::vector<NamedTensor>;

//! Parameters plus `meta.*` tensors describing the architecture, so a
//! checkpoint can be loaded without the training configuration.
auto write_checkpoint(const std::filesystem::path& path,
                      DetectorModel& model) -> void;
auto read_checkpoint(const std::filesystem::path& path) -> DetectorModel;

}  // namespace sanlab
