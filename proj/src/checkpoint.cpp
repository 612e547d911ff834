#include <sanlab/checkpoint.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

namespace sanlab {

namespace {

  static_assert(std::endian::native == std::endian::little ||
                    std::endian::native == std::endian::big,
                "mixed-endian hosts are not supported");

  auto put_u32(std::ostream& os, std::uint32_t v) -> void
  {
    unsigned char b[4] = {static_cast<unsigned char>(v),
                          static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
  }

  auto get_u32(std::istream& is) -> std::uint32_t
  {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
      throw CheckpointError("truncated checkpoint");
    return static_cast<std::uint32_t>(b[0]) |
           static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 |
           static_cast<std::uint32_t>(b[3]) << 24;
  }

  auto meta(const std::string& name, std::vector<float> values) -> NamedTensor
  {
    Tensorf::Buffer b(static_cast<Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i)
      b[static_cast<Index>(i)] = values[i];
    return {name, Tensorf({static_cast<Index>(values.size())}, b)};
  }

}  // namespace

auto write_tensors(const std::filesystem::path& path,
                   const std::vector<NamedTensor>& tensors) -> void
{
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw CheckpointError("cannot write " + path.string());
  os.write(kCheckpointMagic, 8);
  for (const auto& [name, t] : tensors)
  {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape())
      put_u32(os, static_cast<std::uint32_t>(d));
    for (Index i = 0; i < t.numel(); ++i)
      put_u32(os, std::bit_cast<std::uint32_t>(t.data()[i]));
  }
  if (!os)
    throw CheckpointError("short write to " + path.string());
}

auto read_tensors(const std::filesystem::path& path) -> std::vector<NamedTensor>
{
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw CheckpointError("cannot read " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError(path.string() + ": not a SANLAB01 checkpoint");
  std::vector<NamedTensor> out;
  while (is.peek() != std::char_traits<char>::eof())
  {
    const auto len = get_u32(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len))
      throw CheckpointError("truncated tensor name");
    const auto rank = get_u32(is);
    if (rank > 8)
      throw CheckpointError("implausible rank for " + name);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r)
      shape.push_back(static_cast<Index>(get_u32(is)));
    auto t = Tensorf::zeros(shape);
    for (Index i = 0; i < t.numel(); ++i)
      t.data()[i] = std::bit_cast<float>(get_u32(is));
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

auto write_checkpoint(const std::filesystem::path& path, DetectorModel& model)
    -> void
{
  const auto& c = model.config;
  std::vector<float> bounds(c.scheme.boundaries.begin(),
                            c.scheme.boundaries.end());
  std::vector<NamedTensor> tensors{
      meta("meta.num_classes", {static_cast<float>(c.num_classes)}),
      meta("meta.ref_scale", {static_cast<float>(c.scheme.ref_scale)}),
      meta("meta.boundaries", bounds),
      meta("meta.san_mode", {static_cast<float>(static_cast<int>(c.san))}),
      meta("meta.san_pool", {static_cast<float>(static_cast<int>(c.san_pool))}),
      meta("meta.pool_size", {static_cast<float>(c.pool_size)}),
  };
  for (auto* p : model.parameters())
    tensors.emplace_back(p->name, p->tensor);
  write_tensors(path, tensors);
}

auto read_checkpoint(const std::filesystem::path& path) -> DetectorModel
{
  std::map<std::string, Tensorf> by_name;
  for (auto& [name, t] : read_tensors(path))
    by_name.emplace(name, t);
  auto scalar = [&](const std::string& key) -> float {
    auto it = by_name.find(key);
    if (it == by_name.end() || it->second.numel() != 1)
      throw CheckpointError(path.string() + ": missing " + key);
    return it->second.data()[0];
  };
  ModelConfig c;
  c.num_classes = static_cast<int>(scalar("meta.num_classes"));
  c.scheme.ref_scale = static_cast<int>(scalar("meta.ref_scale"));
  auto b = by_name.find("meta.boundaries");
  if (b == by_name.end())
    throw CheckpointError(path.string() + ": missing meta.boundaries");
  c.scheme.boundaries.assign(b->second.data().begin(), b->second.data().end());
  const int mode = static_cast<int>(scalar("meta.san_mode"));
  if (mode < 0 || mode > 2)
    throw CheckpointError(path.string() + ": unknown SAN mode");
  c.san = static_cast<SanMode>(mode);
  c.san_pool = static_cast<PoolMode>(static_cast<int>(scalar("meta.san_pool")));
  c.pool_size = static_cast<int>(scalar("meta.pool_size"));
  const bool gated = by_name.count("san.fusion_gate") != 0;
  c.init = gated ? InitMode::identity_zero_fusion : InitMode::identity;

  auto model = make_model(c);
  std::size_t used = 6;
  for (auto* p : model.parameters())
  {
    auto it = by_name.find(p->name);
    if (it == by_name.end())
      throw CheckpointError(path.string() + ": missing parameter " + p->name);
    if (it->second.shape() != p->tensor.shape())
      throw CheckpointError(path.string() + ": shape mismatch for " + p->name +
                            " " + to_string(it->second.shape()) + " vs " +
                            to_string(p->tensor.shape()));
    p->tensor.data() = it->second.data();
    ++used;
  }
  if (used != by_name.size())
    throw CheckpointError(path.string() + ": unexpected extra tensors");
  return model;
}

}  // namespace sanlab
