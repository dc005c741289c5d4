#include "aunet/checkpoint.hpp"

#include "aunet/tensor_io.hpp"

#include <array>
#include <filesystem>
#include <fstream>

namespace aunet {

namespace {
constexpr std::array<char, 4> kMagic{'A', 'U', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::uint64_t config_digest(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t Checkpoint::config_digest() const { return aunet::config_digest(config); }

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  // Write-then-rename so an interrupted run never leaves a torn checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint " + path);
    out.write(kMagic.data(), kMagic.size());
    write_u32(out, kVersion);
    write_u64(out, ckpt.config_digest());
    write_string(out, ckpt.mode);
    write_u64(out, ckpt.iteration);
    write_string(out, ckpt.config.dump());
    write_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& [name, t] : ckpt.params) {
      write_string(out, name);
      write_tensor(out, t);
    }
    if (!out) throw FormatError("failed writing checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw FormatError(path + ": not a checkpoint (bad magic)");
  if (read_u32(in) != kVersion) throw FormatError(path + ": unsupported checkpoint version");
  Checkpoint c;
  const std::uint64_t digest = read_u64(in);
  c.mode = read_string(in);
  c.iteration = read_u64(in);
  try {
    c.config = nlohmann::json::parse(read_string(in));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad embedded config: " + e.what());
  }
  if (c.config_digest() != digest) throw FormatError(path + ": config digest mismatch");
  const std::uint32_t n = read_u32(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = read_string(in);
    Tensor t = read_tensor(in);
    t.set_requires_grad(true);
    c.params.add(name, std::move(t));
  }
  return c;
}

}  // namespace aunet
