#pragma once

// Checkpoint file:
//   "AUCK" | u32 version | u64 config digest | string mode | u64 iteration |
//   string config json | u32 record count | { string name | AUT1 tensor }*
// Strings are u32-length prefixed. Records are stored in name order.

#include "aunet/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>

namespace aunet {

struct Checkpoint {
  std::string mode;
  std::uint64_t iteration = 0;
  nlohmann::json config;  // resolved run configuration
  ParamSet params;

  std::uint64_t config_digest() const;
};

// 64-bit FNV-1a over the compact JSON dump.
std::uint64_t config_digest(const nlohmann::json& config);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace aunet
