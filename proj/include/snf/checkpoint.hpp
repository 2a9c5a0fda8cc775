#pragma once

// Versioned flat binary of named float64 arrays.
//
// Layout (all integers little-endian):
//   8 bytes   magic "SNFCKPT\0"
//   u32       format version (1)
//   u64       manifest byte length
//   manifest  UTF-8 JSON: {"format", "version", "kind", "meta", "arrays":[{"name","shape","offset"}]}
//   payload   float64 values of every array, concatenated in manifest order;
//             "offset" counts doubles from the start of the payload.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "snf/tensor.hpp"

namespace snf {

struct Checkpoint {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> arrays;

  void put(std::string name, Tensor t) { arrays.emplace_back(std::move(name), std::move(t)); }
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// 64-bit FNV-1a, hex encoded. Used for model and config fingerprints.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Whole-file helpers shared by the file formats in this project.
std::string read_file(const std::filesystem::path& path);
// Writes to a temporary sibling then renames, so readers never see partial files.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace snf
