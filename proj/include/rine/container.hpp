#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "rine/tensor.hpp"

namespace rine {

// Named-tensor file shared by backbone weights, head weights and training
// checkpoints.
//
//   bytes 0..7    magic "RINEWTS1"
//   bytes 8..15   u64 little-endian length L of the manifest
//   bytes 16..    L bytes of UTF-8 JSON manifest
//   zero padding up to the next multiple of 64: start of the payload
//   payload       raw little-endian row-major float32 tensors, each 64-byte
//                 aligned relative to the payload start
//
// The manifest is a JSON object holding caller metadata plus
// "format_version": 1 and "tensors": {name: {"dtype": "float32",
// "shape": [...], "offset": bytes-from-payload-start}}.
struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  // Throws LoadError naming the entry when missing or mis-shaped.
  const Tensor& require(const std::string& name, const Shape& shape) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

inline constexpr char kContainerMagic[9] = "RINEWTS1";
inline constexpr int kContainerVersion = 1;

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

}  // namespace rine
