// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "csmap/tensor.hpp"

namespace csmap {

struct NamedArray {
  std::string name;
  Tensor<float> tensor;
};

/// Manifest-plus-payload file shared by checkpoints, datasets, concept
/// vectors and raw saliency maps.
///
/// Layout:
///   line 1   "CSMAP-CONTAINER 1"
///   line 2   manifest length in bytes (decimal)
///   manifest JSON text followed by '\n'
///   payload  little-endian IEEE-754 float32 arrays, back to back
///
/// The manifest carries caller fields plus "arrays" (name, shape, byte
/// offset into the payload, element count) and "payload_bytes".
struct Container {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  void add(std::string name, Tensor<float> tensor);
  const Tensor<float>& array(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void write_container(const Container& container, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path);

/// Exact container bytes, used by reproducibility checks.
std::string serialize_container(const Container& container);
Container parse_container(const std::string& bytes, const std::string& origin = "<memory>");

}  // namespace csmap
