// SPDX-License-Identifier: Apache-2.0
#include "csmap/container.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace csmap {
namespace {

constexpr std::string_view kMagic = "CSMAP-CONTAINER 1";

void append_le(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

float read_le(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

void Container::add(std::string name, Tensor<float> tensor) {
  if (contains(name)) throw DataError("container already holds an array named '" + name + "'");
  arrays.push_back({std::move(name), std::move(tensor)});
}

bool Container::contains(const std::string& name) const {
  return std::any_of(arrays.begin(), arrays.end(), [&](const NamedArray& a) { return a.name == name; });
}

const Tensor<float>& Container::array(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a.tensor;
  throw DataError("container has no array named '" + name + "'");
}

std::string serialize_container(const Container& container) {
  nlohmann::json manifest = container.manifest;
  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& a : container.arrays) {
    index.push_back({{"name", a.name}, {"shape", a.tensor.shape()}, {"offset", offset}, {"count", a.tensor.size()}});
    offset += a.tensor.size() * 4;
  }
  manifest["arrays"] = std::move(index);
  manifest["payload_bytes"] = offset;
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  const std::string text = manifest.dump(2);

  std::string out;
  out.reserve(text.size() + offset + 64);
  out.append(kMagic).push_back('\n');
  out.append(std::to_string(text.size())).push_back('\n');
  out.append(text).push_back('\n');
  for (const auto& a : container.arrays)
    for (float v : a.tensor.values()) append_le(out, v);
  return out;
}

Container parse_container(const std::string& bytes, const std::string& origin) {
  std::size_t pos = bytes.find('\n');
  if (pos == std::string::npos || std::string_view(bytes).substr(0, pos) != kMagic)
    throw DataError(origin + ": not a csmap container (bad magic line)");
  const std::size_t len_end = bytes.find('\n', pos + 1);
  if (len_end == std::string::npos) throw DataError(origin + ": truncated container header");
  std::size_t manifest_len = 0;
  try {
    manifest_len = std::stoull(bytes.substr(pos + 1, len_end - pos - 1));
  } catch (const std::exception&) {
    throw DataError(origin + ": malformed manifest length");
  }
  const std::size_t manifest_begin = len_end + 1;
  if (manifest_begin + manifest_len + 1 > bytes.size()) throw DataError(origin + ": truncated manifest");

  Container c;
  try {
    c.manifest = nlohmann::json::parse(bytes.substr(manifest_begin, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": manifest is not valid JSON: " + e.what());
  }
  const std::size_t payload_begin = manifest_begin + manifest_len + 1;
  const std::size_t payload_size = bytes.size() - payload_begin;
  const std::size_t declared = c.manifest.value("payload_bytes", std::size_t{0});
  if (payload_size != declared) {
    throw DataError(origin + ": payload size mismatch, manifest declares " + std::to_string(declared) +
                    " bytes but file holds " + std::to_string(payload_size));
  }
  if (!c.manifest.contains("arrays") || !c.manifest["arrays"].is_array())
    throw DataError(origin + ": manifest lacks an array index");
  for (const auto& entry : c.manifest["arrays"]) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (count != element_count(shape) || offset + count * 4 > payload_size)
      throw DataError(origin + ": array '" + name + "' does not fit the payload");
    std::vector<float> values(count);
    const char* src = bytes.data() + payload_begin + offset;
    for (std::size_t i = 0; i < count; ++i) values[i] = read_le(src + 4 * i);
    c.arrays.push_back({name, Tensor<float>(shape, std::move(values))});
  }
  for (const char* key : {"arrays", "payload_bytes", "dtype", "byte_order"}) c.manifest.erase(key);
  return c;
}

void write_container(const Container& container, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_container(container);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_container(ss.str(), path.string());
}

}  // namespace csmap
