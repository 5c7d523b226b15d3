// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout:
//
//   CFDCKPT
//   version 1
//   digest <16 hex digits of the backbone config>
//   entries <N>
//   <param|buffer> <name> <rank> <d0> ... <dk>      (N lines)
//   data
//   <little-endian float32 values of every entry, in listed order>
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cfd/model.hpp"

namespace cfd {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_f32(std::string& out, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

inline float get_f32(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const ModelParams<T>& m) {
  typename ModelParams<T>::Named params, buffers;
  m.collect(params, buffers);
  std::ostringstream hdr;
  hdr << "CFDCKPT\nversion " << kCheckpointVersion << "\ndigest " << m.config.digest() << "\nentries "
      << params.size() + buffers.size() << '\n';
  auto line = [&](const char* kind, const std::string& name, const Tensor<T>& t) {
    hdr << kind << ' ' << name << ' ' << t.rank();
    for (auto d : t.shape()) hdr << ' ' << d;
    hdr << '\n';
  };
  for (const auto& [n, t] : params) line("param", n, t);
  for (const auto& [n, t] : buffers) line("buffer", n, t);
  hdr << "data\n";
  std::string out = hdr.str();
  for (const auto* group : {&params, &buffers})
    for (const auto& [n, t] : *group)
      for (T v : t.data()) detail::put_f32(out, static_cast<float>(v));
  return out;
}

template <typename T>
void save_checkpoint(const ModelParams<T>& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const auto bytes = serialize_checkpoint(m);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

/// Restores values into `m`, whose layout must come from the same config.
template <typename T>
void deserialize_checkpoint(const std::string& bytes, ModelParams<T>& m) {
  using R = CheckpointError::Reason;
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw CheckpointError(R::kTruncated, "header ends unexpectedly");
    std::string l = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return l;
  };
  if (next_line() != "CFDCKPT") throw CheckpointError(R::kMalformed, "missing CFDCKPT magic");
  {
    std::istringstream ls(next_line());
    std::string key;
    int version = -1;
    ls >> key >> version;
    if (key != "version") throw CheckpointError(R::kMalformed, "missing version line");
    if (version != kCheckpointVersion)
      throw CheckpointError(R::kVersion, "format version " + std::to_string(version) + ", expected " +
                                             std::to_string(kCheckpointVersion));
  }
  {
    std::istringstream ls(next_line());
    std::string key, digest;
    ls >> key >> digest;
    if (key != "digest") throw CheckpointError(R::kMalformed, "missing digest line");
    if (digest != m.config.digest())
      throw CheckpointError(R::kDigest, "config digest " + digest + " does not match " + m.config.digest());
  }
  std::size_t entries = 0;
  {
    std::istringstream ls(next_line());
    std::string key;
    ls >> key >> entries;
    if (key != "entries") throw CheckpointError(R::kMalformed, "missing entries line");
  }
  typename ModelParams<T>::Named params, buffers;
  m.collect(params, buffers);
  std::vector<Tensor<T>> targets;
  for (const auto* g : {&params, &buffers})
    for (const auto& [n, t] : *g) targets.push_back(t);
  if (entries != targets.size()) throw CheckpointError(R::kMalformed, "entry count does not match the model");
  std::size_t total = 0;
  std::size_t idx = 0;
  for (const auto* g : {&params, &buffers})
    for (const auto& [name, t] : *g) {
      std::istringstream ls(next_line());
      std::string kind, got_name;
      std::size_t rank = 0;
      ls >> kind >> got_name >> rank;
      Shape s(rank);
      for (auto& d : s) ls >> d;
      if (!ls || got_name != name || s != t.shape())
        throw CheckpointError(R::kMalformed, "entry " + std::to_string(idx) + " ('" + got_name + "') does not match '" + name + "'");
      total += t.numel();
      ++idx;
    }
  if (next_line() != "data") throw CheckpointError(R::kMalformed, "missing data marker");
  if (bytes.size() - pos < total * 4) throw CheckpointError(R::kTruncated, "value block is truncated");
  if (bytes.size() - pos > total * 4) throw CheckpointError(R::kMalformed, "trailing bytes after value block");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  for (auto& t : targets)
    for (auto& v : t.data()) {
      v = static_cast<T>(detail::get_f32(p));
      p += 4;
    }
}

template <typename T>
ModelParams<T> load_checkpoint(const std::string& path, const BackboneConfig& cfg) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  auto m = init_model<T>(cfg, 0);
  deserialize_checkpoint(bytes, m);
  return m;
}

}  // namespace cfd
