#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "unihetero/core/tensor.hpp"
#include "unihetero/io.hpp"

// Container: "UHCK" | u32 version | 32-byte config digest | u32 count |
// per tensor: u32 name length, name bytes, u8 dtype (0 = f32), u32 rank,
// rank x u32 extents, f32 little-endian data.

namespace unihetero {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Canonical digest of a configuration: SHA-256 of its compact JSON dump
/// (object keys are sorted by nlohmann::json).
inline Digest config_digest(const nlohmann::json& config) { return sha256(config.dump()); }

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct CheckpointContents {
  Digest digest{};
  std::vector<StoredTensor> tensors;
};

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const ParameterList<T>& params, const Digest& digest) {
  ByteWriter w;
  w.bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("UHCK"), 4));
  w.u32(kCheckpointVersion);
  w.bytes(digest);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.str(p.name);
    w.u8(0);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : p.tensor.data()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

inline CheckpointContents decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "checkpoint");
  const auto magic = r.take(4);
  if (std::string(magic.begin(), magic.end()) != "UHCK") throw CheckpointError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  CheckpointContents out;
  const auto d = r.take(32);
  std::copy(d.begin(), d.end(), out.digest.begin());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str();
    if (r.u8() != 0) throw CheckpointError("checkpoint: unsupported dtype for " + t.name);
    t.shape.resize(r.u32());
    for (auto& e : t.shape) e = r.u32();
    const std::size_t n = shape_numel(t.shape);
    t.data.resize(n);
    for (auto& v : t.data) v = r.f32();
    out.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes");
  return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ParameterList<T>& params, const nlohmann::json& config) {
  const auto bytes = encode_checkpoint(params, config_digest(config));
  // Write to a sibling and rename so an interrupted save never clobbers a good file.
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

/// Reads a checkpoint and refuses it unless it was written for `config`.
inline CheckpointContents read_checkpoint(const std::filesystem::path& path, const nlohmann::json& config) {
  auto contents = decode_checkpoint(read_file(path));
  const Digest expected = config_digest(config);
  if (contents.digest != expected)
    throw CheckpointError("checkpoint " + path.string() + " was written for config " + to_hex(contents.digest) +
                          " but the current config digests to " + to_hex(expected));
  return contents;
}

/// Copies stored tensors into `params` by name. Every parameter must be
/// present with an identical shape.
template <class T>
void assign_tensors(ParameterList<T>& params, const std::vector<StoredTensor>& stored, const std::string& strip_prefix = "",
                    const std::string& add_prefix = "") {
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : stored) {
    std::string name = t.name;
    if (!strip_prefix.empty()) {
      if (name.rfind(strip_prefix, 0) != 0) continue;
      name = name.substr(strip_prefix.size());
    }
    by_name[add_prefix + name] = &t;
  }
  for (auto& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint: missing tensor " + p.name);
    if (it->second->shape != p.tensor.shape()) throw ShapeError("checkpoint tensor " + p.name, it->second->shape, p.tensor.shape());
  }
  for (auto& p : params) {
    const auto& src = by_name.at(p.name)->data;
    for (std::size_t i = 0; i < src.size(); ++i) p.tensor[i] = static_cast<T>(src[i]);
  }
}

template <class T>
void load_checkpoint(const std::filesystem::path& path, ParameterList<T>& params, const nlohmann::json& config) {
  const auto contents = read_checkpoint(path, config);
  assign_tensors(params, contents.tensors);
}

}  // namespace unihetero
