#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "kdasc/binio.hpp"
#include "kdasc/tensor.hpp"

namespace kdasc {

/// Named tensors as stored in a checkpoint, ordered by name.
using TensorMap = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes the DFCK checkpoint: magic, version, count, then per tensor
/// (u32 name length, name, u32 rank, u32 dims, little-endian f32 payload).
inline void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors) {
  for (const auto& [name, t] : tensors) {
    if (!t.all_finite()) throw std::runtime_error("refusing to checkpoint non-finite tensor " + name);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  binio::write_magic(os, "DFCK");
  binio::write_le<std::uint32_t>(os, kCheckpointVersion);
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (float v : t.data()) binio::write_f32(os, v);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline TensorMap load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  binio::expect_magic(is, "DFCK", path.string());
  const auto version = binio::read_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw binio::FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = binio::read_le<std::uint32_t>(is, "tensor count");
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = binio::read_le<std::uint32_t>(is, "name length");
    std::string name = binio::read_string(is, len, "tensor name");
    const auto rank = binio::read_le<std::uint32_t>(is, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = binio::read_le<std::uint32_t>(is, "dim");
    std::vector<float> data(numel_of(shape));
    for (auto& v : data) v = binio::read_f32(is, "payload");
    if (out.count(name)) throw binio::FormatError(path.string() + ": duplicate tensor " + name);
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace kdasc
