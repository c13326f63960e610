#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "aiap/tensor.hpp"

namespace aiap {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

// Single-file binary container: "AIAP" magic, format version, a 32-byte
// config fingerprint, length-prefixed named tensors (name, rank, extents,
// raw little-endian f64 values), and a trailing CRC32 of all prior bytes.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::array<unsigned char, 32> fingerprint{};
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  const NamedTensor& require(const std::string& name) const {
    const NamedTensor* t = find(name);
    if (!t) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    return *t;
  }
  void put(std::string name, Shape shape, std::vector<double> values) {
    tensors.push_back({std::move(name), std::move(shape), std::move(values)});
  }
  void put_scalar(std::string name, double v) { put(std::move(name), Shape{}, {v}); }
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::array<unsigned char, 32> sha256_bytes(const std::string& data);
std::string hex_string(const std::array<unsigned char, 32>& digest);

}  // namespace aiap
