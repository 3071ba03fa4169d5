#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "orthonet/model.hpp"

namespace orthonet {

// Binary checkpoint layout, all integers little-endian:
//
//   "ORTH"                       4-byte magic
//   u32 version                  = 1
//   u32 len, bytes               architecture descriptor (see describe())
//   u32 tensor count
//   per tensor:
//     u32 len, bytes             name
//     u8 dtype                   0 = float64, 1 = float32
//     u32 rank, u32 extents[rank]
//     raw little-endian row-major data
//   u32 len, bytes               metadata text, "key=value" lines
//
// Nothing follows the metadata block.

enum class Dtype : std::uint8_t { kFloat64 = 0, kFloat32 = 1 };

struct CheckpointMeta {
  std::uint64_t seed = 0;
  double lambda = 0.0;
  std::string reference_hash;  // fnv1a_hex of the reference checkpoint file, or empty
  double val_accuracy = 0.0;

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  Model model;
  CheckpointMeta meta;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const CheckpointMeta& meta,
                                            Dtype dtype = Dtype::kFloat64);
// Validates magic, version, the architecture chain and every tensor shape;
// throws FormatError naming the offending field.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::string& path,
                     Dtype dtype = Dtype::kFloat64);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace orthonet
