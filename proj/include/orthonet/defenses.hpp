#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "orthonet/tensor.hpp"

namespace orthonet {

// Input transformations applied to (N, C, H, W) images in [0, 1] before
// classification. All are deterministic and work per channel.

enum class DefenseKind { kNone, kJpeg, kTvm, kBitReduce, kBilateral };

struct DefenseSpec {
  DefenseKind kind = DefenseKind::kNone;
  int quality = 90;        // jpeg, 1..100
  double weight = 3.0;     // tvm, > 0
  std::size_t iters = 50;  // tvm
  double step = 0.1;       // tvm, > 0
  int depth = 4;           // bit reduction, 1..8
  std::size_t window = 5;  // bilateral, odd >= 3
  std::optional<double> sigma_spatial;  // bilateral, defaults to window / 3
  double sigma_range = 0.1;             // bilateral

  void validate() const;
  double spatial_sigma() const;
  // "none", "jpeg:90", "tvm:3", "bits:4", "bilateral:5"; parse() accepts the
  // same text, leaving the other fields at their defaults.
  std::string id() const;
  static DefenseSpec parse(const std::string& text);
};

// round(x * (2^depth - 1)) / (2^depth - 1), halves rounded up.
Tensor bit_reduce(const Tensor& x, int depth);

// Gradient descent on E(u) = ||u - x||^2 + weight * TV(u), with the smoothed
// isotropic TV sum sqrt(dx^2 + dy^2 + 1e-6) over forward differences
// (zero across the last row and column). Each step starts at `step` and is
// halved until E does not increase. `energies`, if given, receives E(u_0)
// through E(u_iters) followed by the energy of the clipped output.
Tensor tv_minimize(const Tensor& x, double weight, std::size_t iters, double step,
                   std::vector<double>* energies = nullptr);
double tv_energy(const Tensor& u, const Tensor& x, double weight);

// Edge-aware smoothing over a window x window neighbourhood; coordinates
// outside the image are clamped to the border.
Tensor bilateral(const Tensor& x, std::size_t window, double sigma_spatial, double sigma_range);

// 8x8 block DCT quantization round trip on the 0..255 scale with the
// standard luminance table. Partial blocks are padded by edge replication.
Tensor jpeg_like(const Tensor& x, int quality);
// Quantizer table for `quality`, row-major 8x8.
std::vector<int> jpeg_quant_table(int quality);
// Sum over all blocks of the squared quantized AC levels round(F / Q). Each
// |level| is non-increasing in Q, so this never grows as quality drops.
double jpeg_retained_ac_energy(const Tensor& x, int quality);

Tensor apply_defense(const Tensor& x, const DefenseSpec& spec);

}  // namespace orthonet
