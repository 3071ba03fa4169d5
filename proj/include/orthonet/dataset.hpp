#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "orthonet/tensor.hpp"

namespace orthonet {

// Labelled images: images is (N, C, H, W) with pixels in [0, 1], every label
// lies in [0, classes).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  Shape example_shape() const;

  // Throws ValueError/ShapeError if an invariant does not hold.
  void validate() const;

  Dataset subset(std::span<const std::size_t> indices, std::string split_id) const;
  // First `count` examples and the rest.
  std::pair<Dataset, Dataset> split_at(std::size_t count) const;
};

// Per-class spatial template plus N(0, noise_sigma^2) pixel noise, clipped to
// [0, 1]. Labels cycle 0, 1, ..., K-1 so class counts differ by at most one.
struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t n = 1000;
  std::size_t hw = 12;
  std::uint64_t seed = 1;
  double noise_sigma = 0.15;
  // Standard deviation of each template around mid-grey.
  double template_contrast = 0.1;
};

// Templates depend only on (classes, hw, seed); `sample_seed` drives the
// noise so train and validation splits can share templates.
Dataset gen_synthetic(const SyntheticSpec& spec);
Dataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t sample_seed, std::string split);
Tensor synthetic_templates(const SyntheticSpec& spec);

// --- IDX ----------------------------------------------------------------------
// Images: magic 0x00000803 (unsigned byte, N x H x W), loaded as (N, 1, H, W)
// scaled by 1/255; or 0x00000E04 (big-endian float64, N x C x H x W), which is
// what save_idx writes for non-8-bit data. Labels: magic 0x00000801.

Dataset load_idx(const std::string& images_path, const std::string& labels_path);
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels);

enum class IdxPixels { kUint8, kFloat64 };
std::vector<std::uint8_t> encode_idx_images(const Tensor& images, IdxPixels pixels);
std::vector<std::uint8_t> encode_idx_labels(std::span<const int> labels);
void save_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path,
              IdxPixels pixels = IdxPixels::kFloat64);

// --- CSV fallback ---------------------------------------------------------------
// Header `label,p0,p1,...`; one example per row, pixels in [0, 1]. Images are
// single-channel and square when the pixel count is a perfect square, else 1 x 1 x d.
Dataset load_csv_dataset(const std::string& path, std::size_t classes = 0);
Dataset parse_csv_dataset(const std::string& text, std::size_t classes = 0);

// --- small file helpers -----------------------------------------------------------
std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::string& path, const std::string& text);
// 64-bit FNV-1a as 16 hex digits.
std::string fnv1a_hex(std::span<const std::uint8_t> bytes);

}  // namespace orthonet
