#include "orthonet/dataset.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "orthonet/error.hpp"
#include "orthonet/model.hpp"

namespace orthonet {

Shape Dataset::example_shape() const {
  if (images.rank() != 4) throw ShapeError("dataset: images must be (N, C, H, W), got " + shape_str(images.shape()));
  return {images.dim(1), images.dim(2), images.dim(3)};
}

void Dataset::validate() const {
  example_shape();
  if (images.dim(0) != labels.size()) {
    throw ShapeError("dataset: " + std::to_string(labels.size()) + " labels for " + std::to_string(images.dim(0)) +
                     " images");
  }
  for (double p : images.data()) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValueError("dataset: pixel " + std::to_string(p) + " outside [0, 1]");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw ValueError("dataset: label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices, std::string split_id) const {
  Dataset out;
  out.images = gather_rows(images, indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  out.classes = classes;
  out.split = std::move(split_id);
  return out;
}

std::pair<Dataset, Dataset> Dataset::split_at(std::size_t count) const {
  if (count > size()) throw ValueError("dataset: cannot split " + std::to_string(size()) + " examples at " + std::to_string(count));
  std::vector<std::size_t> head(count), tail(size() - count);
  for (std::size_t i = 0; i < count; ++i) head[i] = i;
  for (std::size_t i = count; i < size(); ++i) tail[i - count] = i;
  return {subset(head, split + "/train"), subset(tail, split + "/val")};
}

// --- synthetic ------------------------------------------------------------------

Tensor synthetic_templates(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ValueError("gen_synthetic: need at least 2 classes");
  if (spec.hw == 0) throw ValueError("gen_synthetic: image side must be positive");
  const std::size_t hw = spec.hw, d = hw * hw;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor out({spec.classes, 1, hw, hw});
  std::vector<double> field(d), smooth(d);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    for (double& v : field) v = normal(rng);
    // 3x3 box blur with clamped edges gives each template spatial structure.
    for (std::size_t y = 0; y < hw; ++y)
      for (std::size_t x = 0; x < hw; ++x) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const auto yy = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(y) + dy, 0, static_cast<std::ptrdiff_t>(hw) - 1));
            const auto xx = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(x) + dx, 0, static_cast<std::ptrdiff_t>(hw) - 1));
            s += field[yy * hw + xx];
          }
        smooth[y * hw + x] = s;
      }
    double mean = 0.0, sq = 0.0;
    for (double v : smooth) mean += v;
    mean /= static_cast<double>(d);
    for (double v : smooth) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / static_cast<double>(d));
    for (std::size_t i = 0; i < d; ++i) {
      const double z = sd > 0.0 ? (smooth[i] - mean) / sd : 0.0;
      out[k * d + i] = std::clamp(0.5 + spec.template_contrast * z, 0.0, 1.0);
    }
  }
  return out;
}

Dataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t sample_seed, std::string split) {
  if (spec.n < spec.classes) throw ValueError("gen_synthetic: need n >= classes");
  const Tensor templates = synthetic_templates(spec);
  const std::size_t d = spec.hw * spec.hw;
  Dataset data;
  data.classes = spec.classes;
  data.split = std::move(split);
  data.images = Tensor({spec.n, 1, spec.hw, spec.hw});
  data.labels.resize(spec.n);
  std::mt19937_64 rng(sample_seed);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const std::size_t k = i % spec.classes;
    data.labels[i] = static_cast<int>(k);
    for (std::size_t p = 0; p < d; ++p) {
      data.images[i * d + p] = std::clamp(templates[k * d + p] + noise(rng), 0.0, 1.0);
    }
  }
  return data;
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  return gen_synthetic(spec, spec.seed ^ 0x9e3779b97f4a7c15ULL, "synthetic");
}

// --- files ----------------------------------------------------------------------

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, path, "cannot open for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, path, "cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::kIo, path, "write failed");
}

void write_text_file(const std::string& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string fnv1a_hex(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return out;
}

// --- IDX --------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kIdxImagesU8 = 0x00000803;
constexpr std::uint32_t kIdxImagesF64 = 0x00000E04;
constexpr std::uint32_t kIdxLabels = 0x00000801;

class BigEndianReader {
 public:
  BigEndianReader(std::span<const std::uint8_t> bytes, std::string file) : bytes_(bytes), file_(std::move(file)) {}

  std::uint32_t u32(const std::string& field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_++];
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const std::string& field) {
    need(n, field);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const std::string& field) {
    if (n > remaining()) {
      throw FormatError(FormatErrorKind::kTruncated, file_ + " " + field,
                        "needs " + std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left");
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::string file_;
  std::size_t pos_ = 0;
};

std::size_t checked_product(std::span<const std::size_t> dims, const std::string& field) {
  std::size_t total = 1;
  for (std::size_t d : dims) {
    if (d != 0 && total > (std::size_t{1} << 40) / d) throw FormatError(FormatErrorKind::kMalformed, field, "dimensions overflow");
    total *= d;
  }
  return total;
}

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace

Dataset parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes) {
  BigEndianReader img(image_bytes, "images");
  const std::uint32_t magic = img.u32("magic");
  Shape shape;
  if (magic == kIdxImagesU8) {
    const std::size_t n = img.u32("dim0"), h = img.u32("dim1"), w = img.u32("dim2");
    shape = {n, 1, h, w};
  } else if (magic == kIdxImagesF64) {
    for (int i = 0; i < 4; ++i) shape.push_back(img.u32("dim" + std::to_string(i)));
  } else {
    char buf[11];
    std::snprintf(buf, sizeof buf, "0x%08x", magic);
    throw FormatError(FormatErrorKind::kBadMagic, "images magic", std::string("expected 0x00000803 or 0x00000e04, got ") + buf);
  }
  const std::size_t count = checked_product(shape, "images dims");
  // Take the payload before allocating so a corrupt header cannot request a huge tensor.
  auto px = img.take(magic == kIdxImagesU8 ? count : count * 8, "pixels");
  Tensor images(shape);
  if (magic == kIdxImagesU8) {
    for (std::size_t i = 0; i < count; ++i) images[i] = static_cast<double>(px[i]) / 255.0;
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits = 0;
      for (std::size_t b = 0; b < 8; ++b) bits = (bits << 8) | px[i * 8 + b];
      images[i] = std::bit_cast<double>(bits);
    }
  }
  if (img.remaining() != 0) throw FormatError(FormatErrorKind::kMalformed, "images", "trailing bytes after pixel data");

  BigEndianReader lab(label_bytes, "labels");
  const std::uint32_t lmagic = lab.u32("magic");
  if (lmagic != kIdxLabels) {
    char buf[11];
    std::snprintf(buf, sizeof buf, "0x%08x", lmagic);
    throw FormatError(FormatErrorKind::kBadMagic, "labels magic", std::string("expected 0x00000801, got ") + buf);
  }
  const std::size_t nl = lab.u32("dim0");
  if (nl != shape[0]) {
    throw FormatError(FormatErrorKind::kCountMismatch, "labels dim0",
                      std::to_string(nl) + " labels for " + std::to_string(shape[0]) + " images");
  }
  auto raw = lab.take(nl, "labels");
  if (lab.remaining() != 0) throw FormatError(FormatErrorKind::kMalformed, "labels", "trailing bytes after label data");

  Dataset data;
  data.images = std::move(images);
  data.labels.assign(raw.begin(), raw.end());
  int top = 1;
  for (int l : data.labels) top = std::max(top, l);
  data.classes = static_cast<std::size_t>(top) + 1;
  data.split = "idx";
  for (double p : data.images.data()) {
    if (!(p >= 0.0 && p <= 1.0)) throw FormatError(FormatErrorKind::kMalformed, "pixels", "value outside [0, 1]");
  }
  return data;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);
  Dataset data = parse_idx(images, labels);
  data.split = images_path;
  return data;
}

std::vector<std::uint8_t> encode_idx_images(const Tensor& images, IdxPixels pixels) {
  if (images.rank() != 4) throw ShapeError("encode_idx_images: expected (N, C, H, W), got " + shape_str(images.shape()));
  std::vector<std::uint8_t> out;
  if (pixels == IdxPixels::kUint8) {
    if (images.dim(1) != 1) throw ShapeError("encode_idx_images: 8-bit IDX holds single-channel images only");
    put_u32_be(out, kIdxImagesU8);
    put_u32_be(out, static_cast<std::uint32_t>(images.dim(0)));
    put_u32_be(out, static_cast<std::uint32_t>(images.dim(2)));
    put_u32_be(out, static_cast<std::uint32_t>(images.dim(3)));
    for (double p : images.data()) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0)));
  } else {
    put_u32_be(out, kIdxImagesF64);
    for (std::size_t d : images.shape()) put_u32_be(out, static_cast<std::uint32_t>(d));
    for (double p : images.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(p);
      for (int s = 56; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(bits >> s));
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const int> labels) {
  std::vector<std::uint8_t> out;
  put_u32_be(out, kIdxLabels);
  put_u32_be(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw ValueError("encode_idx_labels: label " + std::to_string(l) + " does not fit a byte");
    out.push_back(static_cast<std::uint8_t>(l));
  }
  return out;
}

void save_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path, IdxPixels pixels) {
  write_file(images_path, encode_idx_images(data.images, pixels));
  write_file(labels_path, encode_idx_labels(data.labels));
}

// --- CSV ---------------------------------------------------------------------------

Dataset parse_csv_dataset(const std::string& text, std::size_t classes) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(FormatErrorKind::kMalformed, "csv header", "empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  {
    std::stringstream hs(line);
    for (std::string f; std::getline(hs, f, ',');) header.push_back(f);
  }
  if (header.size() < 2 || header[0] != "label") {
    throw FormatError(FormatErrorKind::kMalformed, "csv header", "expected 'label,p0,p1,...'");
  }
  for (std::size_t i = 1; i < header.size(); ++i) {
    if (header[i] != "p" + std::to_string(i - 1)) {
      throw FormatError(FormatErrorKind::kMalformed, "csv header", "column " + std::to_string(i) + " should be p" + std::to_string(i - 1));
    }
  }
  const std::size_t d = header.size() - 1;
  std::vector<double> pixels;
  std::vector<int> labels;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream rs(line);
    std::vector<std::string> fields;
    for (std::string f; std::getline(rs, f, ',');) fields.push_back(f);
    const std::string where = "csv row " + std::to_string(row);
    if (fields.size() != d + 1) throw FormatError(FormatErrorKind::kCountMismatch, where, "expected " + std::to_string(d + 1) + " fields");
    int label = 0;
    auto [lp, lec] = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), label);
    if (lec != std::errc() || lp != fields[0].data() + fields[0].size() || label < 0) {
      throw FormatError(FormatErrorKind::kMalformed, where, "bad label '" + fields[0] + "'");
    }
    labels.push_back(label);
    for (std::size_t i = 1; i <= d; ++i) {
      double v = 0.0;
      auto [p, ec] = std::from_chars(fields[i].data(), fields[i].data() + fields[i].size(), v);
      if (ec != std::errc() || p != fields[i].data() + fields[i].size() || !(v >= 0.0 && v <= 1.0)) {
        throw FormatError(FormatErrorKind::kMalformed, where, "pixel '" + fields[i] + "' is not a number in [0, 1]");
      }
      pixels.push_back(v);
    }
  }
  if (labels.empty()) throw FormatError(FormatErrorKind::kMalformed, "csv", "no rows");
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d))));
  const Shape shape = side * side == d ? Shape{labels.size(), 1, side, side} : Shape{labels.size(), 1, 1, d};
  Dataset data;
  data.images = Tensor(shape, std::move(pixels));
  int top = 1;
  for (int l : labels) top = std::max(top, l);
  data.classes = classes ? classes : static_cast<std::size_t>(top) + 1;
  data.labels = std::move(labels);
  data.split = "csv";
  data.validate();
  return data;
}

Dataset load_csv_dataset(const std::string& path, std::size_t classes) {
  const auto bytes = read_file(path);
  Dataset data = parse_csv_dataset(std::string(bytes.begin(), bytes.end()), classes);
  data.split = path;
  return data;
}

}  // namespace orthonet
