#include "orthonet/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <sstream>

#include "orthonet/config.hpp"
#include "orthonet/dataset.hpp"
#include "orthonet/error.hpp"

namespace orthonet {

namespace {

constexpr char kMagic[4] = {'O', 'R', 'T', 'H'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void u64(std::uint64_t v) {
    for (int s = 0; s < 64; s += 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void text(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, const std::string& field) {
    if (n > bytes_.size() - pos_) {
      throw FormatError(FormatErrorKind::kTruncated, field,
                        "needs " + std::to_string(n) + " bytes, " + std::to_string(bytes_.size() - pos_) + " left");
    }
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint8_t u8(const std::string& field) { return take(1, field)[0]; }
  std::uint32_t u32(const std::string& field) {
    auto b = take(4, field);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  }
  std::string text(const std::string& field) {
    const std::uint32_t n = u32(field + " length");
    auto b = take(n, field);
    return {b.begin(), b.end()};
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::string encode_meta(const CheckpointMeta& meta) {
  return "seed=" + std::to_string(meta.seed) + "\nlambda=" + format_double(meta.lambda) +
         "\nreference_hash=" + meta.reference_hash + "\nval_accuracy=" + format_double(meta.val_accuracy) + "\n";
}

CheckpointMeta decode_meta(const std::string& text) {
  CheckpointMeta meta;
  std::istringstream in(text);
  std::string line;
  auto bad = [](const std::string& what) { return FormatError(FormatErrorKind::kMalformed, "metadata", what); };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw bad("line without '=': " + line);
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    const char* first = value.data();
    const char* last = value.data() + value.size();
    if (key == "seed") {
      auto [p, ec] = std::from_chars(first, last, meta.seed);
      if (ec != std::errc() || p != last) throw bad("bad seed '" + value + "'");
    } else if (key == "lambda" || key == "val_accuracy") {
      double& dst = key == "lambda" ? meta.lambda : meta.val_accuracy;
      auto [p, ec] = std::from_chars(first, last, dst);
      if (ec != std::errc() || p != last) throw bad("bad " + key + " '" + value + "'");
    } else if (key == "reference_hash") {
      meta.reference_hash = value;
    } else {
      throw bad("unknown key '" + key + "'");
    }
  }
  return meta;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const CheckpointMeta& meta, Dtype dtype) {
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.text(describe(model.arch()));
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& [name, t] : model.params()) {
    w.text(name);
    w.u8(static_cast<std::uint8_t>(dtype));
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) {
      if (dtype == Dtype::kFloat64) {
        w.u64(std::bit_cast<std::uint64_t>(v));
      } else {
        w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  w.text(encode_meta(meta));
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  for (int i = 0; i < 4; ++i) {
    if (magic[static_cast<std::size_t>(i)] != static_cast<std::uint8_t>(kMagic[i])) {
      throw FormatError(FormatErrorKind::kBadMagic, "magic", "expected \"ORTH\"");
    }
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorKind::kBadVersion, "version",
                      "expected " + std::to_string(kCheckpointVersion) + ", got " + std::to_string(version));
  }
  const std::string descriptor = r.text("arch");
  Architecture arch;
  ParamMap expected;
  try {
    arch = parse_architecture(descriptor);
    expected = parameter_template(arch);
  } catch (const Error& e) {
    throw FormatError(FormatErrorKind::kArchMismatch, "arch", e.what());
  }
  const std::uint32_t count = r.u32("tensor count");
  if (count != expected.size()) {
    throw FormatError(FormatErrorKind::kCountMismatch, "tensor count",
                      "architecture implies " + std::to_string(expected.size()) + " tensors, file has " +
                          std::to_string(count));
  }
  ParamMap params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.text("tensor " + std::to_string(i) + " name");
    const std::string field = "tensor " + name;
    auto it = expected.find(name);
    if (it == expected.end()) throw FormatError(FormatErrorKind::kShapeMismatch, field, "not a parameter of the architecture");
    if (params.contains(name)) throw FormatError(FormatErrorKind::kMalformed, field, "duplicate tensor");
    const std::uint8_t dtype = r.u8(field + " dtype");
    if (dtype > 1) throw FormatError(FormatErrorKind::kBadDtype, field + " dtype", "unknown dtype " + std::to_string(dtype));
    const std::uint32_t rank = r.u32(field + " rank");
    if (rank != it->second.rank()) {
      throw FormatError(FormatErrorKind::kShapeMismatch, field,
                        "rank " + std::to_string(rank) + ", expected " + std::to_string(it->second.rank()));
    }
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u32(field + " extent"));
    if (shape != it->second.shape()) {
      throw FormatError(FormatErrorKind::kShapeMismatch, field,
                        "shape " + shape_str(shape) + ", expected " + shape_str(it->second.shape()));
    }
    const std::size_t n = shape_size(shape);
    const std::size_t width = dtype == 0 ? 8 : 4;
    auto raw = r.take(n * width, field + " data");
    Tensor t(shape);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint64_t bits = 0;
      for (std::size_t b = 0; b < width; ++b) bits |= static_cast<std::uint64_t>(raw[k * width + b]) << (8 * b);
      t[k] = dtype == 0 ? std::bit_cast<double>(bits)
                        : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)));
    }
    params.emplace(name, std::move(t));
  }
  CheckpointMeta meta = decode_meta(r.text("metadata"));
  if (!r.done()) throw FormatError(FormatErrorKind::kMalformed, "trailer", "unexpected bytes after metadata");
  try {
    return {Model(std::move(arch), std::move(params)), std::move(meta)};
  } catch (const Error& e) {
    throw FormatError(FormatErrorKind::kArchMismatch, "arch", e.what());
  }
}

void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::string& path, Dtype dtype) {
  write_file(path, encode_checkpoint(model, meta, dtype));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace orthonet
