#include "orthonet/defenses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "orthonet/config.hpp"
#include "orthonet/error.hpp"

namespace orthonet {

namespace {

constexpr double kTvSmoothing = 1e-6;
constexpr int kMaxHalvings = 60;

struct Planes {
  std::size_t count = 0;  // N * C
  std::size_t h = 0, w = 0;
};

Planes planes_of(const Tensor& x, const char* who) {
  if (x.rank() != 4) throw ShapeError(std::string(who) + ": expected (N, C, H, W), got " + shape_str(x.shape()));
  return {x.dim(0) * x.dim(1), x.dim(2), x.dim(3)};
}

// Gradient of the smoothed TV term for one plane, accumulated into g.
void add_tv_gradient(const double* u, double* g, std::size_t h, std::size_t w, double weight) {
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double c = u[i * w + j];
      const double dx = i + 1 < h ? u[(i + 1) * w + j] - c : 0.0;
      const double dy = j + 1 < w ? u[i * w + j + 1] - c : 0.0;
      const double t = std::sqrt(dx * dx + dy * dy + kTvSmoothing);
      g[i * w + j] -= weight * (dx + dy) / t;
      if (i + 1 < h) g[(i + 1) * w + j] += weight * dx / t;
      if (j + 1 < w) g[i * w + j + 1] += weight * dy / t;
    }
  }
}

double plane_tv(const double* u, std::size_t h, std::size_t w) {
  double tv = 0.0;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double c = u[i * w + j];
      const double dx = i + 1 < h ? u[(i + 1) * w + j] - c : 0.0;
      const double dy = j + 1 < w ? u[i * w + j + 1] - c : 0.0;
      tv += std::sqrt(dx * dx + dy * dy + kTvSmoothing);
    }
  }
  return tv;
}

constexpr std::array<int, 64> kLuminance = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

// Orthonormal DCT-II basis: c[u][i] = a(u) cos((2i + 1) u pi / 16).
const std::array<double, 64>& dct_basis() {
  static const std::array<double, 64> basis = [] {
    std::array<double, 64> b{};
    for (int u = 0; u < 8; ++u) {
      const double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int i = 0; i < 8; ++i) b[u * 8 + i] = a * std::cos((2 * i + 1) * u * std::numbers::pi / 16.0);
    }
    return b;
  }();
  return basis;
}

void dct8x8(const double* in, double* out) {
  const auto& c = dct_basis();
  std::array<double, 64> tmp{};
  for (int u = 0; u < 8; ++u)
    for (int j = 0; j < 8; ++j) {
      double s = 0.0;
      for (int i = 0; i < 8; ++i) s += c[u * 8 + i] * in[i * 8 + j];
      tmp[u * 8 + j] = s;
    }
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      double s = 0.0;
      for (int j = 0; j < 8; ++j) s += tmp[u * 8 + j] * c[v * 8 + j];
      out[u * 8 + v] = s;
    }
}

void idct8x8(const double* in, double* out) {
  const auto& c = dct_basis();
  std::array<double, 64> tmp{};
  for (int i = 0; i < 8; ++i)
    for (int v = 0; v < 8; ++v) {
      double s = 0.0;
      for (int u = 0; u < 8; ++u) s += c[u * 8 + i] * in[u * 8 + v];
      tmp[i * 8 + v] = s;
    }
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      double s = 0.0;
      for (int v = 0; v < 8; ++v) s += tmp[i * 8 + v] * c[v * 8 + j];
      out[i * 8 + j] = s;
    }
}

void check_quality(int quality) {
  if (quality < 1 || quality > 100) throw ValueError("jpeg: quality must be in [1, 100], got " + std::to_string(quality));
}

// Visits every 8x8 block of every plane on the level-shifted 0..255 scale;
// `sink(plane, bi, bj, levels, table)` gets the quantized levels round(F / Q).
template <typename Sink>
void for_each_quantized_block(const Tensor& x, int quality, Sink&& sink) {
  const Planes p = planes_of(x, "jpeg");
  const std::vector<int> q = jpeg_quant_table(quality);
  std::array<double, 64> block{}, coeffs{};
  for (std::size_t n = 0; n < p.count; ++n) {
    const double* plane = x.data().data() + n * p.h * p.w;
    for (std::size_t bi = 0; bi < p.h; bi += 8) {
      for (std::size_t bj = 0; bj < p.w; bj += 8) {
        for (std::size_t i = 0; i < 8; ++i)
          for (std::size_t j = 0; j < 8; ++j) {
            const std::size_t r = std::min(bi + i, p.h - 1), c = std::min(bj + j, p.w - 1);
            block[i * 8 + j] = 255.0 * plane[r * p.w + c] - 128.0;
          }
        dct8x8(block.data(), coeffs.data());
        for (int k = 0; k < 64; ++k) coeffs[k] = std::round(coeffs[k] / q[k]);
        sink(n, bi, bj, coeffs, q);
      }
    }
  }
}

}  // namespace

void DefenseSpec::validate() const {
  switch (kind) {
    case DefenseKind::kNone: return;
    case DefenseKind::kJpeg: check_quality(quality); return;
    case DefenseKind::kTvm:
      if (!(weight > 0.0) || !std::isfinite(weight)) throw ValueError("tvm: weight must be > 0");
      if (!(step > 0.0) || !std::isfinite(step)) throw ValueError("tvm: step must be > 0");
      return;
    case DefenseKind::kBitReduce:
      if (depth < 1 || depth > 8) throw ValueError("bit reduction: depth must be in [1, 8], got " + std::to_string(depth));
      return;
    case DefenseKind::kBilateral:
      if (window < 3 || window % 2 == 0) {
        throw ValueError("bilateral: window must be odd and >= 3, got " + std::to_string(window));
      }
      if (!(spatial_sigma() > 0.0) || !(sigma_range > 0.0)) throw ValueError("bilateral: sigmas must be > 0");
      return;
  }
}

double DefenseSpec::spatial_sigma() const {
  return sigma_spatial ? *sigma_spatial : static_cast<double>(window) / 3.0;
}

std::string DefenseSpec::id() const {
  switch (kind) {
    case DefenseKind::kNone: return "none";
    case DefenseKind::kJpeg: return "jpeg:" + std::to_string(quality);
    case DefenseKind::kTvm: return "tvm:" + format_double(weight);
    case DefenseKind::kBitReduce: return "bits:" + std::to_string(depth);
    case DefenseKind::kBilateral: return "bilateral:" + std::to_string(window);
  }
  return "?";
}

DefenseSpec DefenseSpec::parse(const std::string& text) {
  DefenseSpec spec;
  if (text == "none") return spec;
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw ValueError("defense '" + text + "': expected none, jpeg:Q, tvm:W, bits:D or bilateral:W");
  }
  const std::string kind = text.substr(0, colon), arg = text.substr(colon + 1);
  double value = 0.0;
  try {
    value = parse_double(arg, "defense '" + text + "'");
  } catch (const ConfigError& e) {
    throw ValueError(e.what());
  }
  const auto as_int = [&] {
    if (value != std::floor(value)) throw ValueError("defense '" + text + "': parameter must be an integer");
    return static_cast<long long>(value);
  };
  if (kind == "jpeg") {
    spec.kind = DefenseKind::kJpeg;
    spec.quality = static_cast<int>(as_int());
  } else if (kind == "tvm") {
    spec.kind = DefenseKind::kTvm;
    spec.weight = value;
  } else if (kind == "bits") {
    spec.kind = DefenseKind::kBitReduce;
    spec.depth = static_cast<int>(as_int());
  } else if (kind == "bilateral") {
    spec.kind = DefenseKind::kBilateral;
    const long long w = as_int();
    if (w < 0) throw ValueError("defense '" + text + "': window must be positive");
    spec.window = static_cast<std::size_t>(w);
  } else {
    throw ValueError("defense '" + text + "': unknown kind '" + kind + "'");
  }
  spec.validate();
  return spec;
}

Tensor bit_reduce(const Tensor& x, int depth) {
  if (depth < 1 || depth > 8) throw ValueError("bit_reduce: depth must be in [1, 8], got " + std::to_string(depth));
  const double levels = static_cast<double>((1 << depth) - 1);
  Tensor out = x;
  for (double& v : out.data()) v = std::floor(v * levels + 0.5) / levels;
  return out;
}

double tv_energy(const Tensor& u, const Tensor& x, double weight) {
  const Planes p = planes_of(u, "tv_energy");
  if (u.shape() != x.shape()) throw ShapeError("tv_energy: shapes differ");
  double e = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) e += (u[i] - x[i]) * (u[i] - x[i]);
  for (std::size_t n = 0; n < p.count; ++n) e += weight * plane_tv(u.data().data() + n * p.h * p.w, p.h, p.w);
  return e;
}

Tensor tv_minimize(const Tensor& x, double weight, std::size_t iters, double step, std::vector<double>* energies) {
  DefenseSpec check;
  check.kind = DefenseKind::kTvm;
  check.weight = weight;
  check.step = step;
  check.validate();
  const Planes p = planes_of(x, "tv_minimize");
  const std::size_t area = p.h * p.w;
  // E separates over planes, so each plane gets its own descent and line
  // search; the reported trace is the sum of the per-plane traces.
  const auto plane_energy = [&](const double* u, const double* x0) {
    double e = 0.0;
    for (std::size_t i = 0; i < area; ++i) e += (u[i] - x0[i]) * (u[i] - x0[i]);
    e += weight * plane_tv(u, p.h, p.w);
    if (!std::isfinite(e)) throw ValueError("tv_minimize: non-finite energy");
    return e;
  };
  Tensor u = x;
  std::vector<double> trace(iters + 2, 0.0);
  std::vector<double> g(area), trial(area);
  for (std::size_t n = 0; n < p.count; ++n) {
    const double* x0 = x.data().data() + n * area;
    double* un = u.data().data() + n * area;
    double e = plane_energy(un, x0);
    trace[0] += e;
    for (std::size_t t = 0; t < iters; ++t) {
      for (std::size_t i = 0; i < area; ++i) g[i] = 2.0 * (un[i] - x0[i]);
      add_tv_gradient(un, g.data(), p.h, p.w, weight);
      double s = step, e_trial = e;
      bool accepted = false;
      for (int k = 0; k < kMaxHalvings && !accepted; ++k, s *= 0.5) {
        for (std::size_t i = 0; i < area; ++i) trial[i] = un[i] - s * g[i];
        e_trial = plane_energy(trial.data(), x0);
        accepted = e_trial <= e;
      }
      if (accepted) {
        std::copy(trial.begin(), trial.end(), un);
        e = e_trial;
      }
      trace[t + 1] += e;
    }
    for (std::size_t i = 0; i < area; ++i) un[i] = std::clamp(un[i], 0.0, 1.0);
    trace[iters + 1] += plane_energy(un, x0);
  }
  if (energies) *energies = std::move(trace);
  return u;
}

Tensor bilateral(const Tensor& x, std::size_t window, double sigma_spatial, double sigma_range) {
  DefenseSpec check;
  check.kind = DefenseKind::kBilateral;
  check.window = window;
  check.sigma_spatial = sigma_spatial;
  check.sigma_range = sigma_range;
  check.validate();
  const Planes p = planes_of(x, "bilateral");
  const long r = static_cast<long>(window / 2);
  std::vector<double> spatial;
  for (long di = -r; di <= r; ++di)
    for (long dj = -r; dj <= r; ++dj) {
      spatial.push_back(std::exp(-static_cast<double>(di * di + dj * dj) / (2.0 * sigma_spatial * sigma_spatial)));
    }
  const double range_scale = 1.0 / (2.0 * sigma_range * sigma_range);
  const long h = static_cast<long>(p.h), w = static_cast<long>(p.w);
  Tensor out(x.shape());
  for (std::size_t n = 0; n < p.count; ++n) {
    const double* in = x.data().data() + n * p.h * p.w;
    double* dst = out.data().data() + n * p.h * p.w;
    for (long i = 0; i < h; ++i) {
      for (long j = 0; j < w; ++j) {
        const double centre = in[i * w + j];
        double num = 0.0, den = 0.0;
        std::size_t k = 0;
        for (long di = -r; di <= r; ++di) {
          const long ii = std::clamp(i + di, 0L, h - 1);
          for (long dj = -r; dj <= r; ++dj, ++k) {
            const double v = in[ii * w + std::clamp(j + dj, 0L, w - 1)];
            const double wt = spatial[k] * std::exp(-(v - centre) * (v - centre) * range_scale);
            num += wt * v;
            den += wt;
          }
        }
        dst[i * w + j] = num / den;
      }
    }
  }
  return out;
}

std::vector<int> jpeg_quant_table(int quality) {
  check_quality(quality);
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::vector<int> q(64);
  for (int k = 0; k < 64; ++k) q[k] = std::max(1, static_cast<int>(std::floor(kLuminance[k] * scale / 100.0 + 0.5)));
  return q;
}

Tensor jpeg_like(const Tensor& x, int quality) {
  const Planes p = planes_of(x, "jpeg");
  Tensor out(x.shape());
  std::array<double, 64> coeffs{}, pixels{};
  for_each_quantized_block(x, quality, [&](std::size_t n, std::size_t bi, std::size_t bj, const auto& levels,
                                           const std::vector<int>& q) {
    for (int k = 0; k < 64; ++k) coeffs[k] = levels[k] * q[k];
    idct8x8(coeffs.data(), pixels.data());
    double* dst = out.data().data() + n * p.h * p.w;
    for (std::size_t i = 0; i < 8 && bi + i < p.h; ++i)
      for (std::size_t j = 0; j < 8 && bj + j < p.w; ++j) {
        dst[(bi + i) * p.w + bj + j] = std::clamp((pixels[i * 8 + j] + 128.0) / 255.0, 0.0, 1.0);
      }
  });
  return out;
}

double jpeg_retained_ac_energy(const Tensor& x, int quality) {
  double total = 0.0;
  for_each_quantized_block(x, quality, [&](std::size_t, std::size_t, std::size_t, const auto& levels,
                                           const std::vector<int>&) {
    for (int k = 1; k < 64; ++k) total += levels[k] * levels[k];
  });
  return total;
}

Tensor apply_defense(const Tensor& x, const DefenseSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case DefenseKind::kNone: return x;
    case DefenseKind::kJpeg: return jpeg_like(x, spec.quality);
    case DefenseKind::kTvm: return tv_minimize(x, spec.weight, spec.iters, spec.step);
    case DefenseKind::kBitReduce: return bit_reduce(x, spec.depth);
    case DefenseKind::kBilateral: return bilateral(x, spec.window, spec.spatial_sigma(), spec.sigma_range);
  }
  throw ValueError("apply_defense: unknown kind");
}

}  // namespace orthonet
