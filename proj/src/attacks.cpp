#include "orthonet/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "orthonet/config.hpp"
#include "orthonet/error.hpp"

namespace orthonet {

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : v < 0.0 ? -1.0 : 0.0; }

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void check_inputs(const Tensor& x, std::span<const int> labels, double eps, const char* who) {
  if (x.rank() < 2 || x.dim(0) != labels.size()) {
    throw ShapeError(std::string(who) + ": batch " + shape_str(x.shape()) + " does not match " +
                     std::to_string(labels.size()) + " labels");
  }
  if (!(eps >= 0.0)) throw ValueError(std::string(who) + ": epsilon must be >= 0");
}

Tensor checked_gradient(const LossGradient& grad, const Tensor& x, std::span<const int> labels) {
  Tensor g = grad(x, labels);
  if (g.shape() != x.shape()) {
    throw ShapeError("attack: loss gradient " + shape_str(g.shape()) + " does not match input " + shape_str(x.shape()));
  }
  return g;
}

// x <- clip to [x0 - eps, x0 + eps] and to [0, 1], elementwise.
void project(Tensor& x, const Tensor& x0, double eps) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = std::clamp(x[i], x0[i] - eps, x0[i] + eps);
    x[i] = std::clamp(v, 0.0, 1.0);
  }
}

// Projected sign-ascent from `start`; `direction` turns a raw gradient into
// the vector whose sign is taken (identity or the momentum accumulator).
template <typename Direction>
Tensor sign_ascent(const LossGradient& grad, const Tensor& x0, Tensor x, std::span<const int> labels, double eps,
                   std::size_t iters, double alpha, Direction&& direction) {
  for (std::size_t t = 0; t < iters; ++t) {
    const Tensor g = checked_gradient(grad, x, labels);
    const Tensor& d = direction(g);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += alpha * sign(d[i]);
    project(x, x0, eps);
  }
  return x;
}

}  // namespace

const char* to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::kFgsm: return "fgsm";
    case AttackKind::kIfgsm: return "ifgsm";
    case AttackKind::kMifgsm: return "mifgsm";
    case AttackKind::kPgd: return "pgd";
  }
  return "?";
}

AttackKind parse_attack_kind(const std::string& name) {
  for (AttackKind k : {AttackKind::kFgsm, AttackKind::kIfgsm, AttackKind::kMifgsm, AttackKind::kPgd}) {
    if (name == to_string(k)) return k;
  }
  throw ValueError("unknown attack '" + name + "' (expected fgsm, ifgsm, mifgsm or pgd)");
}

double AttackSpec::step_size() const {
  if (alpha) return *alpha;
  if (kind == AttackKind::kFgsm) return epsilon;
  if (kind == AttackKind::kPgd) return epsilon / 4.0;
  return iters == 0 ? 0.0 : epsilon / static_cast<double>(iters);
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= kMaxEpsilon)) {
    throw ValueError("attack: epsilon must lie in [0, " + format_double(kMaxEpsilon) + "], got " + format_double(epsilon));
  }
  if (alpha && !(*alpha >= 0.0)) throw ValueError("attack: alpha must be >= 0");
  if (!(mu >= 0.0)) throw ValueError("attack: mu must be >= 0");
}

std::vector<std::string> AttackSpec::warnings() const {
  std::vector<std::string> out;
  if (kind == AttackKind::kFgsm) return out;
  if (iters == 0) out.push_back(std::string(to_string(kind)) + ": iters = 0, input returned unchanged");
  if (step_size() > epsilon) {
    out.push_back(std::string(to_string(kind)) + ": alpha " + format_double(step_size()) + " exceeds epsilon " +
                  format_double(epsilon));
  }
  return out;
}

LossGradient model_loss_gradient(const Model& model) {
  return [&model](const Tensor& x, std::span<const int> labels) {
    ForwardPass pass = forward(model, x);
    const Variable total = sum(softmax_cross_entropy(pass.logits, labels));
    const Variable wrt[] = {pass.input};
    return backward(total, wrt)[0];
  };
}

Tensor fgsm(const LossGradient& grad, const Tensor& x, std::span<const int> labels, double eps) {
  check_inputs(x, labels, eps, "fgsm");
  return sign_ascent(grad, x, x, labels, eps, 1, eps, [](const Tensor& g) -> const Tensor& { return g; });
}

Tensor ifgsm(const LossGradient& grad, const Tensor& x, std::span<const int> labels, double eps, std::size_t iters,
             double alpha) {
  check_inputs(x, labels, eps, "ifgsm");
  return sign_ascent(grad, x, x, labels, eps, iters, alpha, [](const Tensor& g) -> const Tensor& { return g; });
}

Tensor mifgsm(const LossGradient& grad, const Tensor& x, std::span<const int> labels, double eps, std::size_t iters,
              double alpha, double mu) {
  check_inputs(x, labels, eps, "mifgsm");
  if (!(mu >= 0.0)) throw ValueError("mifgsm: mu must be >= 0");
  const std::size_t n = x.dim(0), row = x.size() / n;
  Tensor momentum(x.shape());
  auto accumulate = [&](const Tensor& g) -> const Tensor& {
    for (std::size_t r = 0; r < n; ++r) {
      double l1 = 0.0;
      for (std::size_t k = 0; k < row; ++k) l1 += std::abs(g[r * row + k]);
      // A zero gradient leaves the decayed accumulator as the step direction.
      for (std::size_t k = 0; k < row; ++k) {
        const std::size_t i = r * row + k;
        momentum[i] = mu * momentum[i] + (l1 > 0.0 ? g[i] / l1 : 0.0);
      }
    }
    return momentum;
  };
  return sign_ascent(grad, x, x, labels, eps, iters, alpha, accumulate);
}

Tensor pgd_start(const Tensor& x, double eps, std::uint64_t seed, std::size_t first_row) {
  if (x.rank() < 1 || x.dim(0) == 0) return x;
  const std::size_t n = x.dim(0), row = x.size() / n;
  Tensor out = x;
  for (std::size_t r = 0; r < n; ++r) {
    std::uint64_t state = splitmix64(seed ^ splitmix64(first_row + r));
    for (std::size_t k = 0; k < row; ++k) {
      state = splitmix64(state);
      const double u = static_cast<double>(state >> 11) * 0x1.0p-53;  // [0, 1)
      const std::size_t i = r * row + k;
      out[i] = std::clamp(x[i] + eps * (2.0 * u - 1.0), 0.0, 1.0);
    }
  }
  return out;
}

Tensor pgd(const LossGradient& grad, const Tensor& x, std::span<const int> labels, double eps, std::size_t iters,
           double alpha, bool random_start, std::uint64_t seed, std::size_t first_row) {
  check_inputs(x, labels, eps, "pgd");
  Tensor start = random_start ? pgd_start(x, eps, seed, first_row) : x;
  return sign_ascent(grad, x, std::move(start), labels, eps, iters, alpha,
                     [](const Tensor& g) -> const Tensor& { return g; });
}

AdversarialBatch make_adversarial(Tensor original, Tensor perturbed, std::vector<int> labels) {
  if (original.shape() != perturbed.shape() || original.rank() < 1 || original.dim(0) != labels.size()) {
    throw ShapeError("make_adversarial: inconsistent shapes");
  }
  AdversarialBatch out{std::move(original), std::move(perturbed), std::move(labels), {}};
  const std::size_t n = out.labels.size(), row = n == 0 ? 0 : out.original.size() / n;
  out.linf.assign(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < row; ++k) {
      out.linf[r] = std::max(out.linf[r], std::abs(out.perturbed[r * row + k] - out.original[r * row + k]));
    }
  }
  return out;
}

Tensor run_attack(const LossGradient& grad, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                  std::size_t first_row) {
  spec.validate();
  const double eps = spec.epsilon, alpha = spec.step_size();
  switch (spec.kind) {
    case AttackKind::kFgsm: return fgsm(grad, x, labels, eps);
    case AttackKind::kIfgsm: return ifgsm(grad, x, labels, eps, spec.iters, alpha);
    case AttackKind::kMifgsm: return mifgsm(grad, x, labels, eps, spec.iters, alpha, spec.mu);
    case AttackKind::kPgd: return pgd(grad, x, labels, eps, spec.iters, alpha, spec.random_start, spec.seed, first_row);
  }
  throw ValueError("run_attack: unknown kind");
}

AdversarialBatch attack(const Model& model, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                        std::size_t first_row) {
  Tensor adv = run_attack(model_loss_gradient(model), x, labels, spec, first_row);
  return make_adversarial(x, std::move(adv), std::vector<int>(labels.begin(), labels.end()));
}

}  // namespace orthonet
