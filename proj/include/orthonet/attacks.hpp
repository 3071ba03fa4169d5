#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "orthonet/model.hpp"

namespace orthonet {

enum class AttackKind { kFgsm, kIfgsm, kMifgsm, kPgd };

const char* to_string(AttackKind kind);
// Accepts "fgsm", "ifgsm", "mifgsm", "pgd"; throws ValueError otherwise.
AttackKind parse_attack_kind(const std::string& name);

// Largest budget an AttackSpec accepts (8% of the dynamic range).
inline constexpr double kMaxEpsilon = 0.08;

// Non-targeted L-infinity attack. epsilon, alpha are in pixel units, i.e. as a
// fraction of the [0, 1] dynamic range.
struct AttackSpec {
  AttackKind kind = AttackKind::kFgsm;
  double epsilon = 0.0;
  std::size_t iters = 10;
  // Per-step size; defaults to eps/4 for pgd and eps/iters otherwise.
  std::optional<double> alpha;
  double mu = 1.0;
  bool random_start = true;
  std::uint64_t seed = 0;

  double step_size() const;
  void validate() const;
  // Degenerate but legal settings (zero iterations, alpha above epsilon).
  std::vector<std::string> warnings() const;
};

// Gradient of the summed per-example loss with respect to the inputs, so
// row i depends on row i only.
using LossGradient = std::function<Tensor(const Tensor& x, std::span<const int> labels)>;

LossGradient model_loss_gradient(const Model& model);

// Cores on an arbitrary loss. x and the result are (N, ...) in [0, 1].
// `first_row` is the dataset index of row 0; it keys the per-example random
// start so results do not depend on how a batch is chunked.
Tensor fgsm(const LossGradient& grad, const Tensor& x, std::span<const int> labels, double eps);
Tensor ifgsm(const LossGradient& grad, const Tensor& x, std::span<const int> labels, double eps, std::size_t iters,
             double alpha);
Tensor mifgsm(const LossGradient& grad, const Tensor& x, std::span<const int> labels, double eps, std::size_t iters,
              double alpha, double mu);
Tensor pgd(const LossGradient& grad, const Tensor& x, std::span<const int> labels, double eps, std::size_t iters,
           double alpha, bool random_start, std::uint64_t seed, std::size_t first_row = 0);

// The random start alone: clip01(x + u), u ~ U[-eps, eps] per pixel.
Tensor pgd_start(const Tensor& x, double eps, std::uint64_t seed, std::size_t first_row = 0);

struct AdversarialBatch {
  Tensor original;
  Tensor perturbed;
  std::vector<int> labels;
  std::vector<double> linf;  // per example, max |perturbed - original|
};

AdversarialBatch make_adversarial(Tensor original, Tensor perturbed, std::vector<int> labels);

Tensor run_attack(const LossGradient& grad, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                  std::size_t first_row = 0);
AdversarialBatch attack(const Model& model, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                        std::size_t first_row = 0);

}  // namespace orthonet
