#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "orthonet/dataset.hpp"
#include "orthonet/model.hpp"
#include "orthonet/optimizer.hpp"

namespace orthonet {

// Norm floor used before dividing an input-gradient by its length.
inline constexpr double kGradNormFloor = 1e-12;

// Per-example input-gradient of the classification loss, flattened to (b, d)
// and divided by max(||g||, 1e-12). Zero gradients stay zero.
Tensor input_gradients(const Model& model, const Tensor& batch, std::span<const int> labels);

struct SimilaritySample {
  double delta = 0.0;  // mean of row-wise dot products
  std::size_t batch_size = 0;
};

// Rows are expected to be unit length or zero.
SimilaritySample similarity(const Tensor& g1, const Tensor& g2);

// How the similarity enters the objective. kSigned adds lambda * delta;
// kAbsolute adds lambda * |delta| and so has no incentive to go anti-parallel.
enum class Penalty { kSigned, kAbsolute };

// Mean classification loss of `model` plus lambda times the batch gradient
// similarity to `ref`. The reference gradients enter as constants, so only
// `model` receives gradient. With lambda == 0 the similarity term is not
// built at all and `total` is exactly the plain mean loss.
struct OrthoObjective {
  std::unique_ptr<Graph> graph;
  ParamVars params;
  Variable loss;   // mean cross-entropy
  Variable delta;  // invalid when lambda == 0
  Variable total;
};

OrthoObjective ortho_loss(const Model& model, const Model& ref, const Tensor& batch, std::span<const int> labels,
                          double lambda, Penalty penalty = Penalty::kSigned);

// d(total)/d(theta) through the exact second-order path.
ParamMap ortho_loss_gradient(const Model& model, const Model& ref, const Tensor& batch, std::span<const int> labels,
                             double lambda, Penalty penalty = Penalty::kSigned);

// Same gradient without differentiating through the backward pass: the
// similarity term is obtained from a central difference of the first-order
// parameter gradient along the input direction that delta is sensitive to.
ParamMap ortho_loss_gradient_fd(const Model& model, const Model& ref, const Tensor& batch,
                                std::span<const int> labels, double lambda, Penalty penalty = Penalty::kSigned,
                                double h = 1e-4);

struct OrthoConfig {
  double lambda = 0.0;
  Penalty penalty = Penalty::kSigned;
  std::size_t epochs_check = 20;
  std::size_t max_epochs = 100;
  OptimizerSpec optimizer;
  std::uint64_t seed = 1;
  // Log the similarity to the reference every epoch even when lambda == 0.
  bool track_delta = true;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean over batches
  double delta = 0.0;     // mean over batches; NaN when there is no reference
  double val_acc = 0.0;   // NaN unless the epoch ended with an accuracy check
  double elapsed_s = 0.0;
};

struct AccuracyCheck {
  std::size_t epoch = 0;
  double acc = 0.0;       // Acc_t
  double previous = 0.0;  // Acc_{t-1}; -inf on the first check
};

struct TrainRecord {
  std::vector<EpochRecord> epochs;
  std::vector<AccuracyCheck> checks;
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;

  // "epoch,loss,delta,val_acc" with one row per epoch.
  std::string to_csv() const;
};

struct TrainResult {
  Model model;  // the best-validation-accuracy snapshot
  TrainRecord record;
};

// Mini-batch SGD on the mean loss plus lambda * delta against `ref`.
// Accuracy on `val` is checked every epochs_check epochs (and at max_epochs);
// training stops once a check does not improve on the previous one. Throws
// DivergenceError if a batch objective is not finite.
TrainResult train_orthogonal(const Architecture& arch, const Model& ref, const Dataset& train, const Dataset& val,
                             const OrthoConfig& cfg);

// Ordinary training with the same loop and stopping rule; lambda is ignored.
TrainResult train_plain(const Architecture& arch, const Dataset& train, const Dataset& val, const OrthoConfig& cfg);

struct PairSimilarity {
  double mean = 0.0;
  double stddev = 0.0;
  double mean_abs = 0.0;  // mean over batches of |delta|
  std::size_t batches = 0;
};

// Delta statistics over the first n examples of `data`, split into batches
// of `batch_size`.
PairSimilarity measure_pair_similarity(const Model& m1, const Model& m2, const Dataset& data, std::size_t n,
                                       std::size_t batch_size = 32);

}  // namespace orthonet
