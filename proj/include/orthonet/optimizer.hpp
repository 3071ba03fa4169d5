#pragma once

#include <cstddef>

#include "orthonet/model.hpp"

namespace orthonet {

struct OptimizerSpec {
  enum class Kind { kSgd };
  Kind kind = Kind::kSgd;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 32;

  void validate() const;
};

// Mini-batch SGD with heavy-ball momentum:
//   v <- momentum * v + grad;  theta <- theta - lr * v;  v starts at zero.
class Sgd {
 public:
  explicit Sgd(OptimizerSpec spec);

  // grads must carry exactly the model's parameter names and shapes.
  void step(Model& model, const ParamMap& grads);

  const OptimizerSpec& spec() const { return spec_; }
  const ParamMap& velocity() const { return velocity_; }

 private:
  OptimizerSpec spec_;
  ParamMap velocity_;
};

// One update applied to a copy of `model`, starting from `velocity` (updated
// in place; pass an empty map for the first step).
Model sgd_step(const Model& model, const ParamMap& grads, const OptimizerSpec& spec, ParamMap& velocity);

}  // namespace orthonet
