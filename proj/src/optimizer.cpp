#include "orthonet/optimizer.hpp"

#include <cmath>

#include "orthonet/error.hpp"

namespace orthonet {

namespace {

void apply_update(ParamMap& params, const ParamMap& grads, const OptimizerSpec& spec, ParamMap& velocity) {
  if (grads.size() != params.size()) {
    throw ValueError("sgd: " + std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) +
                     " parameters");
  }
  for (const auto& [name, theta] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ValueError("sgd: missing gradient for parameter " + name);
    if (it->second.shape() != theta.shape()) {
      throw ShapeError("sgd: gradient " + name + " has shape " + shape_str(it->second.shape()) +
                       ", parameter has " + shape_str(theta.shape()));
    }
  }
  for (auto& [name, theta] : params) {
    const Tensor& g = grads.at(name);
    Tensor& v = velocity.try_emplace(name, g.shape()).first->second;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = spec.momentum * v[i] + g[i];
      theta[i] -= spec.learning_rate * v[i];
    }
  }
}

}  // namespace

void OptimizerSpec::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ValueError("optimizer: learning rate must be positive, got " + std::to_string(learning_rate));
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ValueError("optimizer: momentum must lie in [0, 1), got " + std::to_string(momentum));
  }
  if (batch_size == 0) throw ValueError("optimizer: batch size must be positive");
}

Sgd::Sgd(OptimizerSpec spec) : spec_(spec) { spec_.validate(); }

void Sgd::step(Model& model, const ParamMap& grads) { apply_update(model.params(), grads, spec_, velocity_); }

Model sgd_step(const Model& model, const ParamMap& grads, const OptimizerSpec& spec, ParamMap& velocity) {
  spec.validate();
  Model next = model;
  apply_update(next.params(), grads, spec, velocity);
  return next;
}

}  // namespace orthonet
