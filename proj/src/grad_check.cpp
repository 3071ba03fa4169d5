#include "orthonet/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace orthonet {

Tensor central_difference(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t k = 0; k < x.size(); ++k) {
    probe[k] = x[k] + h;
    const double up = f(probe);
    probe[k] = x[k] - h;
    const double down = f(probe);
    probe[k] = x[k];
    grad[k] = (up - down) / (2.0 * h);
  }
  return grad;
}

double evaluate_scalar(const ScalarGraphFn& f, const Tensor& x) {
  Graph graph;
  return f(graph, graph.leaf(x)).value().item();
}

double grad_check(const ScalarGraphFn& f, const Tensor& x, double h) {
  Graph graph;
  Variable leaf = graph.leaf(x);
  Variable y = f(graph, leaf);
  const Tensor analytic = backward(y, std::vector<Variable>{leaf}).front();
  const Tensor numeric = central_difference([&](const Tensor& p) { return evaluate_scalar(f, p); }, x, h);
  double worst = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    worst = std::max(worst, std::abs(analytic[k] - numeric[k]) / std::max(1.0, std::abs(analytic[k])));
  }
  return worst;
}

}  // namespace orthonet
