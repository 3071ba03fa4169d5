#pragma once

#include <functional>

#include "orthonet/graph.hpp"
#include "orthonet/tensor.hpp"

namespace orthonet {

// A scalar function expressed as graph construction: given a graph and the
// leaf holding x, record the computation and return its scalar output.
using ScalarGraphFn = std::function<Variable(Graph&, Variable)>;

// Central-difference gradient of f at x with step h, one coordinate at a time.
Tensor central_difference(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

// Evaluates f on a fresh graph and returns its value.
double evaluate_scalar(const ScalarGraphFn& f, const Tensor& x);

// max_k |analytic_k - numeric_k| / max(1, |analytic_k|), with the analytic
// gradient taken by reverse mode and the numeric one by central differences.
double grad_check(const ScalarGraphFn& f, const Tensor& x, double h = 1e-5);

}  // namespace orthonet
