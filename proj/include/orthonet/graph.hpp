#pragma once

#include <cstddef>
#include <deque>
#include <span>
#include <vector>

#include "orthonet/tensor.hpp"

namespace orthonet {

enum class OpKind {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kMatMul,
  kTranspose,
  kReshape,
  kConv2d,
  kConv2dInputGrad,
  kConv2dWeightGrad,
  kBroadcastChannel,
  kSumChannel,
  kRelu,
  kGreaterMask,
  kSum,
  kExpand,
  kLog,
  kExp,
  kReciprocal,
  kSoftmax,
  kSumLast,
  kExpandLast,
  kSoftmaxCrossEntropy,
  kRowNorm,
  kClampMin,
};

const char* op_name(OpKind kind);

struct NodeAttrs {
  double scalar = 0.0;
  Shape shape;               // target shape for expand/reshape/conv-grad ops
  std::vector<int> labels;   // softmax_cross_entropy
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct Node {
  OpKind kind = OpKind::kLeaf;
  std::vector<std::size_t> parents;
  NodeAttrs attrs;
  Tensor value;
  bool requires_grad = false;
};

class Graph;

// Handle to one node of a Graph. Cheap to copy; valid while its Graph lives
// and has not been rolled back past it.
class Variable {
 public:
  Variable() = default;
  Variable(Graph* graph, std::size_t index) : graph_(graph), index_(index) {}

  Graph& graph() const { return *graph_; }
  std::size_t index() const { return index_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t index_ = 0;
};

// Append-only trace of a computation. Parent indices always precede their
// child, so the node order is a topological order. Not thread-safe: use one
// Graph per worker.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Variable leaf(Tensor value, bool requires_grad = true);
  Variable constant(Tensor value);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t index) const { return nodes_.at(index); }

  // Replace a leaf's value (same shape) and recompute every derived node.
  void set_leaf(Variable leaf, Tensor value);
  // Recompute every non-leaf node from its parents in recording order.
  void replay();

  // Low-level: evaluate an op on existing nodes and append it.
  Variable record(OpKind kind, std::vector<std::size_t> parents, NodeAttrs attrs = {});

  // Drop every node with index >= size. Used to discard the scratch nodes a
  // first-order backward pass appends.
  void truncate(std::size_t size);

 private:
  Tensor evaluate(OpKind kind, const std::vector<std::size_t>& parents, const NodeAttrs& attrs) const;

  std::deque<Node> nodes_;
};

// --- forward operations -----------------------------------------------------
// Every op appends a node to the operands' graph. Operands must share a graph.

Variable add(Variable a, Variable b);
Variable sub(Variable a, Variable b);
Variable mul(Variable a, Variable b);
Variable scale(Variable a, double factor);
Variable add_scalar(Variable a, double offset);
Variable neg(Variable a);
Variable matmul(Variable a, Variable b);
Variable transpose(Variable a);
Variable reshape(Variable a, Shape shape);

// x: (N, C, H, W), w: (O, C, k, k) -> (N, O, H', W').
Variable conv2d(Variable x, Variable w, std::size_t stride, std::size_t padding);
// Adjoint of conv2d in its input: returns a tensor shaped like x.
Variable conv2d_input_grad(Variable grad_out, Variable w, const Shape& input_shape, std::size_t stride,
                           std::size_t padding);
// Adjoint of conv2d in its weight: returns a tensor shaped like w.
Variable conv2d_weight_grad(Variable x, Variable grad_out, const Shape& weight_shape, std::size_t stride,
                            std::size_t padding);

// b: (C) broadcast along axis 1 of `shape` (rank >= 2).
Variable broadcast_channel(Variable b, const Shape& shape);
// Sum over every axis except axis 1: (N, C, ...) -> (C).
Variable sum_channel(Variable x);

Variable relu(Variable x);
// 1 where x > threshold, else 0. Not differentiable (a constant w.r.t. x).
Variable greater_mask(Variable x, double threshold);
Variable sum(Variable x);
Variable mean(Variable x);
// Scalar -> every element of `shape`.
Variable expand(Variable s, const Shape& shape);
Variable log(Variable x);
Variable exp(Variable x);
// 1/x, with 1/0 defined as 0.
Variable reciprocal(Variable x);
// Row-wise softmax of (N, K).
Variable softmax(Variable x);
// (N, K) -> (N)
Variable sum_last(Variable x);
// (N) -> (N, K)
Variable expand_last(Variable v, std::size_t k);
// Per-row cross-entropy of softmax(logits) against integer labels: (N, K) -> (N).
Variable softmax_cross_entropy(Variable logits, std::span<const int> labels);
// Per-row Euclidean norm: (N, D) -> (N).
Variable row_norm(Variable x);
Variable clamp_min(Variable x, double floor);

Variable dot(Variable a, Variable b);
// Euclidean norm of the whole tensor, as a scalar.
Variable l2_norm(Variable x);
// Rows of (N, D) divided by max(||row||_2, floor).
Variable normalize_rows(Variable x, double floor);

inline Variable operator+(Variable a, Variable b) { return add(a, b); }
inline Variable operator-(Variable a, Variable b) { return sub(a, b); }
inline Variable operator*(Variable a, Variable b) { return mul(a, b); }
inline Variable operator*(double s, Variable a) { return scale(a, s); }
inline Variable operator*(Variable a, double s) { return scale(a, s); }
inline Variable operator+(Variable a, double s) { return add_scalar(a, s); }

// --- reverse mode -------------------------------------------------------------

// dy/dwrt for scalar y. Variables y does not depend on get zero gradients.
// The graph is left exactly as it was.
std::vector<Tensor> backward(Variable y, std::span<const Variable> wrt);

// Same, but the gradients are recorded on y's graph as differentiable
// Variables, so a function of them can be differentiated again.
std::vector<Variable> backward_create_graph(Variable y, std::span<const Variable> wrt);

}  // namespace orthonet
