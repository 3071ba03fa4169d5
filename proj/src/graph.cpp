#include "orthonet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "orthonet/error.hpp"

namespace orthonet {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kConv2dInputGrad: return "conv2d_input_grad";
    case OpKind::kConv2dWeightGrad: return "conv2d_weight_grad";
    case OpKind::kBroadcastChannel: return "broadcast_channel";
    case OpKind::kSumChannel: return "sum_channel";
    case OpKind::kRelu: return "relu";
    case OpKind::kGreaterMask: return "greater_mask";
    case OpKind::kSum: return "sum";
    case OpKind::kExpand: return "expand";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kReciprocal: return "reciprocal";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kSumLast: return "sum_last";
    case OpKind::kExpandLast: return "expand_last";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kRowNorm: return "row_norm";
    case OpKind::kClampMin: return "clamp_min";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_fail(OpKind kind, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void rank_fail(OpKind kind, const Shape& a, const char* expected) {
  throw ShapeError(std::string(op_name(kind)) + ": expected " + expected + ", got shape " + shape_str(a));
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename F>
Tensor zip(OpKind kind, const Tensor& a, const Tensor& b, F f) {
  if (a.shape() != b.shape()) shape_fail(kind, a.shape(), b.shape());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

Tensor matmul_kernel(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail(OpKind::kMatMul, a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose_kernel(const Tensor& a) {
  if (a.rank() != 2) rank_fail(OpKind::kTranspose, a.shape(), "a matrix");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

struct ConvDims {
  std::size_t n, c, h, w, o, k, ho, wo, stride, pad;
};

ConvDims conv_dims(OpKind kind, const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
  if (x.size() != 4 || w.size() != 4 || x[1] != w[1] || w[2] != w[3] || stride == 0) shape_fail(kind, x, w);
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], 0, 0, stride, pad};
  if (d.h + 2 * pad < d.k || d.w + 2 * pad < d.k) shape_fail(kind, x, w);
  d.ho = (d.h + 2 * pad - d.k) / stride + 1;
  d.wo = (d.w + 2 * pad - d.k) / stride + 1;
  return d;
}

// Visits every (output position, kernel tap, input position) triple that
// lies inside the unpadded input.
template <typename F>
void conv_for_each(const ConvDims& d, F f) {
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t o = 0; o < d.o; ++o)
      for (std::size_t i = 0; i < d.ho; ++i)
        for (std::size_t j = 0; j < d.wo; ++j) {
          const std::size_t out_idx = ((n * d.o + o) * d.ho + i) * d.wo + j;
          for (std::size_t c = 0; c < d.c; ++c)
            for (std::size_t ki = 0; ki < d.k; ++ki) {
              const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * d.stride + ki) - static_cast<std::ptrdiff_t>(d.pad);
              if (y < 0 || y >= static_cast<std::ptrdiff_t>(d.h)) continue;
              for (std::size_t kj = 0; kj < d.k; ++kj) {
                const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(j * d.stride + kj) - static_cast<std::ptrdiff_t>(d.pad);
                if (x < 0 || x >= static_cast<std::ptrdiff_t>(d.w)) continue;
                const std::size_t in_idx = ((n * d.c + c) * d.h + static_cast<std::size_t>(y)) * d.w + static_cast<std::size_t>(x);
                const std::size_t w_idx = ((o * d.c + c) * d.k + ki) * d.k + kj;
                f(out_idx, in_idx, w_idx);
              }
            }
        }
}

Tensor conv2d_kernel(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const ConvDims d = conv_dims(OpKind::kConv2d, x.shape(), w.shape(), stride, pad);
  Tensor out({d.n, d.o, d.ho, d.wo});
  conv_for_each(d, [&](std::size_t oi, std::size_t ii, std::size_t wi) { out[oi] += x[ii] * w[wi]; });
  return out;
}

Tensor conv2d_input_grad_kernel(const Tensor& gy, const Tensor& w, const Shape& xs, std::size_t stride,
                                std::size_t pad) {
  const ConvDims d = conv_dims(OpKind::kConv2dInputGrad, xs, w.shape(), stride, pad);
  if (gy.shape() != Shape{d.n, d.o, d.ho, d.wo}) shape_fail(OpKind::kConv2dInputGrad, gy.shape(), w.shape());
  Tensor out(xs);
  conv_for_each(d, [&](std::size_t oi, std::size_t ii, std::size_t wi) { out[ii] += gy[oi] * w[wi]; });
  return out;
}

Tensor conv2d_weight_grad_kernel(const Tensor& x, const Tensor& gy, const Shape& ws, std::size_t stride,
                                 std::size_t pad) {
  const ConvDims d = conv_dims(OpKind::kConv2dWeightGrad, x.shape(), ws, stride, pad);
  if (gy.shape() != Shape{d.n, d.o, d.ho, d.wo}) shape_fail(OpKind::kConv2dWeightGrad, x.shape(), gy.shape());
  Tensor out(ws);
  conv_for_each(d, [&](std::size_t oi, std::size_t ii, std::size_t wi) { out[wi] += gy[oi] * x[ii]; });
  return out;
}

// Splits a rank>=2 shape into (outer, channels, inner) around axis 1.
struct ChannelSplit {
  std::size_t outer, channels, inner;
};

ChannelSplit channel_split(OpKind kind, const Shape& s) {
  if (s.size() < 2) rank_fail(kind, s, "rank >= 2");
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}

Tensor broadcast_channel_kernel(const Tensor& b, const Shape& shape) {
  const ChannelSplit cs = channel_split(OpKind::kBroadcastChannel, shape);
  if (b.rank() != 1 || b.dim(0) != cs.channels) shape_fail(OpKind::kBroadcastChannel, b.shape(), shape);
  Tensor out(shape);
  std::size_t idx = 0;
  for (std::size_t n = 0; n < cs.outer; ++n)
    for (std::size_t c = 0; c < cs.channels; ++c)
      for (std::size_t i = 0; i < cs.inner; ++i) out[idx++] = b[c];
  return out;
}

Tensor sum_channel_kernel(const Tensor& x) {
  const ChannelSplit cs = channel_split(OpKind::kSumChannel, x.shape());
  Tensor out({cs.channels});
  std::size_t idx = 0;
  for (std::size_t n = 0; n < cs.outer; ++n)
    for (std::size_t c = 0; c < cs.channels; ++c)
      for (std::size_t i = 0; i < cs.inner; ++i) out[c] += x[idx++];
  return out;
}

void require_matrix(OpKind kind, const Tensor& x) {
  if (x.rank() != 2) rank_fail(kind, x.shape(), "an (N, K) matrix");
}

Tensor softmax_kernel(const Tensor& x) {
  require_matrix(OpKind::kSoftmax, x);
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    double mx = x[r * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[r * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (out[r * k + j] = std::exp(x[r * k + j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] /= z;
  }
  return out;
}

Tensor sum_last_kernel(const Tensor& x) {
  require_matrix(OpKind::kSumLast, x);
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) out[r] += x[r * k + j];
  return out;
}

Tensor expand_last_kernel(const Tensor& v, std::size_t k) {
  if (v.rank() != 1) rank_fail(OpKind::kExpandLast, v.shape(), "a vector");
  const std::size_t n = v.dim(0);
  Tensor out({n, k});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = v[r];
  return out;
}

Tensor sce_kernel(const Tensor& x, const std::vector<int>& labels) {
  require_matrix(OpKind::kSoftmaxCrossEntropy, x);
  const std::size_t n = x.dim(0), k = x.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(x.shape()));
  }
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r) {
    double mx = x[r * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[r * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(x[r * k + j] - mx);
    out[r] = std::log(z) + mx - x[r * k + static_cast<std::size_t>(labels[r])];
  }
  return out;
}

Tensor one_hot(const std::vector<int>& labels, std::size_t k) {
  Tensor out({labels.size(), k});
  for (std::size_t r = 0; r < labels.size(); ++r) out[r * k + static_cast<std::size_t>(labels[r])] = 1.0;
  return out;
}

Tensor row_norm_kernel(const Tensor& x) {
  require_matrix(OpKind::kRowNorm, x);
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x[r * d + j] * x[r * d + j];
    out[r] = std::sqrt(s);
  }
  return out;
}

}  // namespace

const Tensor& Variable::value() const { return graph_->node(index_).value; }
bool Variable::requires_grad() const { return graph_->node(index_).requires_grad; }

Variable Graph::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{OpKind::kLeaf, {}, {}, std::move(value), requires_grad});
  return {this, nodes_.size() - 1};
}

Variable Graph::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::kConstant, {}, {}, std::move(value), false});
  return {this, nodes_.size() - 1};
}

Variable Graph::record(OpKind kind, std::vector<std::size_t> parents, NodeAttrs attrs) {
  for (std::size_t p : parents) {
    if (p >= nodes_.size()) throw Error(std::string(op_name(kind)) + ": operand is not on this graph");
  }
  Tensor value = evaluate(kind, parents, attrs);
  bool requires_grad = false;
  if (kind != OpKind::kGreaterMask) {
    for (std::size_t p : parents) requires_grad = requires_grad || nodes_[p].requires_grad;
  }
  nodes_.push_back(Node{kind, std::move(parents), std::move(attrs), std::move(value), requires_grad});
  return {this, nodes_.size() - 1};
}

void Graph::truncate(std::size_t size) {
  if (size < nodes_.size()) nodes_.resize(size);
}

void Graph::set_leaf(Variable leaf, Tensor value) {
  Node& n = nodes_.at(leaf.index());
  if (n.kind != OpKind::kLeaf) throw Error("set_leaf: node is not a leaf");
  if (n.value.shape() != value.shape()) shape_fail(OpKind::kLeaf, n.value.shape(), value.shape());
  n.value = std::move(value);
  replay();
}

void Graph::replay() {
  for (Node& n : nodes_) {
    if (n.kind == OpKind::kLeaf || n.kind == OpKind::kConstant) continue;
    n.value = evaluate(n.kind, n.parents, n.attrs);
  }
}

Tensor Graph::evaluate(OpKind kind, const std::vector<std::size_t>& parents, const NodeAttrs& attrs) const {
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[parents[i]].value; };
  switch (kind) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      throw Error("evaluate: leaves carry their own value");
    case OpKind::kAdd: return zip(kind, in(0), in(1), [](double a, double b) { return a + b; });
    case OpKind::kSub: return zip(kind, in(0), in(1), [](double a, double b) { return a - b; });
    case OpKind::kMul: return zip(kind, in(0), in(1), [](double a, double b) { return a * b; });
    case OpKind::kScale: return map(in(0), [s = attrs.scalar](double a) { return a * s; });
    case OpKind::kAddScalar: return map(in(0), [s = attrs.scalar](double a) { return a + s; });
    case OpKind::kMatMul: return matmul_kernel(in(0), in(1));
    case OpKind::kTranspose: return transpose_kernel(in(0));
    case OpKind::kReshape: return in(0).reshaped(attrs.shape);
    case OpKind::kConv2d: return conv2d_kernel(in(0), in(1), attrs.stride, attrs.padding);
    case OpKind::kConv2dInputGrad:
      return conv2d_input_grad_kernel(in(0), in(1), attrs.shape, attrs.stride, attrs.padding);
    case OpKind::kConv2dWeightGrad:
      return conv2d_weight_grad_kernel(in(0), in(1), attrs.shape, attrs.stride, attrs.padding);
    case OpKind::kBroadcastChannel: return broadcast_channel_kernel(in(0), attrs.shape);
    case OpKind::kSumChannel: return sum_channel_kernel(in(0));
    case OpKind::kRelu: return map(in(0), [](double a) { return a > 0.0 ? a : 0.0; });
    case OpKind::kGreaterMask: return map(in(0), [t = attrs.scalar](double a) { return a > t ? 1.0 : 0.0; });
    case OpKind::kSum: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      return Tensor::scalar(s);
    }
    case OpKind::kExpand:
      if (in(0).size() != 1) rank_fail(kind, in(0).shape(), "a scalar");
      return Tensor(attrs.shape, in(0)[0]);
    case OpKind::kLog:
      for (double v : in(0).data()) {
        if (!(v > 0.0)) throw ValueError("log: input must be positive, got " + std::to_string(v));
      }
      return map(in(0), [](double a) { return std::log(a); });
    case OpKind::kExp: return map(in(0), [](double a) { return std::exp(a); });
    case OpKind::kReciprocal: return map(in(0), [](double a) { return a == 0.0 ? 0.0 : 1.0 / a; });
    case OpKind::kSoftmax: return softmax_kernel(in(0));
    case OpKind::kSumLast: return sum_last_kernel(in(0));
    case OpKind::kExpandLast: return expand_last_kernel(in(0), attrs.shape.at(1));
    case OpKind::kSoftmaxCrossEntropy: return sce_kernel(in(0), attrs.labels);
    case OpKind::kRowNorm: return row_norm_kernel(in(0));
    case OpKind::kClampMin: return map(in(0), [f = attrs.scalar](double a) { return a > f ? a : f; });
  }
  throw Error("evaluate: unknown op");
}

// --- forward op wrappers ------------------------------------------------------

namespace {

Graph& same_graph(OpKind kind, Variable a, Variable b) {
  if (&a.graph() != &b.graph()) throw Error(std::string(op_name(kind)) + ": operands live on different graphs");
  return a.graph();
}

Variable binary(OpKind kind, Variable a, Variable b, NodeAttrs attrs = {}) {
  return same_graph(kind, a, b).record(kind, {a.index(), b.index()}, std::move(attrs));
}

Variable unary(OpKind kind, Variable a, NodeAttrs attrs = {}) {
  return a.graph().record(kind, {a.index()}, std::move(attrs));
}

NodeAttrs scalar_attr(double s) {
  NodeAttrs attrs;
  attrs.scalar = s;
  return attrs;
}

NodeAttrs shape_attr(Shape shape) {
  NodeAttrs attrs;
  attrs.shape = std::move(shape);
  return attrs;
}

NodeAttrs conv_attr(Shape shape, std::size_t stride, std::size_t padding) {
  NodeAttrs attrs;
  attrs.shape = std::move(shape);
  attrs.stride = stride;
  attrs.padding = padding;
  return attrs;
}

}  // namespace

Variable add(Variable a, Variable b) { return binary(OpKind::kAdd, a, b); }
Variable sub(Variable a, Variable b) { return binary(OpKind::kSub, a, b); }
Variable mul(Variable a, Variable b) { return binary(OpKind::kMul, a, b); }
Variable scale(Variable a, double factor) { return unary(OpKind::kScale, a, scalar_attr(factor)); }
Variable add_scalar(Variable a, double offset) { return unary(OpKind::kAddScalar, a, scalar_attr(offset)); }
Variable neg(Variable a) { return scale(a, -1.0); }
Variable matmul(Variable a, Variable b) { return binary(OpKind::kMatMul, a, b); }
Variable transpose(Variable a) { return unary(OpKind::kTranspose, a); }
Variable reshape(Variable a, Shape shape) { return unary(OpKind::kReshape, a, shape_attr(std::move(shape))); }

Variable conv2d(Variable x, Variable w, std::size_t stride, std::size_t padding) {
  return binary(OpKind::kConv2d, x, w, conv_attr({}, stride, padding));
}

Variable conv2d_input_grad(Variable grad_out, Variable w, const Shape& input_shape, std::size_t stride,
                           std::size_t padding) {
  return binary(OpKind::kConv2dInputGrad, grad_out, w, conv_attr(input_shape, stride, padding));
}

Variable conv2d_weight_grad(Variable x, Variable grad_out, const Shape& weight_shape, std::size_t stride,
                            std::size_t padding) {
  return binary(OpKind::kConv2dWeightGrad, x, grad_out, conv_attr(weight_shape, stride, padding));
}

Variable broadcast_channel(Variable b, const Shape& shape) {
  return unary(OpKind::kBroadcastChannel, b, shape_attr(shape));
}
Variable sum_channel(Variable x) { return unary(OpKind::kSumChannel, x); }
Variable relu(Variable x) { return unary(OpKind::kRelu, x); }
Variable greater_mask(Variable x, double threshold) {
  return unary(OpKind::kGreaterMask, x, scalar_attr(threshold));
}
Variable sum(Variable x) { return unary(OpKind::kSum, x); }
Variable mean(Variable x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}
Variable expand(Variable s, const Shape& shape) { return unary(OpKind::kExpand, s, shape_attr(shape)); }
Variable log(Variable x) { return unary(OpKind::kLog, x); }
Variable exp(Variable x) { return unary(OpKind::kExp, x); }
Variable reciprocal(Variable x) { return unary(OpKind::kReciprocal, x); }
Variable softmax(Variable x) { return unary(OpKind::kSoftmax, x); }
Variable sum_last(Variable x) { return unary(OpKind::kSumLast, x); }
Variable expand_last(Variable v, std::size_t k) {
  const std::size_t n = v.value().rank() == 1 ? v.value().dim(0) : 0;
  return unary(OpKind::kExpandLast, v, shape_attr({n, k}));
}

Variable softmax_cross_entropy(Variable logits, std::span<const int> labels) {
  const Tensor& x = logits.value();
  if (x.rank() != 2) rank_fail(OpKind::kSoftmaxCrossEntropy, x.shape(), "an (N, K) matrix");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= x.dim(1)) {
      throw ValueError("softmax_cross_entropy: label " + std::to_string(l) + " outside [0, " +
                       std::to_string(x.dim(1)) + ")");
    }
  }
  NodeAttrs attrs;
  attrs.labels.assign(labels.begin(), labels.end());
  return unary(OpKind::kSoftmaxCrossEntropy, logits, std::move(attrs));
}

Variable row_norm(Variable x) { return unary(OpKind::kRowNorm, x); }
Variable clamp_min(Variable x, double floor) { return unary(OpKind::kClampMin, x, scalar_attr(floor)); }

Variable dot(Variable a, Variable b) {
  if (a.shape() != b.shape()) shape_fail(OpKind::kMul, a.shape(), b.shape());
  return sum(mul(a, b));
}

Variable l2_norm(Variable x) {
  Variable row = reshape(x, {1, x.value().size()});
  return reshape(row_norm(row), {});
}

Variable normalize_rows(Variable x, double floor) {
  if (x.value().rank() != 2) rank_fail(OpKind::kRowNorm, x.shape(), "an (N, D) matrix");
  Variable denom = clamp_min(row_norm(x), floor);
  return mul(x, expand_last(reciprocal(denom), x.value().dim(1)));
}

// --- reverse mode -------------------------------------------------------------

namespace {

// Appends the vector-Jacobian products of node `index` given its upstream
// gradient `g`. `emit(parent_slot, grad)` receives one contribution per
// differentiable parent.
template <typename Emit>
void vjp(Graph& graph, std::size_t index, Variable g, Emit emit) {
  const Node& node = graph.node(index);
  const OpKind kind = node.kind;
  const NodeAttrs attrs = node.attrs;
  const std::vector<std::size_t> parents = node.parents;
  auto parent = [&](std::size_t i) { return Variable(&graph, parents[i]); };
  const Variable self(&graph, index);

  switch (kind) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
    case OpKind::kGreaterMask:
      return;
    case OpKind::kAdd:
      emit(0, [&] { return g; });
      emit(1, [&] { return g; });
      return;
    case OpKind::kSub:
      emit(0, [&] { return g; });
      emit(1, [&] { return neg(g); });
      return;
    case OpKind::kMul:
      emit(0, [&] { return mul(g, parent(1)); });
      emit(1, [&] { return mul(g, parent(0)); });
      return;
    case OpKind::kScale:
      emit(0, [&] { return scale(g, attrs.scalar); });
      return;
    case OpKind::kAddScalar:
      emit(0, [&] { return g; });
      return;
    case OpKind::kMatMul:
      emit(0, [&] { return matmul(g, transpose(parent(1))); });
      emit(1, [&] { return matmul(transpose(parent(0)), g); });
      return;
    case OpKind::kTranspose:
      emit(0, [&] { return transpose(g); });
      return;
    case OpKind::kReshape:
      emit(0, [&] { return reshape(g, parent(0).shape()); });
      return;
    case OpKind::kConv2d: {
      const Shape xs = parent(0).shape(), ws = parent(1).shape();
      emit(0, [&] { return conv2d_input_grad(g, parent(1), xs, attrs.stride, attrs.padding); });
      emit(1, [&] { return conv2d_weight_grad(parent(0), g, ws, attrs.stride, attrs.padding); });
      return;
    }
    case OpKind::kConv2dInputGrad: {
      // out = A^T(gy; w); <out, G> = <gy, conv2d(G, w)>.
      const Shape ws = parent(1).shape();
      emit(0, [&] { return conv2d(g, parent(1), attrs.stride, attrs.padding); });
      emit(1, [&] { return conv2d_weight_grad(g, parent(0), ws, attrs.stride, attrs.padding); });
      return;
    }
    case OpKind::kConv2dWeightGrad: {
      // out = W^T(x; gy); <out, G> = <conv2d(x, G), gy>.
      const Shape xs = parent(0).shape();
      emit(0, [&] { return conv2d_input_grad(parent(1), g, xs, attrs.stride, attrs.padding); });
      emit(1, [&] { return conv2d(parent(0), g, attrs.stride, attrs.padding); });
      return;
    }
    case OpKind::kBroadcastChannel:
      emit(0, [&] { return sum_channel(g); });
      return;
    case OpKind::kSumChannel: {
      const Shape xs = parent(0).shape();
      emit(0, [&] { return broadcast_channel(g, xs); });
      return;
    }
    case OpKind::kRelu:
      emit(0, [&] { return mul(g, greater_mask(parent(0), 0.0)); });
      return;
    case OpKind::kSum: {
      const Shape xs = parent(0).shape();
      emit(0, [&] { return expand(g, xs); });
      return;
    }
    case OpKind::kExpand:
      emit(0, [&] { return reshape(sum(g), parent(0).shape()); });
      return;
    case OpKind::kLog:
      emit(0, [&] { return mul(g, reciprocal(parent(0))); });
      return;
    case OpKind::kExp:
      emit(0, [&] { return mul(g, self); });
      return;
    case OpKind::kReciprocal:
      emit(0, [&] { return neg(mul(g, mul(self, self))); });
      return;
    case OpKind::kSoftmax: {
      const std::size_t k = self.value().dim(1);
      emit(0, [&] { return mul(self, sub(g, expand_last(sum_last(mul(g, self)), k))); });
      return;
    }
    case OpKind::kSumLast: {
      const std::size_t k = parent(0).value().dim(1);
      emit(0, [&] { return expand_last(g, k); });
      return;
    }
    case OpKind::kExpandLast:
      emit(0, [&] { return sum_last(g); });
      return;
    case OpKind::kSoftmaxCrossEntropy: {
      const std::size_t k = parent(0).value().dim(1);
      emit(0, [&] {
        Variable target = graph.constant(one_hot(attrs.labels, k));
        return mul(sub(softmax(parent(0)), target), expand_last(g, k));
      });
      return;
    }
    case OpKind::kRowNorm: {
      const std::size_t d = parent(0).value().dim(1);
      emit(0, [&] { return mul(parent(0), expand_last(mul(g, reciprocal(self)), d)); });
      return;
    }
    case OpKind::kClampMin:
      emit(0, [&] { return mul(g, greater_mask(parent(0), attrs.scalar)); });
      return;
  }
}

bool differentiable(OpKind kind) {
  return kind != OpKind::kLeaf && kind != OpKind::kConstant && kind != OpKind::kGreaterMask;
}

std::vector<std::optional<Variable>> run_backward(Variable y, std::span<const Variable> wrt) {
  Graph& graph = y.graph();
  if (y.value().size() != 1) {
    throw ShapeError("backward: output must be scalar, got shape " + shape_str(y.shape()));
  }
  const std::size_t top = y.index();
  std::vector<char> is_target(top + 1, 0);
  for (const Variable& v : wrt) {
    if (!v.valid() || &v.graph() != &graph || v.index() >= graph.size()) {
      throw Error("backward: requested variable is not on the output's graph");
    }
    if (v.index() <= top) is_target[v.index()] = 1;
  }

  // reach[i]: node i is a target or depends on one.
  std::vector<char> reach(top + 1, 0);
  for (std::size_t i = 0; i <= top; ++i) {
    if (is_target[i]) {
      reach[i] = 1;
      continue;
    }
    const Node& n = graph.node(i);
    if (!differentiable(n.kind)) continue;
    for (std::size_t p : n.parents) {
      if (reach[p]) {
        reach[i] = 1;
        break;
      }
    }
  }

  std::vector<std::optional<Variable>> grads(top + 1);
  if (reach[top]) grads[top] = graph.constant(Tensor(y.shape(), 1.0));
  for (std::size_t i = top + 1; i-- > 0;) {
    if (!grads[i] || !reach[i]) continue;
    const Node& n = graph.node(i);
    if (!differentiable(n.kind)) continue;
    const std::vector<std::size_t> parents = n.parents;
    vjp(graph, i, *grads[i], [&](std::size_t slot, auto make) {
      const std::size_t p = parents[slot];
      if (!reach[p]) return;
      Variable contribution = make();
      grads[p] = grads[p] ? add(*grads[p], contribution) : contribution;
    });
  }

  std::vector<std::optional<Variable>> out;
  out.reserve(wrt.size());
  for (const Variable& v : wrt) out.push_back(v.index() <= top ? grads[v.index()] : std::nullopt);
  return out;
}

}  // namespace

std::vector<Tensor> backward(Variable y, std::span<const Variable> wrt) {
  Graph& graph = y.graph();
  const std::size_t mark = graph.size();
  std::vector<Tensor> result;
  try {
    auto grads = run_backward(y, wrt);
    result.reserve(wrt.size());
    for (std::size_t i = 0; i < wrt.size(); ++i) {
      result.push_back(grads[i] ? grads[i]->value() : Tensor(wrt[i].shape()));
    }
  } catch (...) {
    graph.truncate(mark);
    throw;
  }
  graph.truncate(mark);
  return result;
}

std::vector<Variable> backward_create_graph(Variable y, std::span<const Variable> wrt) {
  auto grads = run_backward(y, wrt);
  std::vector<Variable> result;
  result.reserve(wrt.size());
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    result.push_back(grads[i] ? *grads[i] : y.graph().constant(Tensor(wrt[i].shape())));
  }
  return result;
}

}  // namespace orthonet
