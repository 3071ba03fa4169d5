#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "orthonet/graph.hpp"
#include "orthonet/tensor.hpp"

namespace orthonet {

enum class LayerKind { kDense, kConv2d, kRelu, kFlatten };

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::size_t in = 0;   // dense: input features; conv2d: input channels
  std::size_t out = 0;  // dense: output features; conv2d: output channels
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                          std::size_t padding = 0);
  static LayerSpec relu();
  static LayerSpec flatten();

  bool has_params() const { return kind == LayerKind::kDense || kind == LayerKind::kConv2d; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Per-example input shape (C, H, W) plus the layer stack.
struct Architecture {
  Shape input;
  std::vector<LayerSpec> layers;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// Canonical text form, e.g. "input 1x8x8; flatten; dense 64 128; relu; dense 128 4".
std::string describe(const Architecture& arch);
Architecture parse_architecture(const std::string& text);

// Per-example output shape after every layer; throws ShapeError naming the
// first pair of layers that do not chain.
std::vector<Shape> layer_shapes(const Architecture& arch);

// flatten -> dense(d, hidden) -> relu -> dense(hidden, K)
Architecture mlp_architecture(const Shape& input, std::size_t classes, std::size_t hidden = 128);
// conv 8ch 3x3 -> relu -> conv 16ch 3x3 -> relu -> flatten -> dense -> K (same padding)
Architecture cnn_architecture(const Shape& input, std::size_t classes);

using ParamMap = std::map<std::string, Tensor>;

std::string weight_name(std::size_t layer);
std::string bias_name(std::size_t layer);

// The trainable tensors an architecture implies, zero-filled.
ParamMap parameter_template(const Architecture& arch);

class Model {
 public:
  Model(Architecture arch, ParamMap params);

  const Architecture& arch() const { return arch_; }
  const ParamMap& params() const { return params_; }
  ParamMap& params() { return params_; }

  // 16 hex digits of a 64-bit FNV-1a hash of describe(arch()).
  std::string arch_id() const;
  std::size_t num_classes() const { return classes_; }
  std::size_t parameter_count() const;

 private:
  Architecture arch_;
  ParamMap params_;
  std::size_t classes_ = 0;
};

struct InitSpec {
  enum class Scheme { kXavierUniform };
  Scheme scheme = Scheme::kXavierUniform;
  std::uint64_t seed = 0;
};

double xavier_bound(std::size_t fan_in, std::size_t fan_out);

// Weights ~ U[-b, b] with b = sqrt(6 / (fan_in + fan_out)); biases zero.
Model build_model(const Architecture& arch, const InitSpec& init);

// Parameters bound as variables on a graph.
using ParamVars = std::map<std::string, Variable>;
ParamVars bind_params(Graph& graph, const Model& model, bool trainable);

// x: (N, C, H, W) on the same graph as params. Returns (N, K) logits.
Variable forward(const Model& model, const ParamVars& params, Variable x);

struct ForwardPass {
  std::unique_ptr<Graph> graph;
  Variable input;
  ParamVars params;
  Variable logits;
};

// Records a forward pass on a fresh graph; both the input and the
// parameters are differentiable leaves.
ForwardPass forward(const Model& model, const Tensor& batch);

// Mean softmax cross-entropy over the batch.
Variable loss(Variable logits, std::span<const int> labels);

// Logits without recording gradients, evaluated in chunks.
Tensor predict_logits(const Model& model, const Tensor& batch);
// Argmax per row; ties resolve to the lowest class index.
std::vector<int> argmax_rows(const Tensor& logits);
std::vector<int> predict(const Model& model, const Tensor& batch);
double accuracy(const Model& model, const Tensor& images, std::span<const int> labels);

// Rows i..i+count of an (N, ...) tensor.
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows);

}  // namespace orthonet
