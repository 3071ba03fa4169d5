#include "orthonet/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "orthonet/error.hpp"

namespace orthonet {

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) { return {LayerKind::kDense, in, out, 0, 1, 0}; }

LayerSpec LayerSpec::conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  return {LayerKind::kConv2d, in, out, kernel, stride, padding};
}

LayerSpec LayerSpec::relu() { return {LayerKind::kRelu, 0, 0, 0, 1, 0}; }
LayerSpec LayerSpec::flatten() { return {LayerKind::kFlatten, 0, 0, 0, 1, 0}; }

namespace {

std::string layer_text(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::kDense: return "dense " + std::to_string(l.in) + " " + std::to_string(l.out);
    case LayerKind::kConv2d:
      return "conv2d " + std::to_string(l.in) + " " + std::to_string(l.out) + " " + std::to_string(l.kernel) + " " +
             std::to_string(l.stride) + " " + std::to_string(l.padding);
    case LayerKind::kRelu: return "relu";
    case LayerKind::kFlatten: return "flatten";
  }
  return "?";
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::size_t parse_extent(const std::string& tok, const std::string& context) {
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos || tok.size() > 9) {
    throw ValueError("architecture: bad extent '" + tok + "' in '" + context + "'");
  }
  return static_cast<std::size_t>(std::stoul(tok));
}

}  // namespace

std::string describe(const Architecture& arch) {
  std::string out = "input ";
  for (std::size_t i = 0; i < arch.input.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(arch.input[i]);
  }
  for (const LayerSpec& l : arch.layers) out += "; " + layer_text(l);
  return out;
}

Architecture parse_architecture(const std::string& text) {
  Architecture arch;
  std::stringstream ss(text);
  std::string part;
  bool first = true;
  while (std::getline(ss, part, ';')) {
    part = trim(part);
    std::istringstream ps(part);
    std::string kind;
    ps >> kind;
    std::vector<std::string> toks;
    for (std::string t; ps >> t;) toks.push_back(t);
    if (first) {
      if (kind != "input" || toks.size() != 1) throw ValueError("architecture: must start with 'input CxHxW'");
      std::stringstream dims(toks[0]);
      for (std::string d; std::getline(dims, d, 'x');) arch.input.push_back(parse_extent(d, part));
      first = false;
      continue;
    }
    auto expect = [&](std::size_t n) {
      if (toks.size() != n) throw ValueError("architecture: '" + part + "' expects " + std::to_string(n) + " fields");
    };
    if (kind == "dense") {
      expect(2);
      arch.layers.push_back(LayerSpec::dense(parse_extent(toks[0], part), parse_extent(toks[1], part)));
    } else if (kind == "conv2d") {
      expect(5);
      arch.layers.push_back(LayerSpec::conv2d(parse_extent(toks[0], part), parse_extent(toks[1], part),
                                              parse_extent(toks[2], part), parse_extent(toks[3], part),
                                              parse_extent(toks[4], part)));
    } else if (kind == "relu") {
      expect(0);
      arch.layers.push_back(LayerSpec::relu());
    } else if (kind == "flatten") {
      expect(0);
      arch.layers.push_back(LayerSpec::flatten());
    } else {
      throw ValueError("architecture: unknown layer '" + kind + "'");
    }
  }
  if (first) throw ValueError("architecture: empty descriptor");
  return arch;
}

std::vector<Shape> layer_shapes(const Architecture& arch) {
  if (arch.input.size() != 3 || shape_size(arch.input) == 0) {
    throw ShapeError("architecture: input must be a positive (C, H, W), got " + shape_str(arch.input));
  }
  std::vector<Shape> shapes;
  Shape cur = arch.input;
  std::string prev = "input " + shape_str(cur);
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const std::string here = "layer " + std::to_string(i) + " (" + layer_text(l) + ")";
    auto broken = [&](const std::string& why) {
      throw ShapeError("architecture: " + prev + " does not chain into " + here + ": " + why);
    };
    switch (l.kind) {
      case LayerKind::kDense:
        if (l.in == 0 || l.out == 0) broken("extents must be positive");
        if (cur.size() != 1 || cur[0] != l.in) broken("needs a flat input of " + std::to_string(l.in) + " features, got " + shape_str(cur));
        cur = {l.out};
        break;
      case LayerKind::kConv2d: {
        if (l.in == 0 || l.out == 0 || l.kernel == 0 || l.stride == 0) broken("extents must be positive");
        if (cur.size() != 3 || cur[0] != l.in) broken("needs " + std::to_string(l.in) + " input channels, got " + shape_str(cur));
        if (cur[1] + 2 * l.padding < l.kernel || cur[2] + 2 * l.padding < l.kernel) broken("kernel larger than padded input");
        cur = {l.out, (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1, (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::kRelu:
        break;
      case LayerKind::kFlatten:
        cur = {shape_size(cur)};
        break;
    }
    shapes.push_back(cur);
    prev = here;
  }
  return shapes;
}

Architecture mlp_architecture(const Shape& input, std::size_t classes, std::size_t hidden) {
  const std::size_t d = shape_size(input);
  return {input, {LayerSpec::flatten(), LayerSpec::dense(d, hidden), LayerSpec::relu(), LayerSpec::dense(hidden, classes)}};
}

Architecture cnn_architecture(const Shape& input, std::size_t classes) {
  if (input.size() != 3) throw ShapeError("cnn_architecture: input must be (C, H, W)");
  const std::size_t flat = 16 * input[1] * input[2];
  return {input,
          {LayerSpec::conv2d(input[0], 8, 3, 1, 1), LayerSpec::relu(), LayerSpec::conv2d(8, 16, 3, 1, 1),
           LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::dense(flat, classes)}};
}

std::string weight_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".weight"; }
std::string bias_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".bias"; }

ParamMap parameter_template(const Architecture& arch) {
  layer_shapes(arch);
  ParamMap params;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    if (l.kind == LayerKind::kDense) {
      params.emplace(weight_name(i), Tensor({l.in, l.out}));
      params.emplace(bias_name(i), Tensor({l.out}));
    } else if (l.kind == LayerKind::kConv2d) {
      params.emplace(weight_name(i), Tensor({l.out, l.in, l.kernel, l.kernel}));
      params.emplace(bias_name(i), Tensor({l.out}));
    }
  }
  return params;
}

Model::Model(Architecture arch, ParamMap params) : arch_(std::move(arch)), params_(std::move(params)) {
  const std::vector<Shape> shapes = layer_shapes(arch_);
  if (shapes.empty() || shapes.back().size() != 1 || shapes.back()[0] < 2) {
    throw ShapeError("model: final layer must produce K >= 2 logits, got " +
                     (shapes.empty() ? std::string("the raw input") : shape_str(shapes.back())));
  }
  classes_ = shapes.back()[0];
  const ParamMap expected = parameter_template(arch_);
  if (expected.size() != params_.size()) {
    throw ShapeError("model: expected " + std::to_string(expected.size()) + " parameter tensors, got " +
                     std::to_string(params_.size()));
  }
  for (const auto& [name, tmpl] : expected) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("model: missing parameter " + name);
    if (it->second.shape() != tmpl.shape()) {
      throw ShapeError("model: parameter " + name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(tmpl.shape()));
    }
  }
}

std::string Model::arch_id() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : describe(arch_)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Model build_model(const Architecture& arch, const InitSpec& init) {
  ParamMap params = parameter_template(arch);
  std::mt19937_64 rng(init.seed);
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    if (!l.has_params()) continue;
    const std::size_t taps = l.kind == LayerKind::kConv2d ? l.kernel * l.kernel : 1;
    const double bound = xavier_bound(l.in * taps, l.out * taps);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& w : params.at(weight_name(i)).data()) w = dist(rng);
  }
  return Model(arch, std::move(params));
}

ParamVars bind_params(Graph& graph, const Model& model, bool trainable) {
  ParamVars vars;
  for (const auto& [name, t] : model.params()) {
    vars.emplace(name, trainable ? graph.leaf(t, true) : graph.constant(t));
  }
  return vars;
}

Variable forward(const Model& model, const ParamVars& params, Variable x) {
  const Architecture& arch = model.arch();
  const Shape& xs = x.shape();
  if (xs.size() != 4 || Shape(xs.begin() + 1, xs.end()) != arch.input) {
    throw ShapeError("forward: batch shape " + shape_str(xs) + " does not match model input (N, " +
                     shape_str(arch.input).substr(1));
  }
  Variable h = x;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    switch (l.kind) {
      case LayerKind::kDense: {
        Variable y = matmul(h, params.at(weight_name(i)));
        h = add(y, broadcast_channel(params.at(bias_name(i)), y.shape()));
        break;
      }
      case LayerKind::kConv2d: {
        Variable y = conv2d(h, params.at(weight_name(i)), l.stride, l.padding);
        h = add(y, broadcast_channel(params.at(bias_name(i)), y.shape()));
        break;
      }
      case LayerKind::kRelu:
        h = relu(h);
        break;
      case LayerKind::kFlatten: {
        const std::size_t n = h.shape()[0];
        h = reshape(h, {n, h.value().size() / std::max<std::size_t>(n, 1)});
        break;
      }
    }
  }
  return h;
}

ForwardPass forward(const Model& model, const Tensor& batch) {
  ForwardPass pass;
  pass.graph = std::make_unique<Graph>();
  pass.input = pass.graph->leaf(batch, true);
  pass.params = bind_params(*pass.graph, model, true);
  pass.logits = forward(model, pass.params, pass.input);
  return pass;
}

Variable loss(Variable logits, std::span<const int> labels) {
  return mean(softmax_cross_entropy(logits, labels));
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t count) {
  if (t.rank() == 0 || begin + count > t.dim(0)) throw ShapeError("slice_rows: range outside " + shape_str(t.shape()));
  const std::size_t row = t.size() / t.dim(0);
  Shape s = t.shape();
  s[0] = count;
  const auto first = t.values().begin() + static_cast<std::ptrdiff_t>(begin * row);
  return Tensor(std::move(s), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * row)));
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  if (t.rank() == 0) throw ShapeError("gather_rows: scalar tensor");
  const std::size_t row = t.dim(0) == 0 ? 0 : t.size() / t.dim(0);
  Shape s = t.shape();
  s[0] = rows.size();
  std::vector<double> out;
  out.reserve(rows.size() * row);
  for (std::size_t r : rows) {
    if (r >= t.dim(0)) throw ShapeError("gather_rows: row " + std::to_string(r) + " outside " + shape_str(t.shape()));
    const auto first = t.values().begin() + static_cast<std::ptrdiff_t>(r * row);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(row));
  }
  return Tensor(std::move(s), std::move(out));
}

Tensor predict_logits(const Model& model, const Tensor& batch) {
  constexpr std::size_t kChunk = 256;
  if (batch.rank() != 4) throw ShapeError("predict: batch must be (N, C, H, W), got " + shape_str(batch.shape()));
  const std::size_t n = batch.dim(0), k = model.num_classes();
  std::vector<double> out;
  out.reserve(n * k);
  for (std::size_t begin = 0; begin < n; begin += kChunk) {
    const std::size_t count = std::min(kChunk, n - begin);
    Graph graph;
    const ParamVars params = bind_params(graph, model, false);
    Variable logits = forward(model, params, graph.constant(slice_rows(batch, begin, count)));
    out.insert(out.end(), logits.value().values().begin(), logits.value().values().end());
  }
  return Tensor({n, k}, std::move(out));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: expected (N, K), got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits[r * k + j] > logits[r * k + best]) best = j;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(const Model& model, const Tensor& batch) { return argmax_rows(predict_logits(model, batch)); }

double accuracy(const Model& model, const Tensor& images, std::span<const int> labels) {
  if (labels.empty()) throw ValueError("accuracy: empty dataset");
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw ShapeError("accuracy: " + std::to_string(labels.size()) + " labels for images " + shape_str(images.shape()));
  }
  const std::vector<int> pred = predict(model, images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace orthonet
