#include "orthonet/ortho.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <random>

#include "orthonet/config.hpp"
#include "orthonet/error.hpp"

namespace orthonet {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_batch(const Tensor& batch, std::span<const int> labels, const char* who) {
  if (batch.rank() != 4 || batch.dim(0) != labels.size()) {
    throw ShapeError(std::string(who) + ": batch " + shape_str(batch.shape()) + " does not match " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ShapeError(std::string(who) + ": empty batch");
}

std::vector<Variable> param_list(const ParamVars& vars) {
  std::vector<Variable> out;
  out.reserve(vars.size());
  for (const auto& [name, v] : vars) out.push_back(v);
  return out;
}

ParamMap to_param_map(const ParamVars& vars, const std::vector<Tensor>& grads) {
  ParamMap out;
  std::size_t i = 0;
  for (const auto& [name, v] : vars) out.emplace(name, grads[i++]);
  return out;
}

// d(sum of per-example losses)/dx, flattened to (b, d).
Tensor raw_input_gradients(const Model& model, const Tensor& batch, std::span<const int> labels) {
  ForwardPass pass = forward(model, batch);
  const Variable total = sum(softmax_cross_entropy(pass.logits, labels));
  const Variable wrt[] = {pass.input};
  Tensor g = backward(total, wrt)[0];
  const std::size_t b = batch.dim(0);
  return g.reshaped({b, g.size() / b});
}

std::vector<double> row_norms(const Tensor& g) {
  const std::size_t b = g.dim(0), d = g.dim(1);
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += g[i * d + k] * g[i * d + k];
    out[i] = std::sqrt(s);
  }
  return out;
}

// d(sum of per-example losses)/dtheta at the given inputs.
ParamMap summed_loss_param_gradient(const Model& model, const Tensor& batch, std::span<const int> labels) {
  ForwardPass pass = forward(model, batch);
  const Variable total = sum(softmax_cross_entropy(pass.logits, labels));
  const auto wrt = param_list(pass.params);
  return to_param_map(pass.params, backward(total, wrt));
}

void shuffle(std::vector<std::size_t>& order, std::mt19937_64& rng) {
  // Explicit Fisher-Yates so the permutation does not depend on the
  // standard library's distribution implementation.
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
}

TrainResult run_training(const Architecture& arch, const Model* ref, const Dataset& train, const Dataset& val,
                         const OrthoConfig& cfg) {
  cfg.validate();
  if (train.size() == 0 || val.size() == 0) throw ValueError("training: train and validation sets must be nonempty");
  if (train.example_shape() != arch.input || val.example_shape() != arch.input) {
    throw ShapeError("training: data shape " + shape_str(train.example_shape()) + " does not match model input " +
                     shape_str(arch.input));
  }
  if (ref && ref->arch().input != arch.input) {
    throw ShapeError("training: reference input " + shape_str(ref->arch().input) + " differs from " +
                     shape_str(arch.input));
  }
  const double lambda = ref ? cfg.lambda : 0.0;
  Model model = build_model(arch, {InitSpec::Scheme::kXavierUniform, cfg.seed});
  if (model.num_classes() != train.classes) {
    throw ShapeError("training: model has " + std::to_string(model.num_classes()) + " outputs for " +
                     std::to_string(train.classes) + " classes");
  }
  Sgd sgd(cfg.optimizer);
  std::mt19937_64 rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result{model, {}};
  double previous = -std::numeric_limits<double>::infinity();
  const auto start = std::chrono::steady_clock::now();
  const std::size_t bs = cfg.optimizer.batch_size;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle(order, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0, delta_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < order.size(); first += bs) {
      const std::size_t count = std::min(bs, order.size() - first);
      const std::span<const std::size_t> idx(order.data() + first, count);
      const Tensor x = gather_rows(train.images, idx);
      std::vector<int> y(count);
      for (std::size_t i = 0; i < count; ++i) y[i] = train.labels[idx[i]];

      ParamMap grads;
      double batch_loss = 0.0, batch_delta = kNaN;
      if (lambda > 0.0) {
        OrthoObjective obj = ortho_loss(model, *ref, x, y, lambda, cfg.penalty);
        if (!std::isfinite(obj.total.value().item())) {
          throw DivergenceError(static_cast<int>(epoch), static_cast<int>(batches),
                                "training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batches));
        }
        batch_loss = obj.loss.value().item();
        batch_delta = obj.delta.value().item();
        grads = to_param_map(obj.params, backward(obj.total, param_list(obj.params)));
      } else {
        ForwardPass pass = forward(model, x);
        const Variable l = loss(pass.logits, y);
        batch_loss = l.value().item();
        if (!std::isfinite(batch_loss)) {
          throw DivergenceError(static_cast<int>(epoch), static_cast<int>(batches),
                                "training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batches));
        }
        grads = to_param_map(pass.params, backward(l, param_list(pass.params)));
        if (ref && cfg.track_delta) {
          batch_delta = similarity(input_gradients(*ref, x, y), input_gradients(model, x, y)).delta;
        }
      }
      sgd.step(model, grads);
      loss_sum += batch_loss;
      delta_sum += batch_delta;
      ++batches;
    }
    rec.loss = loss_sum / static_cast<double>(batches);
    rec.delta = delta_sum / static_cast<double>(batches);
    rec.val_acc = kNaN;

    const bool check = epoch % cfg.epochs_check == 0 || epoch == cfg.max_epochs;
    bool stop = false;
    if (check) {
      const double acc = accuracy(model, val.images, val.labels);
      rec.val_acc = acc;
      result.record.checks.push_back({epoch, acc, previous});
      if (acc > result.record.best_val_acc || result.record.best_epoch == 0) {
        result.record.best_val_acc = acc;
        result.record.best_epoch = epoch;
        result.model = model;
      }
      stop = acc <= previous;
      previous = acc;
    }
    rec.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.record.epochs.push_back(rec);
    if (stop) break;
  }
  return result;
}

}  // namespace

Tensor input_gradients(const Model& model, const Tensor& batch, std::span<const int> labels) {
  check_batch(batch, labels, "input_gradients");
  Tensor g = raw_input_gradients(model, batch, labels);
  const std::size_t d = g.dim(1);
  const auto norms = row_norms(g);
  for (std::size_t i = 0; i < norms.size(); ++i) {
    const double inv = 1.0 / std::max(norms[i], kGradNormFloor);
    for (std::size_t k = 0; k < d; ++k) g[i * d + k] *= inv;
  }
  return g;
}

SimilaritySample similarity(const Tensor& g1, const Tensor& g2) {
  if (g1.shape() != g2.shape() || g1.rank() != 2) {
    throw ShapeError("similarity: shapes " + shape_str(g1.shape()) + " and " + shape_str(g2.shape()) +
                     " must be equal (b, d)");
  }
  const std::size_t b = g1.dim(0), d = g1.dim(1);
  if (b == 0) throw ShapeError("similarity: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double dot = 0.0;
    for (std::size_t k = 0; k < d; ++k) dot += g1[i * d + k] * g2[i * d + k];
    total += dot;
  }
  return {total / static_cast<double>(b), b};
}

OrthoObjective ortho_loss(const Model& model, const Model& ref, const Tensor& batch, std::span<const int> labels,
                          double lambda, Penalty penalty) {
  if (!(lambda >= 0.0)) throw ValueError("ortho_loss: lambda must be >= 0, got " + format_double(lambda));
  check_batch(batch, labels, "ortho_loss");
  OrthoObjective obj;
  obj.graph = std::make_unique<Graph>();
  Graph& g = *obj.graph;
  const Variable x = g.leaf(batch, true);
  obj.params = bind_params(g, model, true);
  const Variable logits = forward(model, obj.params, x);
  const Variable per_example = softmax_cross_entropy(logits, labels);
  obj.loss = mean(per_example);
  if (lambda == 0.0) {
    obj.total = obj.loss;
    return obj;
  }
  const std::size_t b = batch.dim(0), d = batch.size() / b;
  const Variable ref_grad = g.constant(input_gradients(ref, batch, labels));
  const Variable wrt[] = {x};
  const Variable raw = backward_create_graph(sum(per_example), wrt)[0];
  const Variable own_grad = normalize_rows(reshape(raw, {b, d}), kGradNormFloor);
  obj.delta = mean(sum_last(mul(ref_grad, own_grad)));
  double weight = lambda;
  if (penalty == Penalty::kAbsolute) {
    // |delta| = sign(delta) * delta with the sign held constant: its
    // derivative is the usual subgradient, 0 at delta == 0.
    const double d = obj.delta.value().item();
    weight *= d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0;
  }
  obj.total = add(obj.loss, scale(obj.delta, weight));
  return obj;
}

ParamMap ortho_loss_gradient(const Model& model, const Model& ref, const Tensor& batch, std::span<const int> labels,
                             double lambda, Penalty penalty) {
  OrthoObjective obj = ortho_loss(model, ref, batch, labels, lambda, penalty);
  return to_param_map(obj.params, backward(obj.total, param_list(obj.params)));
}

ParamMap ortho_loss_gradient_fd(const Model& model, const Model& ref, const Tensor& batch,
                                std::span<const int> labels, double lambda, Penalty penalty, double h) {
  if (!(lambda >= 0.0)) throw ValueError("ortho_loss_gradient_fd: lambda must be >= 0, got " + format_double(lambda));
  if (!(h > 0.0)) throw ValueError("ortho_loss_gradient_fd: step must be positive");
  check_batch(batch, labels, "ortho_loss_gradient_fd");
  const std::size_t b = batch.dim(0);
  ParamMap grad = summed_loss_param_gradient(model, batch, labels);
  for (auto& [name, t] : grad) {
    for (double& v : t.data()) v /= static_cast<double>(b);
  }
  if (lambda == 0.0) return grad;

  // delta = mean_i <g1_i, n(r_i)> with r_i the raw input-gradient. Its
  // sensitivity to r_i is v_i = (g1_i - <n_i, g1_i> n_i) / |r_i| (or g1_i /
  // floor below the floor), so d(delta)/d(theta) = (1/b) d/dt grad_theta L(x + t v).
  const Tensor g1 = input_gradients(ref, batch, labels);
  const Tensor r = raw_input_gradients(model, batch, labels);
  const std::size_t d = r.dim(1);
  const auto norms = row_norms(r);
  if (penalty == Penalty::kAbsolute) {
    Tensor own = r;
    for (std::size_t i = 0; i < b; ++i) {
      const double inv = 1.0 / std::max(norms[i], kGradNormFloor);
      for (std::size_t k = 0; k < d; ++k) own[i * d + k] *= inv;
    }
    const double delta = similarity(g1, own).delta;
    lambda *= delta > 0.0 ? 1.0 : delta < 0.0 ? -1.0 : 0.0;
    if (lambda == 0.0) return grad;
  }
  Tensor v({b, d});
  for (std::size_t i = 0; i < b; ++i) {
    const double len = std::max(norms[i], kGradNormFloor);
    double proj = 0.0;
    if (norms[i] > kGradNormFloor) {
      for (std::size_t k = 0; k < d; ++k) proj += g1[i * d + k] * r[i * d + k] / len;
    }
    for (std::size_t k = 0; k < d; ++k) {
      const double n = norms[i] > kGradNormFloor ? r[i * d + k] / len : 0.0;
      v[i * d + k] = (g1[i * d + k] - proj * n) / len;
    }
  }
  // One central difference per row, each scaled to its own largest entry so
  // a row whose norm sits at the floor cannot swamp the others.
  for (std::size_t i = 0; i < b; ++i) {
    double vmax = 0.0;
    for (std::size_t k = 0; k < d; ++k) vmax = std::max(vmax, std::abs(v[i * d + k]));
    if (vmax == 0.0) continue;
    Tensor plus = slice_rows(batch, i, 1), minus = plus;
    for (std::size_t k = 0; k < d; ++k) {
      plus[k] += h * v[i * d + k] / vmax;
      minus[k] -= h * v[i * d + k] / vmax;
    }
    const std::span<const int> label(labels.data() + i, 1);
    const ParamMap gp = summed_loss_param_gradient(model, plus, label);
    const ParamMap gm = summed_loss_param_gradient(model, minus, label);
    const double factor = lambda * vmax / (2.0 * h * static_cast<double>(b));
    for (auto& [name, t] : grad) {
      const Tensor& p = gp.at(name);
      const Tensor& m = gm.at(name);
      for (std::size_t k = 0; k < t.size(); ++k) t[k] += factor * (p[k] - m[k]);
    }
  }
  return grad;
}

void OrthoConfig::validate() const {
  if (!(lambda >= 0.0)) throw ValueError("lambda must be >= 0, got " + format_double(lambda));
  if (epochs_check == 0) throw ValueError("epochs_check must be positive");
  if (max_epochs == 0) throw ValueError("max_epochs must be positive");
  optimizer.validate();
}

std::string TrainRecord::to_csv() const {
  std::string out = "epoch,loss,delta,val_acc\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.loss) + "," +
           (std::isnan(e.delta) ? std::string() : format_double(e.delta)) + "," +
           (std::isnan(e.val_acc) ? std::string() : format_double(e.val_acc)) + "\n";
  }
  return out;
}

TrainResult train_orthogonal(const Architecture& arch, const Model& ref, const Dataset& train, const Dataset& val,
                             const OrthoConfig& cfg) {
  return run_training(arch, &ref, train, val, cfg);
}

TrainResult train_plain(const Architecture& arch, const Dataset& train, const Dataset& val, const OrthoConfig& cfg) {
  return run_training(arch, nullptr, train, val, cfg);
}

PairSimilarity measure_pair_similarity(const Model& m1, const Model& m2, const Dataset& data, std::size_t n,
                                       std::size_t batch_size) {
  if (n == 0) throw ValueError("measure_pair_similarity: n must be positive");
  if (batch_size == 0) throw ValueError("measure_pair_similarity: batch size must be positive");
  if (n > data.size()) {
    throw ValueError("measure_pair_similarity: n = " + std::to_string(n) + " exceeds " + std::to_string(data.size()) +
                     " examples");
  }
  std::vector<double> deltas;
  for (std::size_t first = 0; first < n; first += batch_size) {
    const std::size_t count = std::min(batch_size, n - first);
    const Tensor x = slice_rows(data.images, first, count);
    const std::span<const int> y(data.labels.data() + first, count);
    deltas.push_back(similarity(input_gradients(m1, x, y), input_gradients(m2, x, y)).delta);
  }
  PairSimilarity out;
  out.batches = deltas.size();
  for (double v : deltas) {
    out.mean += v;
    out.mean_abs += std::abs(v);
  }
  out.mean /= static_cast<double>(deltas.size());
  out.mean_abs /= static_cast<double>(deltas.size());
  double sq = 0.0;
  for (double v : deltas) sq += (v - out.mean) * (v - out.mean);
  out.stddev = deltas.size() > 1 ? std::sqrt(sq / static_cast<double>(deltas.size() - 1)) : 0.0;
  return out;
}

}  // namespace orthonet
