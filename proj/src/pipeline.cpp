#include "orthonet/pipeline.hpp"

#include <cmath>

#include "orthonet/error.hpp"

namespace orthonet {

std::pair<Dataset, Dataset> load_datasets(const Config& cfg) {
  const std::string kind = cfg.get("dataset.kind");
  Dataset data;
  if (kind == "synthetic") {
    SyntheticSpec spec;
    spec.classes = cfg.get_uint("dataset.synth.classes");
    spec.n = cfg.get_uint("dataset.synth.n");
    spec.hw = cfg.get_uint("dataset.synth.hw");
    spec.seed = cfg.get_uint("dataset.synth.seed");
    spec.noise_sigma = cfg.get_double("dataset.synth.noise");
    spec.template_contrast = cfg.get_double("dataset.synth.contrast");
    data = gen_synthetic(spec);
  } else if (kind == "idx") {
    data = load_idx(cfg.get("dataset.path"), cfg.get("dataset.labels_path"));
  } else if (kind == "csv") {
    data = load_csv_dataset(cfg.get("dataset.path"));
  } else {
    throw ConfigError("dataset.kind: expected synthetic, idx or csv, got '" + kind + "'");
  }
  const double fraction = cfg.get_double("dataset.val_fraction");
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("dataset.val_fraction must lie in (0, 1)");
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(data.size()) * fraction));
  if (n_val == 0 || n_val >= data.size()) {
    throw ConfigError("dataset.val_fraction leaves an empty split of " + std::to_string(data.size()) + " examples");
  }
  return data.split_at(data.size() - n_val);
}

Architecture architecture_from_config(const Config& cfg, const Shape& input, std::size_t classes) {
  const std::string text = cfg.get("model.arch");
  if (text == "mlp") return mlp_architecture(input, classes, cfg.get_uint("model.hidden"));
  if (text == "cnn") return cnn_architecture(input, classes);
  Architecture arch = parse_architecture(text);
  if (arch.input != input) {
    throw ConfigError("model.arch: input " + shape_str(arch.input) + " does not match the data " + shape_str(input));
  }
  if (layer_shapes(arch).back() != Shape{classes}) {
    throw ConfigError("model.arch: output does not match " + std::to_string(classes) + " classes");
  }
  return arch;
}

Penalty parse_penalty(const std::string& name) {
  if (name == "signed") return Penalty::kSigned;
  if (name == "absolute") return Penalty::kAbsolute;
  throw ConfigError("train.penalty: expected signed or absolute, got '" + name + "'");
}

const char* to_string(Penalty penalty) { return penalty == Penalty::kSigned ? "signed" : "absolute"; }

OrthoConfig ortho_config_from(const Config& cfg) {
  OrthoConfig out;
  out.lambda = cfg.get_double("train.lambda");
  out.penalty = parse_penalty(cfg.get("train.penalty"));
  out.epochs_check = cfg.get_uint("train.epochs_check");
  out.max_epochs = cfg.get_uint("train.max_epochs");
  out.optimizer.learning_rate = cfg.get_double("train.lr");
  out.optimizer.momentum = cfg.get_double("train.momentum");
  out.optimizer.batch_size = cfg.get_uint("train.batch");
  out.seed = cfg.get_uint("train.seed");
  out.validate();
  return out;
}

EvalProtocol protocol_from(const Config& cfg) {
  EvalProtocol p;
  p.n_samples = cfg.get_uint("eval.n_samples");
  p.eps_grid = cfg.get_double_list("eval.eps_grid");
  p.seed = cfg.get_uint("eval.seed");
  p.workers = cfg.get_uint("eval.workers");
  for (const std::string& name : cfg.get_list("eval.attacks")) {
    AttackSpec a;
    a.kind = parse_attack_kind(name);
    a.iters = cfg.get_uint("eval.iters");
    a.mu = cfg.get_double("eval.mu");
    a.random_start = cfg.get_bool("eval.random_start");
    a.seed = p.seed;
    p.attacks.push_back(a);
  }
  p.validate();
  return p;
}

std::vector<DefenseSpec> defenses_from(const Config& cfg) {
  std::vector<DefenseSpec> out;
  for (const std::string& text : cfg.get_list("eval.defenses")) {
    DefenseSpec d = DefenseSpec::parse(text);
    d.iters = cfg.get_uint("defense.tvm_iters");
    d.step = cfg.get_double("defense.tvm_step");
    d.sigma_range = cfg.get_double("defense.bilateral_sigma_range");
    d.validate();
    out.push_back(d);
  }
  return out;
}

std::string idx_images_path(const std::string& prefix) { return prefix + "-images.idx"; }
std::string idx_labels_path(const std::string& prefix) { return prefix + "-labels.idx"; }

}  // namespace orthonet
