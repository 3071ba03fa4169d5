#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <optional>
#include <ostream>

#include "orthonet/checkpoint.hpp"
#include "orthonet/error.hpp"
#include "orthonet/eval.hpp"
#include "orthonet/pipeline.hpp"

namespace orthonet::cli {
namespace {

namespace fs = std::filesystem;

struct Options {
  std::string command;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> lambda;
  std::optional<std::string> reference;
  std::vector<std::string> targets;
  std::optional<std::string> eps;
  std::optional<std::string> attack;
  std::optional<std::string> defense;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> n_samples;
  std::optional<std::string> input;
};

// Flag overrides beat config-file values.
Config resolve(const Options& o) {
  Config cfg = o.config.empty() ? Config() : Config::load(o.config);
  if (o.seed) {
    cfg.set("train.seed", std::to_string(*o.seed));
    cfg.set("eval.seed", std::to_string(*o.seed));
  }
  if (o.lambda) cfg.set(o.command == "sweep-lambda" ? "eval.lambdas" : "train.lambda", *o.lambda);
  if (o.reference) cfg.set("reference.checkpoint", *o.reference);
  if (!o.targets.empty()) {
    std::string joined;
    for (const auto& t : o.targets) joined += (joined.empty() ? "" : ",") + t;
    cfg.set("eval.targets", joined);
  }
  if (o.eps) cfg.set("eval.eps_grid", *o.eps);
  if (o.attack) cfg.set("eval.attacks", *o.attack);
  if (o.defense) cfg.set("eval.defenses", *o.defense);
  if (o.workers) cfg.set("eval.workers", std::to_string(*o.workers));
  if (o.n_samples) cfg.set("eval.n_samples", std::to_string(*o.n_samples));
  if (o.input) cfg.set("eval.input", *o.input);
  return cfg.resolved();
}

std::string out_path(const Options& o, const std::string& name) { return (fs::path(o.out) / name).string(); }

std::string require(const Config& cfg, const std::string& key, const std::string& flag) {
  std::string v = cfg.get(key);
  if (v.empty()) throw ConfigError(key + " is not set (use " + flag + " or the config file)");
  return v;
}

// "run1/model.orth" is reported as "run1/model".
std::string model_id(const std::string& path) {
  const fs::path p(path);
  const std::string parent = p.parent_path().filename().string();
  return parent.empty() ? p.stem().string() : parent + "/" + p.stem().string();
}

NamedModel load_named(const std::string& path) { return {model_id(path), load_checkpoint(path).model}; }

// An orthogonal model must start from a different initialization and data
// order than its reference; with a shared seed it retraces the reference's
// path and the penalty stalls training. A seed equal to the reference's is
// shifted by one, so the rule is deterministic and resolved.cfg still
// reproduces the run.
std::uint64_t ortho_seed(std::uint64_t configured, const Checkpoint& ref, std::ostream& out) {
  if (configured != ref.meta.seed) return configured;
  out << "note: train.seed " << configured << " is the reference's seed; training with seed " << configured + 1
      << "\n";
  return configured + 1;
}

Model load_reference(const Config& cfg) {
  return load_checkpoint(require(cfg, "reference.checkpoint", "--reference")).model;
}

void check_same_arch(const Architecture& expected, const Model& model, const std::string& what) {
  if (model.arch() != expected) {
    throw ConfigError(what + " architecture '" + describe(model.arch()) + "' differs from the configured '" +
                      describe(expected) + "'");
  }
}

// eval.input when set, else the validation split of the configured dataset.
Dataset eval_data(const Config& cfg, std::size_t classes) {
  const std::string prefix = cfg.get("eval.input");
  if (prefix.empty()) return load_datasets(cfg).second;
  Dataset data = load_idx(idx_images_path(prefix), idx_labels_path(prefix));
  data.classes = std::max(data.classes, classes);
  data.split = prefix;
  return data;
}

std::optional<DefenseSpec> single_defense(const Config& cfg) {
  const auto specs = defenses_from(cfg);
  if (specs.size() > 1) throw ConfigError("eval.defenses: give one defense here, or use compare-defenses");
  if (specs.empty()) return std::nullopt;
  return specs.front();
}

void save_trained(const Options& o, const TrainResult& r, const CheckpointMeta& meta) {
  save_checkpoint(r.model, meta, out_path(o, "model.orth"));
  write_text_file(out_path(o, "train_log.csv"), r.record.to_csv());
}

std::string similarity_csv_row(const std::string& label, const PairSimilarity& s) {
  return label + "," + std::to_string(s.batches) + "," + format_double(s.mean) + "," + format_double(s.mean_abs) +
         "," + format_double(s.stddev) + "\n";
}

void emit(const Options& o, const FoolingReport& report, std::ostream& out) {
  emit_report(report, out_path(o, "report.csv"));
  const std::string table = format_table(report);
  write_text_file(out_path(o, "table.txt"), table);
  out << table;
}

// --- subcommands -------------------------------------------------------------

void cmd_train(const Options& o, const Config& cfg, std::ostream& out) {
  const auto [train, val] = load_datasets(cfg);
  const Architecture arch = architecture_from_config(cfg, train.example_shape(), train.classes);
  const OrthoConfig oc = ortho_config_from(cfg);
  const TrainResult r = train_plain(arch, train, val, oc);
  save_trained(o, r, {oc.seed, 0.0, "", r.record.best_val_acc});
  out << "trained " << describe(arch) << ": val accuracy " << r.record.best_val_acc << " (epoch "
      << r.record.best_epoch << ")\n";
}

void cmd_train_ortho(const Options& o, const Config& cfg, std::ostream& out) {
  const std::string ref_path = require(cfg, "reference.checkpoint", "--reference");
  const Checkpoint ref_ckpt = load_checkpoint(ref_path);
  const Model& ref = ref_ckpt.model;
  const auto [train, val] = load_datasets(cfg);
  const Architecture arch = architecture_from_config(cfg, train.example_shape(), train.classes);
  check_same_arch(arch, ref, "reference");
  OrthoConfig oc = ortho_config_from(cfg);
  oc.seed = ortho_seed(oc.seed, ref_ckpt, out);
  const TrainResult r = train_orthogonal(arch, ref, train, val, oc);
  save_trained(o, r, {oc.seed, oc.lambda, fnv1a_hex(read_file(ref_path)), r.record.best_val_acc});
  const PairSimilarity s = measure_pair_similarity(ref, r.model, val, val.size(), oc.optimizer.batch_size);
  write_text_file(out_path(o, "similarity.csv"),
                  "split,batches,delta_mean,delta_mean_abs,delta_std\n" + similarity_csv_row("val", s));
  out << "trained orthogonal model (lambda " << oc.lambda << ", " << to_string(oc.penalty)
      << " penalty): val accuracy " << r.record.best_val_acc << ", delta to reference " << s.mean << "\n";
}

void cmd_attack(const Options& o, const Config& cfg, std::ostream& out) {
  const Model source = load_reference(cfg);
  const EvalProtocol p = protocol_from(cfg);
  if (p.eps_grid.size() != 1 || p.attacks.size() != 1) {
    throw ConfigError("attack needs exactly one epsilon and one attack (--eps, --attack)");
  }
  const Dataset data = eval_data(cfg, source.num_classes());
  const std::size_t n = std::min(p.n_samples, data.size());
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  const Dataset batch = data.subset(rows, data.split);
  AttackSpec spec = p.attacks.front();
  spec.epsilon = p.eps_grid.front();
  const AdversarialBatch adv = attack(source, batch.images, batch.labels, spec);

  save_idx({adv.perturbed, adv.labels, batch.classes, "adv"}, out_path(o, "adv-images.idx"),
           out_path(o, "adv-labels.idx"));
  std::string csv = "index,true_label,linf\n";
  for (std::size_t i = 0; i < n; ++i) {
    csv += std::to_string(i) + "," + std::to_string(adv.labels[i]) + "," + format_double(adv.linf[i]) + "\n";
  }
  write_text_file(out_path(o, "adv.csv"), csv);
  const auto pred = predict(source, adv.perturbed);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < n; ++i) wrong += pred[i] != adv.labels[i];
  out << "crafted " << n << " " << to_string(spec.kind) << " examples at eps " << spec.epsilon << "; source wrong on "
      << wrong << "\n";
}

void cmd_defend(const Options& o, const Config& cfg, std::ostream& out) {
  const auto defense = single_defense(cfg);
  if (!defense) throw ConfigError("defend needs a defense (--defense)");
  const Dataset data = eval_data(cfg, 0);
  const Tensor y = apply_defense(data.images, *defense);
  save_idx({y, data.labels, data.classes, "defended"}, out_path(o, "defended-images.idx"),
           out_path(o, "defended-labels.idx"));
  out << "applied " << defense->id() << " to " << data.size() << " images\n";
}

void cmd_evaluate(const Options& o, const Config& cfg, std::ostream& out) {
  const NamedModel source = load_named(require(cfg, "reference.checkpoint", "--reference"));
  std::vector<NamedModel> targets;
  for (const std::string& path : cfg.get_list("eval.targets")) targets.push_back(load_named(path));
  const EvalProtocol p = protocol_from(cfg);
  const Dataset data = eval_data(cfg, source.model.num_classes());
  emit(o, run_transfer(source, targets, data, p, single_defense(cfg)), out);
}

void cmd_sweep_lambda(const Options& o, const Config& cfg, std::ostream& out) {
  const std::string ref_path = require(cfg, "reference.checkpoint", "--reference");
  const Checkpoint ref_ckpt = load_checkpoint(ref_path);
  const NamedModel ref{model_id(ref_path), ref_ckpt.model};
  const auto [train, val] = load_datasets(cfg);
  const Architecture arch = architecture_from_config(cfg, train.example_shape(), train.classes);
  check_same_arch(arch, ref.model, "reference");
  const std::vector<double> lambdas = cfg.get_double_list("eval.lambdas");
  OrthoConfig base = ortho_config_from(cfg);
  base.seed = ortho_seed(base.seed, ref_ckpt, out);
  const LambdaSweep sweep = sweep_lambda(arch, ref, lambdas, train, val, base, protocol_from(cfg));

  const std::string ref_hash = fnv1a_hex(read_file(ref_path));
  std::string csv = "lambda,target,delta_mean,delta_mean_abs,delta_std,val_acc,epochs\n";
  for (const LambdaEntry& e : sweep.entries) {
    save_checkpoint(e.model, {base.seed, e.lambda, ref_hash, e.record.best_val_acc}, out_path(o, e.target_id + ".orth"));
    csv += format_double(e.lambda) + "," + e.target_id + "," + format_double(e.similarity.mean) + "," +
           format_double(e.similarity.mean_abs) + "," + format_double(e.similarity.stddev) + "," +
           format_double(e.record.best_val_acc) + "," + std::to_string(e.record.epochs.size()) + "\n";
    out << "lambda " << e.lambda << ": delta " << e.similarity.mean << ", val accuracy " << e.record.best_val_acc
        << "\n";
  }
  write_text_file(out_path(o, "lambda_sweep.csv"), csv);
  emit(o, sweep.report, out);
}

void cmd_compare_defenses(const Options& o, const Config& cfg, std::ostream& out) {
  const NamedModel source = load_named(require(cfg, "reference.checkpoint", "--reference"));
  const auto paths = cfg.get_list("eval.targets");
  if (paths.size() != 2) {
    throw ConfigError("compare-defenses needs two targets: the ordinary model, then the orthogonal one (--target)");
  }
  const NamedModel ordinary = load_named(paths[0]);
  const NamedModel orthogonal = load_named(paths[1]);
  const Dataset data = eval_data(cfg, source.model.num_classes());
  emit(o, compare_defenses(source, ordinary, orthogonal, defenses_from(cfg), data, protocol_from(cfg)), out);
}

void cmd_report(const Options& o, const Config& cfg, std::ostream& out) {
  const std::string path = require(cfg, "eval.input", "--input");
  const auto bytes = read_file(path);
  FoolingReport report = FoolingReport::parse_csv(std::string(bytes.begin(), bytes.end()));
  if (report.rows.empty()) throw ValueError("report: '" + path + "' has no rows");
  report.sort();
  emit(o, report, out);
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Orthogonal-gradient training and adversarial transfer evaluation", "orthonet"};
  app.require_subcommand(1);
  Options o;

  struct Command {
    const char* name;
    const char* help;
    void (*run)(const Options&, const Config&, std::ostream&);
    bool workers;
  };
  const Command commands[] = {
      {"train", "Train an ordinary model", cmd_train, false},
      {"train-ortho", "Train a model orthogonal to a reference", cmd_train_ortho, false},
      {"attack", "Craft adversarial examples on a model", cmd_attack, false},
      {"defend", "Apply an input-transformation defense to a dataset", cmd_defend, false},
      {"evaluate", "Measure transfer fooling ratios", cmd_evaluate, true},
      {"sweep-lambda", "Train and evaluate orthogonal models over a lambda grid", cmd_sweep_lambda, true},
      {"compare-defenses", "Compare input-transformation defenses with orthogonal training", cmd_compare_defenses,
       true},
      {"report", "Regenerate the table and plotting script for a report CSV", cmd_report, false},
  };
  const Command* chosen = nullptr;
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", o.config, "Config file (key = value lines)")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Output directory")->required();
    sub->add_option("--seed", o.seed, "Overrides train.seed and eval.seed");
    sub->add_option("--lambda", o.lambda, "train.lambda (train-ortho) or the eval.lambdas grid (sweep-lambda)");
    sub->add_option("--reference", o.reference, "Reference / attack-source checkpoint");
    sub->add_option("--target", o.targets, "Target checkpoint; repeat for several");
    sub->add_option("--eps", o.eps, "Comma-separated epsilon grid");
    sub->add_option("--attack", o.attack, "Comma-separated attacks: fgsm, ifgsm, mifgsm, pgd");
    sub->add_option("--defense", o.defense, "Comma-separated defenses, e.g. jpeg:75,tvm:3,bits:4,bilateral:5");
    if (c.workers) sub->add_option("--workers", o.workers, "Threads for crafting and classification");
    sub->add_option("--n-samples", o.n_samples, "Number of evaluated samples");
    sub->add_option("--input", o.input, "IDX prefix of input data, or the CSV for report");
    sub->callback([&o, &chosen, &c] {
      o.command = c.name;
      chosen = &c;
    });
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const Config cfg = resolve(o);
    fs::create_directories(o.out);
    write_text_file(out_path(o, "resolved.cfg"), "# orthonet " + o.command + "; rerun with: orthonet " + o.command +
                                                     " --config <this file> --out " + o.out + "\n" + cfg.to_text());
    chosen->run(o, cfg, out);
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomainError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomainError;
  }
}

}  // namespace orthonet::cli
