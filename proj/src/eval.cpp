#include "orthonet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "orthonet/config.hpp"
#include "orthonet/error.hpp"

namespace orthonet {
namespace {

// Runs fn(begin, count) over contiguous chunks of [0, n) on up to `workers`
// threads. The first exception (in chunk order) is rethrown.
template <class Fn>
void parallel_chunks(std::size_t n, std::size_t workers, Fn&& fn) {
  if (n == 0) return;
  workers = std::clamp<std::size_t>(workers, 1, n);
  const std::size_t chunk = (n + workers - 1) / workers;
  if (workers == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    if (begin >= n) break;
    const std::size_t count = std::min(chunk, n - begin);
    threads.emplace_back([&, w, begin, count] {
      try {
        fn(begin, count);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void check_id(const std::string& id) {
  if (id.empty() || id.find_first_of(",\r\n") != std::string::npos) {
    throw ValueError("report id '" + id + "' must be nonempty without commas or line breaks");
  }
}

void check_compatible(const std::vector<const NamedModel*>& models, const Dataset& data) {
  std::set<std::string> ids;
  const Shape input = data.example_shape();
  for (const NamedModel* m : models) {
    check_id(m->id);
    if (!ids.insert(m->id).second) throw ValueError("duplicate model id '" + m->id + "'");
    if (m->model.arch().input != input) {
      throw ShapeError("model '" + m->id + "' expects input " + shape_str(m->model.arch().input) + ", data has " +
                       shape_str(input));
    }
    if (m->model.num_classes() != data.classes) {
      throw ShapeError("model '" + m->id + "' has " + std::to_string(m->model.num_classes()) +
                       " classes, data has " + std::to_string(data.classes));
    }
  }
}

struct Sample {
  Tensor images;
  std::vector<int> labels;
};

Sample draw_sample(const std::vector<const NamedModel*>& models, const Dataset& data, const EvalProtocol& protocol) {
  std::vector<const Model*> plain;
  for (const NamedModel* m : models) plain.push_back(&m->model);
  const auto idx = select_correct(plain, data, protocol.n_samples, protocol.seed);
  Sample s{gather_rows(data.images, idx), {}};
  for (std::size_t i : idx) s.labels.push_back(data.labels[i]);
  return s;
}

// Row i of the sample is keyed by its position, so a given protocol crafts
// the same perturbations for any worker count.
Tensor craft(const Model& source, const Sample& s, const AttackSpec& spec, std::size_t workers) {
  if (spec.epsilon == 0.0) return s.images;
  const LossGradient grad = model_loss_gradient(source);
  std::vector<Tensor> parts(workers == 0 ? 1 : workers);
  const std::size_t n = s.labels.size();
  const std::size_t chunk = (n + parts.size() - 1) / parts.size();
  parallel_chunks(n, parts.size(), [&](std::size_t begin, std::size_t count) {
    const std::span<const int> y(s.labels.data() + begin, count);
    parts[begin / chunk] = run_attack(grad, slice_rows(s.images, begin, count), y, spec, begin);
  });
  Tensor out(s.images.shape());
  auto dst = out.data().begin();
  for (const Tensor& p : parts) dst = std::copy(p.data().begin(), p.data().end(), dst);
  return out;
}

std::size_t count_fooled(const Model& model, const Tensor& x, std::span<const int> labels,
                         const std::optional<DefenseSpec>& defense, std::size_t workers) {
  const std::size_t n = labels.size();
  std::vector<std::size_t> fooled(std::max<std::size_t>(workers, 1), 0);
  const std::size_t chunk = (n + fooled.size() - 1) / fooled.size();
  parallel_chunks(n, fooled.size(), [&](std::size_t begin, std::size_t count) {
    Tensor part = slice_rows(x, begin, count);
    if (defense) part = apply_defense(part, *defense);
    const auto pred = predict(model, part);
    std::size_t k = 0;
    for (std::size_t i = 0; i < count; ++i) k += pred[i] != labels[begin + i];
    fooled[begin / chunk] = k;
  });
  std::size_t total = 0;
  for (std::size_t k : fooled) total += k;
  return total;
}

std::string defense_id(const std::optional<DefenseSpec>& d) { return d ? d->id() : "none"; }

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::size_t parse_count(const std::string& text, const std::string& what) {
  const double v = parse_double(text, what);
  if (v < 0 || v != std::floor(v)) throw ConfigError(what + ": expected a count, got '" + text + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace

void EvalProtocol::validate() const {
  if (n_samples == 0) throw ValueError("eval: n_samples must be positive");
  if (eps_grid.empty()) throw ValueError("eval: the epsilon grid is empty");
  for (double e : eps_grid) {
    if (!(e >= 0.0 && e <= kMaxEpsilon)) {
      throw ValueError("eval: epsilon " + format_double(e) + " outside [0, " + format_double(kMaxEpsilon) + "]");
    }
  }
  if (!std::is_sorted(eps_grid.begin(), eps_grid.end())) throw ValueError("eval: the epsilon grid must be sorted");
  if (attacks.empty()) throw ValueError("eval: no attacks given");
  if (workers == 0) throw ValueError("eval: workers must be positive");
}

void FoolingReport::sort() {
  std::sort(rows.begin(), rows.end(), [](const FoolingRow& a, const FoolingRow& b) {
    return std::tie(a.source, a.target, a.attack, a.epsilon, a.defense, a.n, a.n_fooled) <
           std::tie(b.source, b.target, b.attack, b.epsilon, b.defense, b.n, b.n_fooled);
  });
}

const FoolingRow* FoolingReport::find(const std::string& target, const std::string& attack, double epsilon,
                                      const std::string& defense) const {
  for (const FoolingRow& r : rows) {
    if (r.target == target && r.attack == attack && r.epsilon == epsilon && r.defense == defense) return &r;
  }
  return nullptr;
}

std::string FoolingReport::to_csv() const {
  std::string out = std::string(kReportHeader) + "\n";
  for (const FoolingRow& r : rows) {
    for (const std::string* id : {&r.source, &r.target, &r.attack, &r.defense}) check_id(*id);
    out += r.source + "," + r.target + "," + r.attack + "," + format_double(r.epsilon) + "," + r.defense + "," +
           std::to_string(r.n) + "," + std::to_string(r.n_fooled) + "," + format_double(r.fooling_ratio()) + "\n";
  }
  return out;
}

FoolingReport FoolingReport::parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) {
    throw FormatError(FormatErrorKind::kMalformed, "header", "expected '" + std::string(kReportHeader) + "'");
  }
  FoolingReport report;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno);
    const auto f = split_csv_line(line);
    if (f.size() != 8) throw FormatError(FormatErrorKind::kMalformed, where, "expected 8 fields");
    try {
      FoolingRow r{f[0], f[1], f[2], parse_double(f[3], "epsilon"), f[4], parse_count(f[5], "n"),
                   parse_count(f[6], "n_fooled")};
      if (r.n_fooled > r.n) throw ConfigError("n_fooled exceeds n");
      if (parse_double(f[7], "fooling_ratio") != r.fooling_ratio()) {
        throw ConfigError("fooling_ratio does not equal n_fooled / n");
      }
      report.rows.push_back(std::move(r));
    } catch (const ConfigError& e) {
      throw FormatError(FormatErrorKind::kMalformed, where, e.what());
    }
  }
  return report;
}

std::vector<std::size_t> select_correct(const std::vector<const Model*>& models, const Dataset& data, std::size_t n,
                                        std::uint64_t seed) {
  if (models.empty()) throw ValueError("select_correct: no models given");
  std::vector<char> ok(data.size(), 1);
  for (const Model* m : models) {
    const auto pred = predict(*m, data.images);
    for (std::size_t i = 0; i < data.size(); ++i) ok[i] &= pred[i] == data.labels[i];
  }
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (ok[i]) pool.push_back(i);
  }
  if (pool.size() < n) {
    throw ValueError("select_correct: only " + std::to_string(pool.size()) + " of " + std::to_string(data.size()) +
                     " examples are correct on every model, need " + std::to_string(n));
  }
  // Partial Fisher-Yates with an explicit uniform draw, so the result does
  // not depend on the standard library's distribution implementations.
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t span = pool.size() - i;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / span * span;
    std::uint64_t r = rng();
    while (r >= limit) r = rng();
    std::swap(pool[i], pool[i + static_cast<std::size_t>(r % span)]);
  }
  pool.resize(n);
  std::sort(pool.begin(), pool.end());
  return pool;
}

FoolingReport run_transfer(const NamedModel& source, const std::vector<NamedModel>& targets, const Dataset& data,
                           const EvalProtocol& protocol, const std::optional<DefenseSpec>& defense) {
  protocol.validate();
  if (defense) defense->validate();
  std::vector<const NamedModel*> all{&source};
  for (const NamedModel& t : targets) all.push_back(&t);
  check_compatible(all, data);
  const Sample s = draw_sample(all, data, protocol);
  const std::size_t n = s.labels.size();

  FoolingReport report;
  for (AttackSpec spec : protocol.attacks) {
    for (double eps : protocol.eps_grid) {
      spec.epsilon = eps;
      spec.validate();
      const Tensor adv = craft(source.model, s, spec, protocol.workers);
      const std::string attack = to_string(spec.kind);
      report.rows.push_back({source.id, source.id, attack, eps, "none", n,
                             count_fooled(source.model, adv, s.labels, std::nullopt, protocol.workers)});
      for (const NamedModel& t : targets) {
        report.rows.push_back({source.id, t.id, attack, eps, defense_id(defense), n,
                               count_fooled(t.model, adv, s.labels, defense, protocol.workers)});
      }
    }
  }
  report.sort();
  return report;
}

LambdaSweep sweep_lambda(const Architecture& arch, const NamedModel& ref, const std::vector<double>& lambdas,
                         const Dataset& train, const Dataset& val, const OrthoConfig& base,
                         const EvalProtocol& protocol) {
  if (lambdas.empty()) throw ValueError("sweep_lambda: the lambda grid is empty");
  protocol.validate();
  LambdaSweep sweep;
  std::vector<NamedModel> targets;
  for (double lambda : lambdas) {
    OrthoConfig cfg = base;
    cfg.lambda = lambda;
    TrainResult result = train_orthogonal(arch, ref.model, train, val, cfg);
    LambdaEntry e{lambda, "ortho-lambda-" + format_double(lambda), {}, std::move(result.record), result.model};
    e.similarity = measure_pair_similarity(ref.model, e.model, val, val.size(), cfg.optimizer.batch_size);
    targets.push_back({e.target_id, e.model});
    sweep.entries.push_back(std::move(e));
  }
  sweep.report = run_transfer(ref, targets, val, protocol);
  return sweep;
}

FoolingReport compare_defenses(const NamedModel& source, const NamedModel& ordinary, const NamedModel& orthogonal,
                               const std::vector<DefenseSpec>& specs, const Dataset& data,
                               const EvalProtocol& protocol) {
  protocol.validate();
  std::vector<std::optional<DefenseSpec>> defenses{std::nullopt};
  std::set<std::string> seen{"none"};
  for (const DefenseSpec& d : specs) {
    d.validate();
    if (!seen.insert(d.id()).second) throw ValueError("compare_defenses: duplicate defense '" + d.id() + "'");
    defenses.emplace_back(d);
  }
  check_compatible({&source, &ordinary, &orthogonal}, data);
  const Sample s = draw_sample({&source, &ordinary, &orthogonal}, data, protocol);
  const std::size_t n = s.labels.size();

  FoolingReport report;
  auto evaluate = [&](const Tensor& x, const std::string& attack, double eps) {
    for (const auto& d : defenses) {
      report.rows.push_back({source.id, ordinary.id, attack, eps, defense_id(d), n,
                             count_fooled(ordinary.model, x, s.labels, d, protocol.workers)});
    }
    report.rows.push_back({source.id, orthogonal.id, attack, eps, "none", n,
                           count_fooled(orthogonal.model, x, s.labels, std::nullopt, protocol.workers)});
  };
  evaluate(s.images, "clean", 0.0);
  for (AttackSpec spec : protocol.attacks) {
    for (double eps : protocol.eps_grid) {
      spec.epsilon = eps;
      spec.validate();
      evaluate(craft(source.model, s, spec, protocol.workers), to_string(spec.kind), eps);
    }
  }
  report.sort();
  return report;
}

std::string format_table(const FoolingReport& report) {
  using Key = std::pair<std::string, double>;  // (attack, epsilon)
  std::set<std::string> sources;
  std::set<Key> columns;
  bool has_clean = false;
  for (const FoolingRow& r : report.rows) {
    sources.insert(r.source);
    if (r.attack == "clean") {
      has_clean = true;
    } else {
      columns.insert({r.attack, r.epsilon});
    }
  }
  std::ostringstream out;
  out << std::fixed;
  out.precision(1);
  for (const std::string& source : sources) {
    std::map<std::pair<std::string, std::string>, std::map<Key, double>> table;
    for (const FoolingRow& r : report.rows) {
      if (r.source == source) table[{r.target, r.defense}][{r.attack, r.epsilon}] = 100.0 * r.fooling_ratio();
    }
    std::size_t width = 6;
    for (const auto& [key, cells] : table) width = std::max(width, key.first.size() + key.second.size() + 3);
    out << "source " << source << " (fooling ratio, %)\n";
    out << std::string(width, ' ');
    if (has_clean) out << "     clean";
    for (const auto& [attack, eps] : columns) {
      const std::string head = attack + "@" + format_double(eps);
      out << std::string(head.size() < 12 ? 12 - head.size() : 1, ' ') << head;
    }
    out << "\n";
    for (const auto& [key, cells] : table) {
      std::string label = key.first + (key.second == "none" ? "" : " + " + key.second);
      out << label << std::string(width - label.size(), ' ');
      auto cell = [&](const Key& k, std::size_t w) {
        std::ostringstream v;
        v << std::fixed;
        v.precision(1);
        if (const auto it = cells.find(k); it != cells.end()) {
          v << it->second;
        } else {
          v << "-";
        }
        out << std::string(v.str().size() < w ? w - v.str().size() : 1, ' ') << v.str();
      };
      if (has_clean) cell({"clean", 0.0}, 10);
      for (const Key& k : columns) cell(k, std::max<std::size_t>(12, k.first.size() + format_double(k.second).size() + 2));
      out << "\n";
    }
  }
  return out.str();
}

std::string plot_script(const std::string& csv_name) {
  return R"py(#!/usr/bin/env python3
# Fooling ratio against epsilon: one panel per attack, one line per target
# (and defense, when one was applied). Usage: python3 <script> [report.csv]
import csv
import os
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
path = sys.argv[1] if len(sys.argv) > 1 else os.path.join(here, ")py" +
         csv_name + R"py(")

curves = defaultdict(lambda: defaultdict(list))
with open(path, newline="") as f:
    for row in csv.DictReader(f):
        if row["attack"] == "clean":
            continue
        label = row["target"] if row["defense"] == "none" else row["target"] + " + " + row["defense"]
        curves[row["attack"]][label].append((float(row["epsilon"]), 100.0 * float(row["fooling_ratio"])))

attacks = sorted(curves)
fig, axes = plt.subplots(1, max(len(attacks), 1), figsize=(4 * max(len(attacks), 1), 3.5), squeeze=False)
for ax, attack in zip(axes[0], attacks):
    for label, points in sorted(curves[attack].items()):
        points.sort()
        ax.plot([100 * e for e, _ in points], [r for _, r in points], marker="o", label=label)
    ax.set_title(attack)
    ax.set_xlabel("epsilon (% of dynamic range)")
    ax.set_ylabel("fooling ratio (%)")
    ax.set_ylim(-2, 102)
    ax.legend(fontsize=7)
fig.tight_layout()
out = os.path.splitext(path)[0] + ".png"
fig.savefig(out, dpi=120)
print(out)
)py";
}

std::string emit_report(const FoolingReport& report, const std::string& csv_path) {
  if (report.rows.empty()) throw ValueError("emit_report: the report is empty");
  const std::string csv = report.to_csv();
  const std::filesystem::path p(csv_path);
  const std::filesystem::path script = p.parent_path() / (p.stem().string() + "_plot.py");
  write_text_file(csv_path, csv);
  write_text_file(script.string(), plot_script(p.filename().string()));
  return script.string();
}

}  // namespace orthonet
