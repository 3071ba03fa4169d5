#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "orthonet/attacks.hpp"
#include "orthonet/dataset.hpp"
#include "orthonet/defenses.hpp"
#include "orthonet/model.hpp"
#include "orthonet/ortho.hpp"

namespace orthonet {

// A model plus the id it is reported under. Ids must not contain commas or
// line breaks.
struct NamedModel {
  std::string id;
  Model model;
};

struct EvalProtocol {
  std::size_t n_samples = 500;
  std::vector<double> eps_grid;  // sorted, each in [0, kMaxEpsilon]
  // Epsilon is taken from the grid; every other field is used as given.
  std::vector<AttackSpec> attacks;
  std::uint64_t seed = 1;
  std::size_t workers = 1;  // threads for crafting and classification

  void validate() const;
};

struct FoolingRow {
  std::string source;
  std::string target;
  std::string attack;  // attack name, or "clean" for unperturbed inputs
  double epsilon = 0.0;
  std::string defense = "none";
  std::size_t n = 0;
  std::size_t n_fooled = 0;

  double fooling_ratio() const { return n == 0 ? 0.0 : static_cast<double>(n_fooled) / static_cast<double>(n); }
  friend bool operator==(const FoolingRow&, const FoolingRow&) = default;
};

inline constexpr const char* kReportHeader = "source,target,attack,epsilon,defense,n,n_fooled,fooling_ratio";

struct FoolingReport {
  std::vector<FoolingRow> rows;

  // Orders rows by the CSV columns (epsilon numerically).
  void sort();
  const FoolingRow* find(const std::string& target, const std::string& attack, double epsilon,
                         const std::string& defense = "none") const;
  // Header plus one line per row, in the current row order.
  std::string to_csv() const;
  static FoolingReport parse_csv(const std::string& text);

  friend bool operator==(const FoolingReport&, const FoolingReport&) = default;
};

// Indices (ascending) of n examples drawn uniformly without replacement from
// those every model classifies correctly. Throws ValueError naming the pool
// size when fewer than n qualify.
std::vector<std::size_t> select_correct(const std::vector<const Model*>& models, const Dataset& data, std::size_t n,
                                        std::uint64_t seed);

// Crafts every (attack, eps) on `source` over a jointly correct sample and
// counts misclassifications on the source (white-box row, never defended)
// and on each target, with `defense` applied to the target's input.
FoolingReport run_transfer(const NamedModel& source, const std::vector<NamedModel>& targets, const Dataset& data,
                           const EvalProtocol& protocol, const std::optional<DefenseSpec>& defense = std::nullopt);

struct LambdaEntry {
  double lambda = 0.0;
  std::string target_id;  // "ortho-lambda-<lambda>"
  PairSimilarity similarity;
  TrainRecord record;
  Model model;
};

struct LambdaSweep {
  std::vector<LambdaEntry> entries;
  FoolingReport report;  // one transfer run covering every lambda target
};

// Trains one orthogonal model per lambda against `ref` (which is also the
// attack source) and evaluates them together on one shared sample, so rows
// for different lambdas are directly comparable. Similarity is measured
// on `val`.
LambdaSweep sweep_lambda(const Architecture& arch, const NamedModel& ref, const std::vector<double>& lambdas,
                         const Dataset& train, const Dataset& val, const OrthoConfig& base,
                         const EvalProtocol& protocol);

// Table of defenses on the ordinary target against the undefended
// orthogonal target. Rows: the ordinary target under "none" and each spec,
// the orthogonal target under "none", and for each of these an attack
// "clean" row at epsilon 0 giving the fooling a defense causes by itself.
FoolingReport compare_defenses(const NamedModel& source, const NamedModel& ordinary, const NamedModel& orthogonal,
                               const std::vector<DefenseSpec>& specs, const Dataset& data,
                               const EvalProtocol& protocol);

// Plain-text table of fooling percentages: one line per (target, defense),
// a "clean" column when clean rows are present, then one column per
// (attack, epsilon) pair. Rows from different sources are listed in blocks.
std::string format_table(const FoolingReport& report);

// Writes `csv_path` and, next to it, `<stem>_plot.py` rendering fooling
// ratio against epsilon with one panel per attack and one line per target.
// Returns the script path.
std::string emit_report(const FoolingReport& report, const std::string& csv_path);
std::string plot_script(const std::string& csv_name);

}  // namespace orthonet
