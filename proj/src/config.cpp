#include "orthonet/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "orthonet/error.hpp"

namespace orthonet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

double parse_double(const std::string& text, const std::string& what) {
  double v = 0.0;
  const char* first = text.data();
  const char* last = first + text.size();
  if (!text.empty() && *first == '+') ++first;
  auto [p, ec] = std::from_chars(first, last, v);
  if (text.empty() || ec != std::errc() || p != last) {
    throw ConfigError(what + ": expected a number, got '" + text + "'");
  }
  return v;
}

const std::map<std::string, std::string>& Config::known_keys() {
  static const std::map<std::string, std::string> keys = {
      // data
      {"dataset.kind", "synthetic"},  // synthetic | idx | csv
      {"dataset.path", ""},           // idx images file or csv file
      {"dataset.labels_path", ""},    // idx labels file
      {"dataset.val_fraction", "0.4"},
      {"dataset.synth.classes", "2"},
      {"dataset.synth.n", "2000"},
      {"dataset.synth.hw", "16"},
      {"dataset.synth.seed", "1"},
      {"dataset.synth.noise", "0.05"},
      {"dataset.synth.contrast", "0.035"},
      // model
      {"model.arch", "mlp"},  // mlp | cnn | full descriptor text
      {"model.hidden", "128"},
      // training
      {"train.lr", "0.002"},
      {"train.momentum", "0.9"},
      {"train.batch", "32"},
      {"train.lambda", "0"},
      {"train.max_epochs", "100"},
      {"train.epochs_check", "20"},
      {"train.seed", "1"},
      {"train.penalty", "signed"},  // signed | absolute
      // evaluation
      {"eval.n_samples", "500"},
      {"eval.eps_grid", "0,0.005,0.01,0.02,0.03,0.05,0.08"},
      {"eval.attacks", "fgsm,ifgsm,mifgsm,pgd"},
      {"eval.iters", "10"},
      {"eval.mu", "1"},
      {"eval.random_start", "true"},
      {"eval.seed", "1"},
      {"eval.targets", ""},  // checkpoint paths, comma separated
      {"eval.defenses", ""},
      {"eval.lambdas", "0,5,30,100"},
      {"eval.workers", "1"},
      {"eval.input", ""},  // idx prefix for attack/defend/evaluate, report csv for report
      {"defense.tvm_iters", "50"},
      {"defense.tvm_step", "0.1"},
      {"defense.bilateral_sigma_range", "0.1"},
      // orthogonal training
      {"reference.checkpoint", ""},
  };
  return keys;
}

Config Config::parse(const std::string& text, const std::string& origin) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (!known_keys().contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    if (cfg.has(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
    cfg.values_[key] = trim(line.substr(eq + 1));
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path);
}

void Config::set(const std::string& key, const std::string& value) {
  if (!known_keys().contains(key)) throw ConfigError("unknown key '" + key + "'");
  values_[key] = trim(value);
}

std::string Config::get(const std::string& key) const {
  if (auto it = values_.find(key); it != values_.end()) return it->second;
  auto it = known_keys().find(key);
  if (it == known_keys().end()) throw ConfigError("unknown key '" + key + "'");
  return it->second;
}

double Config::get_double(const std::string& key) const { return parse_double(get(key), key); }

std::int64_t Config::get_int(const std::string& key) const {
  const std::string s = get(key);
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError(key + ": expected an integer, got '" + s + "'");
  }
  return v;
}

std::uint64_t Config::get_uint(const std::string& key) const {
  const std::int64_t v = get_int(key);
  if (v < 0) throw ConfigError(key + ": must be non-negative");
  return static_cast<std::uint64_t>(v);
}

bool Config::get_bool(const std::string& key) const {
  const std::string s = get(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

std::vector<std::string> Config::get_list(const std::string& key) const {
  std::vector<std::string> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> Config::get_double_list(const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : get_list(key)) out.push_back(parse_double(s, key));
  return out;
}

Config Config::resolved() const {
  Config out = *this;
  for (const auto& [k, v] : known_keys()) {
    if (!out.has(k)) out.values_[k] = v;
  }
  return out;
}

std::string Config::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace orthonet
