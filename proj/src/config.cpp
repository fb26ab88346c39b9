#include "taskvec/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace taskvec {
namespace {

struct Value {
  enum class Kind { kBool, kInt, kFloat, kString, kArray };
  Kind kind = Kind::kInt;
  bool b = false;
  std::int64_t i = 0;
  double d = 0.0;
  std::string s;
  std::vector<Value> items;
};

std::string trim(const std::string& s) {
  std::size_t a = 0;
  std::size_t b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

// Strips a trailing comment, honoring quoted strings.
std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    if (line[k] == '"') in_string = !in_string;
    if (line[k] == '#' && !in_string) return line.substr(0, k);
  }
  return line;
}

Value parse_scalar(const std::string& text, const std::string& where) {
  if (text == "true" || text == "false") {
    Value v;
    v.kind = Value::Kind::kBool;
    v.b = text == "true";
    return v;
  }
  if (text.size() >= 2 && text.front() == '"' && text.back() == '"') {
    Value v;
    v.kind = Value::Kind::kString;
    v.s = text.substr(1, text.size() - 2);
    return v;
  }
  const bool integral =
      text.find_first_of(".eE") == std::string::npos || text == "e";
  if (integral) {
    std::int64_t out = 0;
    const auto [ptr, ec] =
        std::from_chars(text.data(), text.data() + text.size(), out);
    if (ec == std::errc() && ptr == text.data() + text.size()) {
      Value v;
      v.kind = Value::Kind::kInt;
      v.i = out;
      v.d = static_cast<double>(out);
      return v;
    }
  }
  try {
    std::size_t used = 0;
    const double out = std::stod(text, &used);
    if (used == text.size()) {
      Value v;
      v.kind = Value::Kind::kFloat;
      v.d = out;
      return v;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError(where + ": cannot parse value '" + text + "'");
}

Value parse_value(const std::string& text, const std::string& where) {
  if (!text.empty() && text.front() == '[') {
    if (text.back() != ']') throw ConfigError(where + ": unterminated array");
    Value v;
    v.kind = Value::Kind::kArray;
    std::string body = text.substr(1, text.size() - 2);
    std::string item;
    bool in_string = false;
    for (char c : body) {
      if (c == '"') in_string = !in_string;
      if (c == ',' && !in_string) {
        const std::string t = trim(item);
        if (t.empty()) throw ConfigError(where + ": empty array element");
        v.items.push_back(parse_scalar(t, where));
        item.clear();
      } else {
        item += c;
      }
    }
    const std::string t = trim(item);
    if (!t.empty()) v.items.push_back(parse_scalar(t, where));
    return v;
  }
  return parse_scalar(text, where);
}

using Section = std::map<std::string, Value>;

struct RawConfig {
  std::map<std::string, Section> sections;
};

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> table = {
      {"suite",
       {"seed", "n_tasks", "dim", "classes", "heterogeneity", "rank",
        "train_per_task", "test_per_task", "mean_scale", "noise",
        "max_angle"}},
      {"finetune", {"steps", "lr"}},
      {"train",
       {"regimes", "seeds", "prior", "gating", "batch", "lr", "weight_decay",
        "epochs", "lambda_reg", "k_train", "k_report", "slab_var",
        "pi_prior"}},
      {"gate", {"psi1", "psi2", "rho", "eta"}},
      {"reg", {"lambda_b", "lambda_e", "lambda_u", "margin", "eps"}},
  };
  return table;
}

RawConfig parse_raw(const std::string& text) {
  RawConfig raw;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string body = trim(strip_comment(line));
    if (body.empty()) continue;
    const std::string where = "line " + std::to_string(lineno);
    if (body.front() == '[') {
      if (body.back() != ']') {
        throw ConfigError(where + ": malformed section header '" + body + "'");
      }
      section = trim(body.substr(1, body.size() - 2));
      if (!known_keys().count(section)) {
        throw ConfigError(where + ": unknown section [" + section + "]");
      }
      raw.sections[section];  // a section may legitimately stay empty
      continue;
    }
    const std::size_t eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + ": expected 'key = value', got '" + body +
                        "'");
    }
    if (section.empty()) {
      throw ConfigError(where + ": key outside of any [section]");
    }
    const std::string key = trim(body.substr(0, eq));
    const std::string val = trim(body.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (val.empty()) {
      throw ConfigError(where + ": empty value for " + section + "." + key);
    }
    if (!known_keys().at(section).count(key)) {
      throw ConfigError(where + ": unknown key " + section + "." + key);
    }
    if (raw.sections[section].count(key)) {
      throw ConfigError(where + ": duplicate key " + section + "." + key);
    }
    raw.sections[section].emplace(key,
                                  parse_value(val, section + "." + key));
  }
  return raw;
}

// Typed lookups; every message names section.key.
class Reader {
 public:
  explicit Reader(const RawConfig& raw) : raw_(raw) {}

  bool has(const std::string& sec, const std::string& key) const {
    const auto it = raw_.sections.find(sec);
    return it != raw_.sections.end() && it->second.count(key) > 0;
  }

  const Value& get(const std::string& sec, const std::string& key) const {
    return raw_.sections.at(sec).at(key);
  }

  void read_int(const std::string& sec, const std::string& key,
                int* out) const {
    if (!has(sec, key)) return;
    const Value& v = get(sec, key);
    if (v.kind != Value::Kind::kInt) {
      throw ConfigError(sec + "." + key + " must be an integer");
    }
    *out = static_cast<int>(v.i);
  }

  void read_u64(const std::string& sec, const std::string& key,
                std::uint64_t* out) const {
    if (!has(sec, key)) return;
    const Value& v = get(sec, key);
    if (v.kind != Value::Kind::kInt || v.i < 0) {
      throw ConfigError(sec + "." + key + " must be a nonnegative integer");
    }
    *out = static_cast<std::uint64_t>(v.i);
  }

  void read_double(const std::string& sec, const std::string& key,
                   double* out) const {
    if (!has(sec, key)) return;
    const Value& v = get(sec, key);
    if (v.kind != Value::Kind::kInt && v.kind != Value::Kind::kFloat) {
      throw ConfigError(sec + "." + key + " must be a number");
    }
    *out = v.kind == Value::Kind::kInt ? static_cast<double>(v.i) : v.d;
  }

  void read_bool(const std::string& sec, const std::string& key,
                 bool* out) const {
    if (!has(sec, key)) return;
    const Value& v = get(sec, key);
    if (v.kind != Value::Kind::kBool) {
      throw ConfigError(sec + "." + key + " must be true or false");
    }
    *out = v.b;
  }

  void read_string(const std::string& sec, const std::string& key,
                   std::string* out) const {
    if (!has(sec, key)) return;
    const Value& v = get(sec, key);
    if (v.kind != Value::Kind::kString) {
      throw ConfigError(sec + "." + key + " must be a quoted string");
    }
    *out = v.s;
  }

 private:
  const RawConfig& raw_;
};

}  // namespace

void ExperimentPlan::validate() const {
  suite.validate();
  base.validate();
  if (finetune_steps < 0) {
    throw ConfigError("finetune.steps must be >= 0");
  }
  if (!(finetune_lr > 0.0) || !std::isfinite(finetune_lr)) {
    throw ConfigError("finetune.lr must be positive and finite");
  }
  if (regimes.empty()) throw ConfigError("train.regimes must not be empty");
  if (seeds.empty()) throw ConfigError("train.seeds must not be empty");
  std::set<std::uint64_t> seen(seeds.begin(), seeds.end());
  if (seen.size() != seeds.size()) {
    throw ConfigError("train.seeds must not repeat");
  }
}

ExperimentPlan parse_plan(const std::string& text) {
  const RawConfig raw = parse_raw(text);
  const Reader r(raw);
  ExperimentPlan plan;

  r.read_u64("suite", "seed", &plan.suite.seed);
  r.read_int("suite", "n_tasks", &plan.suite.n_tasks);
  r.read_int("suite", "dim", &plan.suite.dim);
  r.read_int("suite", "classes", &plan.suite.classes);
  r.read_double("suite", "heterogeneity", &plan.suite.heterogeneity);
  r.read_int("suite", "rank", &plan.suite.rank);
  r.read_int("suite", "train_per_task", &plan.suite.train_per_task);
  r.read_int("suite", "test_per_task", &plan.suite.test_per_task);
  r.read_double("suite", "mean_scale", &plan.suite.mean_scale);
  r.read_double("suite", "noise", &plan.suite.noise);
  r.read_double("suite", "max_angle", &plan.suite.max_angle);

  r.read_int("finetune", "steps", &plan.finetune_steps);
  r.read_double("finetune", "lr", &plan.finetune_lr);

  if (r.has("train", "regimes")) {
    const Value& v = r.get("train", "regimes");
    if (v.kind != Value::Kind::kArray) {
      throw ConfigError("train.regimes must be an array of strings");
    }
    plan.regimes.clear();
    for (const Value& item : v.items) {
      if (item.kind != Value::Kind::kString) {
        throw ConfigError("train.regimes must be an array of strings");
      }
      try {
        plan.regimes.push_back(parse_regime(item.s));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("train.regimes: ") + e.what());
      }
    }
  }
  if (r.has("train", "seeds")) {
    const Value& v = r.get("train", "seeds");
    if (v.kind != Value::Kind::kArray) {
      throw ConfigError("train.seeds must be an array of integers");
    }
    plan.seeds.clear();
    for (const Value& item : v.items) {
      if (item.kind != Value::Kind::kInt || item.i < 0) {
        throw ConfigError("train.seeds must be nonnegative integers");
      }
      plan.seeds.push_back(static_cast<std::uint64_t>(item.i));
    }
  }
  if (r.has("train", "prior")) {
    std::string prior;
    r.read_string("train", "prior", &prior);
    if (prior == "gaussian") {
      plan.base.prior.kind = PriorSpec::Kind::kGaussian;
    } else if (prior == "spike_slab") {
      plan.base.prior.kind = PriorSpec::Kind::kSpikeSlab;
    } else {
      throw ConfigError("train.prior must be \"gaussian\" or \"spike_slab\"");
    }
  }
  r.read_bool("train", "gating", &plan.base.gating);
  r.read_int("train", "batch", &plan.base.batch);
  r.read_double("train", "lr", &plan.base.lr);
  r.read_double("train", "weight_decay", &plan.base.weight_decay);
  r.read_int("train", "epochs", &plan.base.epochs);
  r.read_double("train", "lambda_reg", &plan.base.lambda_reg);
  r.read_int("train", "k_train", &plan.base.k_train);
  r.read_int("train", "k_report", &plan.base.k_report);
  r.read_double("train", "slab_var", &plan.base.prior.slab_var);
  r.read_double("train", "pi_prior", &plan.base.prior.pi_prior);

  r.read_double("gate", "psi1", &plan.base.gate.psi1);
  r.read_double("gate", "psi2", &plan.base.gate.psi2);
  r.read_double("gate", "rho", &plan.base.gate.rho);
  r.read_double("gate", "eta", &plan.base.gate.eta);
  // The exploration anchor is the configured starting point.
  plan.base.gate.psi1_0 = plan.base.gate.psi1;
  plan.base.gate.psi2_0 = plan.base.gate.psi2;

  r.read_double("reg", "lambda_b", &plan.base.reg.lambda_b);
  r.read_double("reg", "lambda_e", &plan.base.reg.lambda_e);
  r.read_double("reg", "lambda_u", &plan.base.reg.lambda_u);
  r.read_double("reg", "margin", &plan.base.reg.margin);
  r.read_double("reg", "eps", &plan.base.reg.eps);

  try {
    plan.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return plan;
}

ExperimentPlan load_plan(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_plan(buf.str());
}

}  // namespace taskvec
