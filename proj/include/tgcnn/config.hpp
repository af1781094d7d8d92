#pragma once

// Flat `key = value` run configuration covering the generator, cohort
// preparation, the model, the sequence baselines and evaluation settings.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tgcnn/baselines.hpp"
#include "tgcnn/cohort.hpp"
#include "tgcnn/date.hpp"
#include "tgcnn/error.hpp"
#include "tgcnn/model.hpp"

namespace tgcnn::config {

struct RunConfig {
  std::uint64_t seed = 1;
  cohort::GeneratorConfig generator;
  int horizon_months = 12;
  double test_fraction = 0.10;
  int max_age_gap = 5;
  int n_folds = 5;
  int val_fold = 0;  ///< fold held out for early stopping by `train`
  std::size_t vocab_size = 512;
  model::ModelConfig model;
  baselines::SequenceConfig sequence;
  int bootstrap = 500;
  int search_trials = 20;
  std::string data_dir;  ///< external cohort CSVs; empty means the run's generated cohort
  std::string runs_root = "runs";

  /// Model and baselines train with the run seed.
  model::ModelConfig model_config() const {
    auto m = model;
    m.seed = seed;
    return m;
  }
  baselines::SequenceConfig sequence_config() const {
    auto s = sequence;
    s.seed = seed;
    return s;
  }
  cohort::SplitOptions split_options() const { return {test_fraction, max_age_gap, n_folds}; }
  cohort::AnalysisPeriod analysis_period() const { return generator.period; }
};

namespace detail {

using model::detail::format_double;
using model::detail::parse_bool;
using model::detail::parse_number;

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <class T>
Field number(T RunConfig::*member) {
  return {[member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(c.*member);
            else
              return std::to_string(c.*member);
          },
          [member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<T>(k, v); }};
}

template <class T>
Field gen_number(T cohort::GeneratorConfig::*member) {
  return {[member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(c.generator.*member);
            else
              return std::to_string(c.generator.*member);
          },
          [member](RunConfig& c, const std::string& k, const std::string& v) { c.generator.*member = parse_number<T>(k, v); }};
}

template <class T>
Field seq_number(T baselines::SequenceConfig::*member) {
  return {[member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(c.sequence.*member);
            else
              return std::to_string(c.sequence.*member);
          },
          [member](RunConfig& c, const std::string& k, const std::string& v) { c.sequence.*member = parse_number<T>(k, v); }};
}

inline Date parse_date(const std::string& key, const std::string& v) {
  auto d = Date::parse(v);
  if (!d) throw ConfigError("'" + key + "' expects YYYY-MM-DD, got '" + v + "'");
  return *d;
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["seed"] = number(&RunConfig::seed);
    t["horizon_months"] = number(&RunConfig::horizon_months);
    t["test_fraction"] = number(&RunConfig::test_fraction);
    t["max_age_gap"] = number(&RunConfig::max_age_gap);
    t["n_folds"] = number(&RunConfig::n_folds);
    t["val_fold"] = number(&RunConfig::val_fold);
    t["vocab_size"] = number(&RunConfig::vocab_size);
    t["bootstrap"] = number(&RunConfig::bootstrap);
    t["search_trials"] = number(&RunConfig::search_trials);
    t["data_dir"] = {[](const RunConfig& c) { return c.data_dir; }, [](RunConfig& c, const std::string&, const std::string& v) { c.data_dir = v; }};
    t["runs_root"] = {[](const RunConfig& c) { return c.runs_root; }, [](RunConfig& c, const std::string&, const std::string& v) { c.runs_root = v; }};

    using G = cohort::GeneratorConfig;
    t["gen.n_patients"] = gen_number(&G::n_patients);
    t["gen.case_prevalence"] = gen_number(&G::case_prevalence);
    t["gen.vocabulary_size"] = gen_number(&G::vocabulary_size);
    t["gen.mean_visits"] = gen_number(&G::mean_visits);
    t["gen.mean_codes_per_visit"] = gen_number(&G::mean_codes_per_visit);
    t["gen.min_entry_age"] = gen_number(&G::min_entry_age);
    t["gen.max_entry_age"] = gen_number(&G::max_entry_age);
    t["gen.signal_base_rate"] = gen_number(&G::signal_base_rate);
    t["gen.signal_strength"] = gen_number(&G::signal_strength);
    t["gen.signal_decay_months"] = gen_number(&G::signal_decay_months);
    t["gen.case_extra_visits"] = gen_number(&G::case_extra_visits);
    t["gen.case_extra_window_months"] = gen_number(&G::case_extra_window_months);
    t["gen.zipf_exponent"] = gen_number(&G::zipf_exponent);
    t["gen.deceased_fraction"] = gen_number(&G::deceased_fraction);
    t["gen.emit_prescriptions"] = {[](const RunConfig& c) { return std::string(c.generator.emit_prescriptions ? "true" : "false"); },
                                   [](RunConfig& c, const std::string& k, const std::string& v) { c.generator.emit_prescriptions = parse_bool(k, v); }};
    t["period_start"] = {[](const RunConfig& c) { return c.generator.period.start.to_string(); },
                         [](RunConfig& c, const std::string& k, const std::string& v) { c.generator.period.start = parse_date(k, v); }};
    t["period_end"] = {[](const RunConfig& c) { return c.generator.period.end.to_string(); },
                       [](RunConfig& c, const std::string& k, const std::string& v) { c.generator.period.end = parse_date(k, v); }};

    using S = baselines::SequenceConfig;
    t["seq.embedding"] = seq_number(&S::embedding);
    t["seq.hidden"] = seq_number(&S::hidden);
    t["seq.max_events"] = seq_number(&S::max_events);
    t["seq.lambda_l2"] = seq_number(&S::lambda_l2);
    t["seq.lr"] = seq_number(&S::lr);
    t["seq.batch_size"] = seq_number(&S::batch_size);
    t["seq.max_epochs"] = seq_number(&S::max_epochs);
    t["seq.patience"] = seq_number(&S::patience);

    for (const auto& [key, _] : model::config_key_values(model::ModelConfig{})) {
      if (key == "seed") continue;
      t["model." + key] = {[key](const RunConfig& c) {
                             for (const auto& [k, v] : model::config_key_values(c.model))
                               if (k == key) return v;
                             return std::string();
                           },
                           [key](RunConfig& c, const std::string&, const std::string& v) { model::set_config_value(c.model, key, v); }};
    }
    return t;
  }();
  return table;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::fields()) out.push_back(k);
  return out;
}

inline void set_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto it = detail::fields().find(key);
  if (it == detail::fields().end()) throw ConfigError("unknown configuration key '" + key + "'");
  it->second.set(cfg, key, value);
}

/// Every key with its resolved value, sorted by key.
inline std::vector<std::pair<std::string, std::string>> key_values(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, f] : detail::fields()) out.emplace_back(k, f.get(cfg));
  return out;
}

inline std::string to_text(const RunConfig& cfg) {
  std::string s;
  for (const auto& [k, v] : key_values(cfg)) s += k + " = " + v + "\n";
  return s;
}

/// Applies `key = value` lines; `#` starts a comment. Errors carry the line number.
inline void apply_text(RunConfig& cfg, std::istream& in, const std::string& source, std::set<std::string>* seen = nullptr) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    try {
      set_value(cfg, key, detail::trim(line.substr(eq + 1)));
      if (seen) seen->insert(key);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

/// Reads keys from a file over `base`. A missing file is a data error.
inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}, std::set<std::string>* seen = nullptr) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file '" + path.string() + "'");
  apply_text(base, in, path.string(), seen);
  return base;
}

/// Checks cross-field constraints before any work starts.
inline void validate(const RunConfig& cfg) {
  cohort::validate(cfg.generator);
  cfg.model.validate();
  cfg.sequence.validate();
  if (cfg.horizon_months <= 0) throw ConfigError("horizon_months must be > 0");
  if (!(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0)) throw ConfigError("test_fraction must lie in (0,1)");
  if (cfg.max_age_gap < 0) throw ConfigError("max_age_gap must be >= 0");
  if (cfg.n_folds < 2) throw ConfigError("n_folds must be >= 2");
  if (cfg.val_fold < 0 || cfg.val_fold >= cfg.n_folds) throw ConfigError("val_fold must lie in [0, n_folds)");
  if (cfg.vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  if (cfg.bootstrap < 0) throw ConfigError("bootstrap must be >= 0");
  if (cfg.search_trials < 1) throw ConfigError("search_trials must be >= 1");
  if (cfg.runs_root.empty()) throw ConfigError("runs_root must not be empty");
}

/// Seed from RUN_SEED when neither a file nor a flag set one.
inline std::optional<std::uint64_t> environment_seed() {
  const char* v = std::getenv("RUN_SEED");
  if (!v || !*v) return std::nullopt;
  return detail::parse_number<std::uint64_t>("RUN_SEED", v);
}

/// 64-bit FNV-1a of the resolved configuration, excluding the seed and output locations.
inline std::uint64_t config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, v] : key_values(cfg)) {
    if (k == "seed" || k == "runs_root") continue;
    for (char c : k + "=" + v + "\n") {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

/// `<runs_root>/<hash>-seed<seed>`
inline std::filesystem::path run_directory(const RunConfig& cfg) {
  char name[64];
  std::snprintf(name, sizeof name, "%016llx-seed%llu", static_cast<unsigned long long>(config_hash(cfg)), static_cast<unsigned long long>(cfg.seed));
  return std::filesystem::path(cfg.runs_root) / name;
}

}  // namespace tgcnn::config
