#pragma once

// Fitting, prediction, cross-validation, random search, ablation runs and
// checkpoints for the temporal-graph CNN.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "tgcnn/gradcheck.hpp"
#include "tgcnn/metrics.hpp"
#include "tgcnn/model.hpp"
#include "tgcnn/prediction.hpp"
#include "tgcnn/trainer.hpp"

namespace tgcnn::model {

/// Appends the prescription codes when the configuration asks for them.
inline graph::CodeVocabulary vocabulary_for(const graph::CodeVocabulary& base, const ModelConfig& cfg) {
  if (cfg.use_prescriptions && !base.has_prescriptions()) return base.with_prescriptions();
  return base;
}

inline train::Problem make_problem(const EncodedSet& train_set, const EncodedSet& val_set, const ModelConfig& cfg, const ParameterMap& params) {
  train::Problem p;
  p.train_labels = train_set.labels();
  p.val_labels = val_set.labels();
  p.trainable = trainable_names(params);
  p.logits = [&train_set, &val_set, cfg](ad::Tape& tape, const VarMap& vars, train::Partition part, std::span<const std::size_t> idx, ad::Mode mode,
                                         Rng& rng, ParameterMap* buffers) {
    const EncodedSet& data = part == train::Partition::train ? train_set : val_set;
    return forward(tape, vars, data, idx, cfg, ForwardOptions{mode, &rng, buffers});
  };
  p.penalty = [cfg](ad::Tape& tape, const VarMap& vars) { return penalty(tape, vars, cfg); };
  p.penalty_value = [cfg](const ParameterMap& params) { return penalty_value(params, cfg); };
  return p;
}

struct TrainResult {
  ParameterMap params;
  std::vector<train::HistoryRow> history;
  int best_epoch = 0;
};

inline train::LoopOptions loop_options(const ModelConfig& cfg) {
  train::LoopOptions o;
  o.lr = cfg.lr;
  o.batch_size = cfg.batch_size;
  o.max_epochs = cfg.max_epochs;
  o.patience = cfg.patience;
  o.seed = cfg.seed;
  return o;
}

/// Initialises from the seed, fixes the age scaling on the training set and runs the loop.
inline TrainResult fit(const EncodedSet& train_set, const EncodedSet& val_set, const ModelConfig& cfg) {
  cfg.validate();
  if (train_set.V != val_set.V && val_set.size() > 0) throw InternalError("fit: train and validation vocabularies differ");
  ParameterMap params = init_parameters(cfg, train_set.V, cfg.seed);
  params["demo.age_stats"] = age_statistics(train_set);
  const auto problem = make_problem(train_set, val_set, cfg, params);
  auto loop = train::run_training(std::move(params), problem, loop_options(cfg));
  return TrainResult{std::move(loop.params), std::move(loop.history), loop.best_epoch};
}

inline TrainResult train_model(const std::vector<cohort::PatientHistory>& train_histories, const std::vector<cohort::PatientHistory>& val_histories,
                               const graph::CodeVocabulary& vocab, const ModelConfig& cfg) {
  const auto v = vocabulary_for(vocab, cfg);
  return fit(encode(train_histories, v, cfg), encode(val_histories, v, cfg), cfg);
}

/// Inference-mode predictions sorted by patient id.
inline Predictions predict_encoded(const ParameterMap& params, const EncodedSet& data, const ModelConfig& cfg) {
  const EncodedSet empty{data.V, data.K, {}};
  const auto problem = make_problem(data, empty, cfg, params);
  const auto logits = train::infer_logits(params, problem, train::Partition::train, data.size());
  Predictions out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& p = data.patients[i];
    out.push_back({p.patient_id, baselines::sigmoid(logits[i]), logits[i], p.label});
  }
  std::sort(out.begin(), out.end(), [](const Prediction& a, const Prediction& b) { return a.patient_id < b.patient_id; });
  return out;
}

inline Predictions predict(const ParameterMap& params, const std::vector<cohort::PatientHistory>& histories, const graph::CodeVocabulary& vocab,
                           const ModelConfig& cfg) {
  return predict_encoded(params, encode(histories, vocabulary_for(vocab, cfg), cfg), cfg);
}

/// Full objective on a fixed batch as a function of the parameters, for
/// finite-difference checks. Batch norm uses batch statistics; dropout masks
/// are redrawn from the same seed on every call.
inline ad::LossFn loss_function(const EncodedSet& data, const ModelConfig& cfg, std::uint64_t dropout_seed = 1) {
  return [&data, cfg, dropout_seed](const ParameterMap& params, ParameterMap* grads) {
    ad::Tape tape;
    const auto trainable = trainable_names(params);
    const auto vars = train::bind(tape, params, trainable);
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(dropout_seed);
    const Var z = forward(tape, vars, data, idx, cfg, ForwardOptions{ad::Mode::train, &rng, nullptr});
    const Var loss = objective(tape, vars, z, data.labels(), cfg);
    if (grads) {
      tape.backward(loss);
      for (const auto& name : trainable) (*grads)[name] = tape.gradient(vars.at(name));
    }
    return tape.value(loss)[0];
  };
}

// --------------------------------------------------------------------------
// Cross-validation

struct FoldRecord {
  int fold = 0;
  double train_auroc = std::numeric_limits<double>::quiet_NaN();
  double val_auroc = std::numeric_limits<double>::quiet_NaN();
  double train_cslope = std::numeric_limits<double>::quiet_NaN();
  double val_cslope = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  int best_epoch = 0;
};

struct MeanSd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double sd = std::numeric_limits<double>::quiet_NaN();
};

/// Mean and sample SD over the finite values.
inline MeanSd mean_sd(const std::vector<double>& values) {
  std::vector<double> v;
  for (double x : values)
    if (std::isfinite(x)) v.push_back(x);
  MeanSd out;
  if (v.empty()) return out;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  out.mean = m;
  out.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return out;
}

struct CvResult {
  std::vector<FoldRecord> folds;
  MeanSd train_auroc, val_auroc, train_cslope, val_cslope, val_acc;
};

inline CvResult summarize_folds(std::vector<FoldRecord> folds) {
  CvResult r;
  std::vector<double> ta, va, tc, vc, acc;
  for (const auto& f : folds) {
    ta.push_back(f.train_auroc);
    va.push_back(f.val_auroc);
    tc.push_back(f.train_cslope);
    vc.push_back(f.val_cslope);
    acc.push_back(f.val_acc);
  }
  r.folds = std::move(folds);
  r.train_auroc = mean_sd(ta);
  r.val_auroc = mean_sd(va);
  r.train_cslope = mean_sd(tc);
  r.val_cslope = mean_sd(vc);
  r.val_acc = mean_sd(acc);
  return r;
}

inline double accuracy(const Predictions& preds) {
  if (preds.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t ok = 0;
  for (const auto& p : preds) ok += ((p.probability >= 0.5) == p.label) ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(preds.size());
}

/// k models, each trained without its fold and scored on it. Fold f trains with seed + f.
inline CvResult cross_validate(const std::vector<cohort::PatientHistory>& histories, const std::map<std::string, int>& fold_of,
                               const graph::CodeVocabulary& vocab, const ModelConfig& cfg) {
  int n_folds = 0;
  for (const auto& h : histories) {
    auto it = fold_of.find(h.patient_id);
    if (it == fold_of.end()) throw DataError("cross_validate: patient '" + h.patient_id + "' has no fold");
    n_folds = std::max(n_folds, it->second + 1);
  }
  if (n_folds < 2) throw ConfigError("cross-validation needs at least two folds");
  const auto v = vocabulary_for(vocab, cfg);
  const EncodedSet all = encode(histories, v, cfg);
  std::vector<FoldRecord> records;
  for (int f = 0; f < n_folds; ++f) {
    EncodedSet tr{all.V, all.K, {}}, va{all.V, all.K, {}};
    for (const auto& p : all.patients) (fold_of.at(p.patient_id) == f ? va : tr).patients.push_back(p);
    if (tr.size() == 0 || va.size() == 0) throw DataError("cross_validate: fold " + std::to_string(f) + " is empty");
    ModelConfig fold_cfg = cfg;
    fold_cfg.seed = cfg.seed + static_cast<std::uint64_t>(f);
    const auto result = fit(tr, va, fold_cfg);
    const auto tr_rep = metrics::point_metrics(predict_encoded(result.params, tr, fold_cfg));
    const auto va_pred = predict_encoded(result.params, va, fold_cfg);
    const auto va_rep = metrics::point_metrics(va_pred);
    FoldRecord rec;
    rec.fold = f;
    rec.train_auroc = tr_rep.auroc.value_or(rec.train_auroc);
    rec.val_auroc = va_rep.auroc.value_or(rec.val_auroc);
    rec.train_cslope = tr_rep.calibration_slope.value_or(rec.train_cslope);
    rec.val_cslope = va_rep.calibration_slope.value_or(rec.val_cslope);
    rec.val_acc = accuracy(va_pred);
    rec.best_epoch = result.best_epoch;
    records.push_back(rec);
  }
  return summarize_folds(std::move(records));
}

/// "0.812 (0.031)"; "NA" when undefined.
inline std::string format_mean_sd(const MeanSd& m, int digits = 3) {
  if (!std::isfinite(m.mean)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f (%.*f)", digits, m.mean, digits, std::isfinite(m.sd) ? m.sd : 0.0);
  return buf;
}

inline void write_folds_csv(std::ostream& out, const CvResult& r) {
  out << "fold,train_auroc,val_auroc,train_cslope,val_cslope,val_acc,best_epoch\n";
  for (const auto& f : r.folds)
    out << f.fold << ',' << metrics::format_number(f.train_auroc) << ',' << metrics::format_number(f.val_auroc) << ','
        << metrics::format_number(f.train_cslope) << ',' << metrics::format_number(f.val_cslope) << ',' << metrics::format_number(f.val_acc)
        << ',' << f.best_epoch << '\n';
}

/// One row per model: mean (SD) of the fold metrics.
inline void write_cv_table(std::ostream& out, const std::vector<std::pair<std::string, CvResult>>& rows) {
  out << "model,train_auroc,val_auroc,train_cslope,val_cslope,val_acc\n";
  for (const auto& [name, r] : rows)
    out << name << ",\"" << format_mean_sd(r.train_auroc) << "\",\"" << format_mean_sd(r.val_auroc) << "\",\"" << format_mean_sd(r.train_cslope)
        << "\",\"" << format_mean_sd(r.val_cslope) << "\",\"" << format_mean_sd(r.val_acc) << "\"\n";
}

// --------------------------------------------------------------------------
// Random search

struct SearchRanges {
  double lr_min = 1e-4, lr_max = 1e-2;
  double l1_min = 1e-6, l1_max = 1e-3;
  double l2_min = 1e-6, l2_max = 1e-2;
  double lg_min = 1e-6, lg_max = 1e-2;
  int filters_min = 4, filters_max = 64;
  int depth_min = 2, depth_max = 5;
  int hidden_min = 16, hidden_max = 128;
  double dropout_min = 0.1, dropout_max = 0.5;
};

/// Draws one configuration; log-uniform for rates and strengths, uniform otherwise.
inline ModelConfig sample_config(const ModelConfig& base, const SearchRanges& r, Rng& rng) {
  auto log_uniform = [&rng](double lo, double hi) { return std::exp(rng.uniform(std::log(lo), std::log(hi))); };
  ModelConfig c = base;
  c.lr = log_uniform(r.lr_min, r.lr_max);
  c.lambda_l1 = log_uniform(r.l1_min, r.l1_max);
  c.lambda_l2 = log_uniform(r.l2_min, r.l2_max);
  c.lambda_g = log_uniform(r.lg_min, r.lg_max);
  c.n_filters = static_cast<int>(rng.uniform_int(r.filters_min, r.filters_max));
  c.filter_depth = static_cast<int>(rng.uniform_int(r.depth_min, std::min(r.depth_max, base.K)));
  c.lstm_hidden = static_cast<int>(rng.uniform_int(r.hidden_min, r.hidden_max));
  c.dropout = rng.uniform(r.dropout_min, r.dropout_max);
  return c;
}

inline std::vector<ModelConfig> sample_trials(const ModelConfig& base, const SearchRanges& r, int n_trials, std::uint64_t seed) {
  if (n_trials < 1) throw ConfigError("random search needs at least one trial");
  Rng rng(derive_seed(seed, 0x5EA));
  std::vector<ModelConfig> out;
  for (int t = 0; t < n_trials; ++t) {
    out.push_back(sample_config(base, r, rng));
    out.back().seed = base.seed + static_cast<std::uint64_t>(t);
  }
  return out;
}

struct TrialScore {
  double val_acc = 0.0;
  double val_auroc = 0.0;
};

/// Highest mean validation accuracy; AUROC only separates equal accuracies. Earliest trial wins full ties.
inline std::size_t select_best(const std::vector<TrialScore>& scores) {
  if (scores.empty()) throw ConfigError("select_best: no trials");
  auto key = [](const TrialScore& s) {
    return std::pair{std::isfinite(s.val_acc) ? s.val_acc : -1.0, std::isfinite(s.val_auroc) ? s.val_auroc : -1.0};
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (key(scores[i]) > key(scores[best])) best = i;
  return best;
}

struct SearchResult {
  std::vector<ModelConfig> trials;
  std::vector<CvResult> results;
  std::size_t best = 0;
};

inline SearchResult random_search(const std::vector<cohort::PatientHistory>& histories, const std::map<std::string, int>& fold_of,
                                  const graph::CodeVocabulary& vocab, const ModelConfig& base, int n_trials = 20, std::uint64_t seed = 1,
                                  const SearchRanges& ranges = {}) {
  SearchResult s;
  s.trials = sample_trials(base, ranges, n_trials, seed);
  std::vector<TrialScore> scores;
  for (const auto& cfg : s.trials) {
    s.results.push_back(cross_validate(histories, fold_of, vocab, cfg));
    scores.push_back({s.results.back().val_acc.mean, s.results.back().val_auroc.mean});
  }
  s.best = select_best(scores);
  return s;
}

// --------------------------------------------------------------------------
// Ablation

struct AblationRow {
  std::string name;
  ModelConfig config;
  CvResult cv;
};

/// Cross-validates every named variant of `base`.
inline std::vector<AblationRow> run_ablation(const std::vector<cohort::PatientHistory>& histories, const std::map<std::string, int>& fold_of,
                                             const graph::CodeVocabulary& vocab, const ModelConfig& base,
                                             const std::vector<std::string>& names = ablation_names()) {
  std::vector<AblationRow> rows;
  for (const auto& name : names) {
    const ModelConfig cfg = ablation_config(name, base);
    rows.push_back({name, cfg, cross_validate(histories, fold_of, vocab, cfg)});
  }
  return rows;
}

// --------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointMagic = "TGCNN v1";

namespace detail {

inline void write_le_doubles(std::ostream& out, const std::vector<double>& values) {
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xFF);
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

inline std::vector<double> read_le_doubles(std::istream& in, std::size_t n) {
  std::vector<double> out(n);
  for (auto& v : out) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw DataError("checkpoint: truncated array data");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    v = std::bit_cast<double>(bits);
  }
  return out;
}

}  // namespace detail

/// `TGCNN v1`, then per array `array <name> <rank> <dims...>` followed by raw
/// little-endian float64 data and a newline, then `config` and key=value lines.
inline void write_checkpoint(std::ostream& out, const ParameterMap& params, const ModelConfig& cfg) {
  out << kCheckpointMagic << '\n';
  for (const auto& [name, a] : params) {
    out << "array " << name << ' ' << a.shape.size();
    for (auto d : a.shape) out << ' ' << d;
    out << '\n';
    detail::write_le_doubles(out, a.data);
    out << '\n';
  }
  out << "config\n";
  for (const auto& [k, v] : config_key_values(cfg)) out << k << '=' << v << '\n';
}

struct Checkpoint {
  ParameterMap params;
  ModelConfig config;
};

inline Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) throw DataError("checkpoint: missing 'TGCNN v1' header");
  Checkpoint ck;
  while (std::getline(in, line)) {
    if (line == "config") break;
    std::istringstream head(line);
    std::string tag, name;
    std::size_t rank = 0;
    if (!(head >> tag >> name >> rank) || tag != "array") throw DataError("checkpoint: malformed array header '" + line + "'");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape)
      if (!(head >> d)) throw DataError("checkpoint: malformed shape for '" + name + "'");
    const std::size_t n = ad::Array::count(shape);
    ck.params[name] = ad::Array(shape, detail::read_le_doubles(in, n));
    if (in.get() != '\n') throw DataError("checkpoint: corrupt record for '" + name + "'");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("checkpoint: malformed config line '" + line + "'");
    set_config_value(ck.config, line.substr(0, eq), line.substr(eq + 1));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParameterMap& params, const ModelConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  write_checkpoint(out, params, cfg);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(in);
}

}  // namespace tgcnn::model
