#pragma once

// Comparison models: logistic regression on demographics and/or bag-of-codes
// counts, and RNN/LSTM classifiers over the plain code sequence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "tgcnn/autodiff.hpp"
#include "tgcnn/cohort.hpp"
#include "tgcnn/error.hpp"
#include "tgcnn/gradcheck.hpp"
#include "tgcnn/graph_builder.hpp"
#include "tgcnn/logistic.hpp"
#include "tgcnn/metrics.hpp"
#include "tgcnn/prediction.hpp"
#include "tgcnn/random.hpp"
#include "tgcnn/trainer.hpp"

namespace tgcnn::baselines {

// --------------------------------------------------------------------------
// Logistic regression baselines

enum class FeatureSet { demographics, codes, both };

inline std::string to_string(FeatureSet f) {
  switch (f) {
    case FeatureSet::demographics: return "demographics";
    case FeatureSet::codes: return "codes";
    case FeatureSet::both: return "both";
  }
  return "?";
}

inline FeatureSet parse_feature_set(const std::string& s) {
  if (s == "demographics") return FeatureSet::demographics;
  if (s == "codes") return FeatureSet::codes;
  if (s == "both") return FeatureSet::both;
  throw ConfigError("unknown feature set '" + s + "' (expected demographics, codes or both)");
}

/// Column names in design-matrix order: code counts first, then age, sex, imd.
struct FeatureLayout {
  bool codes = true;
  bool demographics = true;
  std::vector<std::string> names;
};

inline FeatureLayout make_layout(const graph::CodeVocabulary& vocab, FeatureSet set) {
  FeatureLayout l;
  l.codes = set != FeatureSet::demographics;
  l.demographics = set != FeatureSet::codes;
  if (l.codes)
    for (const auto& c : vocab.codes()) l.names.push_back("count:" + c);
  if (l.demographics) l.names.insert(l.names.end(), {"age", "sex_male", "imd_scaled"});
  return l;
}

/// Occurrences of each vocabulary code over all visits of the history.
inline std::vector<double> bag_of_codes(const cohort::PatientHistory& h, const graph::CodeVocabulary& vocab) {
  std::vector<double> counts(vocab.size(), 0.0);
  for (const auto& v : h.visits)
    for (const auto& c : v.codes)
      if (auto i = vocab.index(c)) counts[static_cast<std::size_t>(*i)] += 1.0;
  return counts;
}

inline std::vector<double> feature_vector(const cohort::PatientHistory& h, const graph::CodeVocabulary& vocab, const FeatureLayout& layout) {
  std::vector<double> x;
  if (layout.codes) x = bag_of_codes(h, vocab);
  if (layout.demographics) {
    x.push_back(static_cast<double>(cohort::age_at_prediction(h)));
    x.push_back(h.demographics.sex == cohort::Sex::male ? 1.0 : 0.0);
    x.push_back((h.demographics.imd_quintile - 1) / 4.0);
  }
  if (x.size() != layout.names.size()) throw InternalError("feature vector does not match its layout");
  return x;
}

struct LogisticBaseline {
  FeatureSet features = FeatureSet::both;
  FeatureLayout layout;
  LogitModel model;
};

inline LogisticBaseline fit_logistic_baseline(const std::vector<cohort::PatientHistory>& train, const graph::CodeVocabulary& vocab, FeatureSet set,
                                              const LogitOptions& opt = {}) {
  LogisticBaseline b;
  b.features = set;
  b.layout = make_layout(vocab, set);
  std::vector<double> x, y;
  for (const auto& h : train) {
    const auto row = feature_vector(h, vocab, b.layout);
    x.insert(x.end(), row.begin(), row.end());
    y.push_back(h.label ? 1.0 : 0.0);
  }
  b.model = logit_fit(x, b.layout.names.size(), y, opt);
  return b;
}

/// Predictions sorted by patient id.
inline Predictions predict_logistic(const LogisticBaseline& b, const std::vector<cohort::PatientHistory>& histories, const graph::CodeVocabulary& vocab) {
  std::vector<double> x;
  for (const auto& h : histories) {
    const auto row = feature_vector(h, vocab, b.layout);
    x.insert(x.end(), row.begin(), row.end());
  }
  const auto out = b.layout.names.empty() ? logit_predict_intercept_only(b.model, histories.size())
                                          : logit_predict(b.model, x, b.layout.names.size());
  Predictions preds;
  for (std::size_t i = 0; i < histories.size(); ++i)
    preds.push_back({histories[i].patient_id, out.probabilities[i], out.linear_predictors[i], histories[i].label});
  std::sort(preds.begin(), preds.end(), [](const Prediction& a, const Prediction& c) { return a.patient_id < c.patient_id; });
  return preds;
}

/// `feature,beta,odds_ratio`, intercept first.
inline void write_coefficients_csv(std::ostream& out, const LogisticBaseline& b) {
  out << "feature,beta,odds_ratio\n";
  const auto odds = b.model.odds_ratios();
  for (std::size_t i = 0; i < b.model.beta.size(); ++i) {
    const std::string name = i == 0 ? "(intercept)" : b.layout.names.at(i - 1);
    out << name << ',' << metrics::format_number(b.model.beta[i]) << ',' << metrics::format_number(odds[i]) << '\n';
  }
}

// --------------------------------------------------------------------------
// Sequence baselines

enum class SequenceKind { rnn, lstm };

inline SequenceKind parse_sequence_kind(const std::string& s) {
  if (s == "rnn") return SequenceKind::rnn;
  if (s == "lstm") return SequenceKind::lstm;
  throw ConfigError("unknown sequence model '" + s + "' (expected rnn or lstm)");
}

struct SequenceConfig {
  SequenceKind kind = SequenceKind::lstm;
  int embedding = 16;
  int hidden = 32;
  int max_events = 100;
  double lambda_l2 = 1e-4;
  double lr = 3e-3;
  int batch_size = 32;
  int max_epochs = 30;
  int patience = 6;
  std::uint64_t seed = 1;

  void validate() const {
    if (embedding < 1 || hidden < 1 || max_events < 1) throw ConfigError("sequence model sizes must be >= 1");
    if (lambda_l2 < 0.0 || !(lr > 0.0) || batch_size < 1 || max_epochs < 0 || patience < 1)
      throw ConfigError("invalid sequence model training settings");
  }
};

struct SequenceSet {
  int V = 0;
  std::vector<std::string> ids;
  std::vector<bool> labels;
  std::vector<std::vector<int>> tokens;  ///< vocabulary indices, oldest first

  std::size_t size() const noexcept { return ids.size(); }
  std::vector<double> label_values() const {
    std::vector<double> y;
    for (bool b : labels) y.push_back(b ? 1.0 : 0.0);
    return y;
  }
};

/// Codes in visit order, each visit's codes lexicographically, keeping the most recent `max_events`.
inline std::vector<int> event_sequence(const cohort::PatientHistory& h, const graph::CodeVocabulary& vocab, int max_events) {
  std::vector<int> seq;
  for (const auto& v : h.visits) {
    std::vector<std::string> codes(v.codes.begin(), v.codes.end());
    std::sort(codes.begin(), codes.end());
    for (const auto& c : codes)
      if (auto i = vocab.index(c)) seq.push_back(*i);
  }
  if (seq.size() > static_cast<std::size_t>(max_events)) seq.erase(seq.begin(), seq.end() - max_events);
  return seq;
}

inline SequenceSet encode_sequences(const std::vector<cohort::PatientHistory>& histories, const graph::CodeVocabulary& vocab, const SequenceConfig& cfg) {
  SequenceSet s;
  s.V = static_cast<int>(vocab.size());
  for (const auto& h : histories) {
    s.ids.push_back(h.patient_id);
    s.labels.push_back(h.label);
    s.tokens.push_back(event_sequence(h, vocab, cfg.max_events));
  }
  return s;
}

inline ad::ParameterMap init_sequence_parameters(const SequenceConfig& cfg, int V, std::uint64_t seed) {
  cfg.validate();
  if (V < 1) throw ConfigError("vocabulary must not be empty");
  Rng rng(derive_seed(seed, 0x5E0));
  auto uniform = [&](std::size_t r, std::size_t c, double fan_in) {
    ad::Array a = ad::Array::matrix(r, c);
    const double limit = 1.0 / std::sqrt(fan_in);
    for (auto& v : a.data) v = rng.uniform(-limit, limit);
    return a;
  };
  const auto E = static_cast<std::size_t>(cfg.embedding), H = static_cast<std::size_t>(cfg.hidden);
  const std::size_t gates = cfg.kind == SequenceKind::lstm ? 4 : 1;
  ad::ParameterMap p;
  p["emb"] = uniform(E, static_cast<std::size_t>(V), 1.0);
  p["rnn_wx"] = uniform(gates * H, E, static_cast<double>(E));
  p["rnn_wh"] = uniform(gates * H, H, static_cast<double>(H));
  ad::Array b = ad::Array::column(std::vector<double>(gates * H, 0.0));
  if (cfg.kind == SequenceKind::lstm)
    for (std::size_t r = H; r < 2 * H; ++r) b[r] = 1.0;
  p["rnn_b"] = std::move(b);
  p["out.w"] = uniform(1, H, static_cast<double>(H));
  p["out.b"] = ad::Array::scalar(0.0);
  return p;
}

/// Logits (1 x B). Sequences are right-aligned; steps before a sequence starts leave its state untouched.
inline ad::Var sequence_forward(ad::Tape& tape, const std::map<std::string, ad::Var>& vars, const SequenceSet& data, std::span<const std::size_t> idx,
                                const SequenceConfig& cfg) {
  const std::size_t B = idx.size();
  const auto V = static_cast<std::size_t>(data.V);
  const auto H = static_cast<std::size_t>(cfg.hidden);
  std::size_t T = 0;
  for (auto i : idx) T = std::max(T, data.tokens.at(i).size());
  const ad::Var emb = vars.at("emb"), wx = vars.at("rnn_wx"), wh = vars.at("rnn_wh"), b = vars.at("rnn_b");
  ad::Var h = tape.constant(ad::Array::matrix(H, B));
  ad::Var c = tape.constant(ad::Array::matrix(H, B));
  for (std::size_t step = 0; step < T; ++step) {
    ad::Array onehot = ad::Array::matrix(V, B);
    ad::Array keep = ad::Array::matrix(H, B), take = ad::Array::matrix(H, B);
    for (std::size_t col = 0; col < B; ++col) {
      const auto& seq = data.tokens[idx[col]];
      const std::size_t offset = T - seq.size();
      const bool active = step >= offset;
      if (active) onehot.at(static_cast<std::size_t>(seq[step - offset]), col) = 1.0;
      for (std::size_t r = 0; r < H; ++r) (active ? take : keep).at(r, col) = 1.0;
    }
    const ad::Var x = ad::matmul(emb, tape.constant(std::move(onehot)));
    const ad::Var gates = ad::add_bias(ad::add(ad::matmul(wx, x), ad::matmul(wh, h)), b);
    const ad::Var keep_v = tape.constant(std::move(keep)), take_v = tape.constant(std::move(take));
    if (cfg.kind == SequenceKind::rnn) {
      h = ad::add(ad::mul(keep_v, h), ad::mul(take_v, ad::tanh(gates)));
    } else {
      const ad::Var i = ad::sigmoid(ad::slice(gates, ad::Axis::rows, 0, H));
      const ad::Var f = ad::sigmoid(ad::slice(gates, ad::Axis::rows, H, 2 * H));
      const ad::Var g = ad::tanh(ad::slice(gates, ad::Axis::rows, 2 * H, 3 * H));
      const ad::Var o = ad::sigmoid(ad::slice(gates, ad::Axis::rows, 3 * H, 4 * H));
      const ad::Var c_new = ad::add(ad::mul(f, c), ad::mul(i, g));
      const ad::Var h_new = ad::mul(o, ad::tanh(c_new));
      c = ad::add(ad::mul(keep_v, c), ad::mul(take_v, c_new));
      h = ad::add(ad::mul(keep_v, h), ad::mul(take_v, h_new));
    }
  }
  return ad::add_bias(ad::matmul(vars.at("out.w"), h), vars.at("out.b"));
}

inline ad::Var sequence_penalty(ad::Tape& tape, const std::map<std::string, ad::Var>& vars, const SequenceConfig& cfg) {
  ad::Var total = tape.constant(ad::Array::scalar(0.0));
  if (cfg.lambda_l2 <= 0.0) return total;
  for (const char* name : {"emb", "rnn_wx", "rnn_wh", "out.w"}) total = ad::add(total, ad::scale(ad::l2_norm(vars.at(name)), cfg.lambda_l2));
  return total;
}

inline double sequence_penalty_value(const ad::ParameterMap& params, const SequenceConfig& cfg) {
  double s = 0.0;
  for (const char* name : {"emb", "rnn_wx", "rnn_wh", "out.w"})
    for (double w : params.at(name).data) s += w * w;
  return cfg.lambda_l2 * s;
}

inline train::Problem sequence_problem(const SequenceSet& tr, const SequenceSet& va, const SequenceConfig& cfg, const ad::ParameterMap& params) {
  train::Problem p;
  p.train_labels = tr.label_values();
  p.val_labels = va.label_values();
  for (const auto& [name, _] : params) p.trainable.insert(name);
  p.logits = [&tr, &va, cfg](ad::Tape& tape, const std::map<std::string, ad::Var>& vars, train::Partition part, std::span<const std::size_t> idx,
                             ad::Mode, Rng&, ad::ParameterMap*) {
    return sequence_forward(tape, vars, part == train::Partition::train ? tr : va, idx, cfg);
  };
  p.penalty = [cfg](ad::Tape& tape, const std::map<std::string, ad::Var>& vars) { return sequence_penalty(tape, vars, cfg); };
  p.penalty_value = [cfg](const ad::ParameterMap& params) { return sequence_penalty_value(params, cfg); };
  return p;
}

struct SequenceModel {
  SequenceConfig config;
  ad::ParameterMap params;
  std::vector<train::HistoryRow> history;
  int best_epoch = 0;
};

inline SequenceModel sequence_baseline_train(const std::vector<cohort::PatientHistory>& train_h, const std::vector<cohort::PatientHistory>& val_h,
                                             const graph::CodeVocabulary& vocab, const SequenceConfig& cfg) {
  const auto tr = encode_sequences(train_h, vocab, cfg);
  const auto va = encode_sequences(val_h, vocab, cfg);
  auto params = init_sequence_parameters(cfg, tr.V, cfg.seed);
  const auto problem = sequence_problem(tr, va, cfg, params);
  train::LoopOptions opt;
  opt.lr = cfg.lr;
  opt.batch_size = cfg.batch_size;
  opt.max_epochs = cfg.max_epochs;
  opt.patience = cfg.patience;
  opt.seed = cfg.seed;
  auto loop = train::run_training(std::move(params), problem, opt);
  return SequenceModel{cfg, std::move(loop.params), std::move(loop.history), loop.best_epoch};
}

inline Predictions sequence_predict(const SequenceModel& m, const std::vector<cohort::PatientHistory>& histories, const graph::CodeVocabulary& vocab) {
  const auto data = encode_sequences(histories, vocab, m.config);
  const SequenceSet empty{data.V, {}, {}, {}};
  const auto problem = sequence_problem(data, empty, m.config, m.params);
  const auto logits = train::infer_logits(m.params, problem, train::Partition::train, data.size());
  Predictions out;
  for (std::size_t i = 0; i < data.size(); ++i) out.push_back({data.ids[i], sigmoid(logits[i]), logits[i], data.labels[i]});
  std::sort(out.begin(), out.end(), [](const Prediction& a, const Prediction& b) { return a.patient_id < b.patient_id; });
  return out;
}

/// Full objective over every sample of `data`, for finite-difference checks.
inline ad::LossFn sequence_loss_function(const SequenceSet& data, const SequenceConfig& cfg) {
  return [&data, cfg](const ad::ParameterMap& params, ad::ParameterMap* grads) {
    ad::Tape tape;
    std::set<std::string> names;
    for (const auto& [n, _] : params) names.insert(n);
    const auto vars = train::bind(tape, params, names);
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const ad::Var z = sequence_forward(tape, vars, data, idx, cfg);
    const ad::Var loss = ad::add(ad::binary_cross_entropy(z, data.label_values()), sequence_penalty(tape, vars, cfg));
    if (grads) {
      tape.backward(loss);
      for (const auto& n : names) (*grads)[n] = tape.gradient(vars.at(n));
    }
    return tape.value(loss)[0];
  };
}

}  // namespace tgcnn::baselines
