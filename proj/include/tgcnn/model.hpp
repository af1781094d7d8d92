#pragma once

// The temporal-graph CNN: time transform, per-stream sparse 3D convolution,
// batch norm, leaky ReLU, LSTM (or mean pooling), dropout, dense head with
// demographic inputs, and the composite training objective.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tgcnn/autodiff.hpp"
#include "tgcnn/cohort.hpp"
#include "tgcnn/error.hpp"
#include "tgcnn/graph_builder.hpp"
#include "tgcnn/log.hpp"
#include "tgcnn/random.hpp"

namespace tgcnn::model {

using ad::Array;
using ad::ParameterMap;
using ad::Var;

struct ModelConfig {
  // component switches (one per ablation column)
  bool use_gamma = true;
  bool use_exp = true;
  bool use_demographics = true;
  bool use_two_streams = true;
  bool use_graph_reg = true;
  bool use_l2 = true;
  bool use_l1 = true;
  bool use_lstm = true;
  bool use_elapsed_time = true;
  bool use_prescriptions = false;
  bool share_gamma = false;  ///< one decay rate for both streams

  int n_filters = 16;
  int filter_depth = 3;
  int coarse_stride = 1;
  int fine_stride = 2;
  int lstm_hidden = 64;
  std::vector<int> dense_sizes{32};
  double dropout = 0.3;

  double lambda_l1 = 1e-5;
  double lambda_l2 = 1e-4;
  double lambda_g = 1e-4;

  double lr = 3e-3;
  int batch_size = 32;
  int max_epochs = 30;
  int patience = 6;
  std::uint64_t seed = 1;

  int K = 100;
  bool cap_visits = false;
  bool intra_visit_edges = false;

  int n_streams() const { return use_two_streams ? 2 : 1; }
  int stride(int stream) const { return stream == 0 ? coarse_stride : fine_stride; }
  graph::TensorOptions tensor_options() const { return {K, cap_visits, intra_visit_edges}; }

  void validate() const {
    if (K < 1) throw ConfigError("K must be >= 1");
    if (filter_depth < 1 || filter_depth > K) throw ConfigError("filter_depth must lie in [1, K]");
    if (coarse_stride < 1 || fine_stride < 1) throw ConfigError("strides must be >= 1");
    if (n_filters < 1) throw ConfigError("n_filters must be >= 1");
    if (lstm_hidden < 1) throw ConfigError("lstm_hidden must be >= 1");
    for (int s : dense_sizes)
      if (s < 1) throw ConfigError("dense layer sizes must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (lambda_l1 < 0.0 || lambda_l2 < 0.0 || lambda_g < 0.0) throw ConfigError("regularisation strengths must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
    if (patience < 1) throw ConfigError("patience must be >= 1");
  }
};

// --------------------------------------------------------------------------
// key = value form of the configuration (checkpoints, run configs)

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto res = std::from_chars(v.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct Field {
  std::function<std::string(const ModelConfig&)> get;
  std::function<void(ModelConfig&, const std::string& key, const std::string& value)> set;
};

#define TGCNN_BOOL_FIELD(name) \
  {#name, {[](const ModelConfig& c) { return std::string(c.name ? "true" : "false"); }, [](ModelConfig& c, const std::string& k, const std::string& v) { c.name = parse_bool(k, v); }}}
#define TGCNN_INT_FIELD(name) \
  {#name, {[](const ModelConfig& c) { return std::to_string(c.name); }, [](ModelConfig& c, const std::string& k, const std::string& v) { c.name = parse_number<decltype(c.name)>(k, v); }}}
#define TGCNN_REAL_FIELD(name) \
  {#name, {[](const ModelConfig& c) { return format_double(c.name); }, [](ModelConfig& c, const std::string& k, const std::string& v) { c.name = parse_number<double>(k, v); }}}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      TGCNN_BOOL_FIELD(use_gamma), TGCNN_BOOL_FIELD(use_exp), TGCNN_BOOL_FIELD(use_demographics), TGCNN_BOOL_FIELD(use_two_streams),
      TGCNN_BOOL_FIELD(use_graph_reg), TGCNN_BOOL_FIELD(use_l2), TGCNN_BOOL_FIELD(use_l1), TGCNN_BOOL_FIELD(use_lstm),
      TGCNN_BOOL_FIELD(use_elapsed_time), TGCNN_BOOL_FIELD(use_prescriptions), TGCNN_BOOL_FIELD(share_gamma),
      TGCNN_INT_FIELD(n_filters), TGCNN_INT_FIELD(filter_depth), TGCNN_INT_FIELD(coarse_stride), TGCNN_INT_FIELD(fine_stride),
      TGCNN_INT_FIELD(lstm_hidden), TGCNN_REAL_FIELD(dropout), TGCNN_REAL_FIELD(lambda_l1), TGCNN_REAL_FIELD(lambda_l2),
      TGCNN_REAL_FIELD(lambda_g), TGCNN_REAL_FIELD(lr), TGCNN_INT_FIELD(batch_size), TGCNN_INT_FIELD(max_epochs),
      TGCNN_INT_FIELD(patience), TGCNN_INT_FIELD(seed), TGCNN_INT_FIELD(K), TGCNN_BOOL_FIELD(cap_visits),
      TGCNN_BOOL_FIELD(intra_visit_edges),
      {"dense_sizes",
       {[](const ModelConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.dense_sizes.size(); ++i) s += (i ? "," : "") + std::to_string(c.dense_sizes[i]);
          return s;
        },
        [](ModelConfig& c, const std::string& k, const std::string& v) {
          c.dense_sizes.clear();
          std::stringstream ss(v);
          std::string item;
          while (std::getline(ss, item, ','))
            if (!item.empty()) c.dense_sizes.push_back(parse_number<int>(k, item));
        }}},
  };
  return table;
}

#undef TGCNN_BOOL_FIELD
#undef TGCNN_INT_FIELD
#undef TGCNN_REAL_FIELD

}  // namespace detail

inline bool is_config_key(const std::string& key) { return detail::fields().count(key) > 0; }

inline void set_config_value(ModelConfig& cfg, const std::string& key, const std::string& value) {
  auto it = detail::fields().find(key);
  if (it == detail::fields().end()) throw ConfigError("unknown model setting '" + key + "'");
  it->second.set(cfg, key, value);
}

/// Every field in key order.
inline std::vector<std::pair<std::string, std::string>> config_key_values(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, f] : detail::fields()) out.emplace_back(k, f.get(cfg));
  return out;
}

// --------------------------------------------------------------------------
// Ablations

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"full", "wo_gamma", "wo_exp", "wo_time", "wo_demo", "wo_two_streams",
                                                 "wo_graph_reg", "wo_l2", "wo_l1", "wo_lstm", "with_prescriptions"};
  return names;
}

/// The full configuration with exactly the named component switched.
inline ModelConfig ablation_config(const std::string& name, ModelConfig cfg = {}) {
  if (name == "full") return cfg;
  if (name == "wo_gamma") {
    cfg.use_gamma = false;
  } else if (name == "wo_exp") {
    cfg.use_exp = false;
    cfg.use_gamma = false;
  } else if (name == "wo_time") {
    cfg.use_elapsed_time = false;
  } else if (name == "wo_demo") {
    cfg.use_demographics = false;
  } else if (name == "wo_two_streams") {
    cfg.use_two_streams = false;
  } else if (name == "wo_graph_reg") {
    cfg.use_graph_reg = false;
  } else if (name == "wo_l2") {
    cfg.use_l2 = false;
  } else if (name == "wo_l1") {
    cfg.use_l1 = false;
  } else if (name == "wo_lstm") {
    cfg.use_lstm = false;
  } else if (name == "with_prescriptions") {
    cfg.use_prescriptions = true;
  } else {
    std::string valid;
    for (const auto& n : ablation_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown ablation '" + name + "'; valid names: " + valid);
  }
  return cfg;
}

// --------------------------------------------------------------------------
// Parameters

inline constexpr double kLeakySlope = 0.01;

inline std::string stream_prefix(int s) { return "s" + std::to_string(s) + "."; }

/// Running batch-norm moments and demographic scaling: stored with the weights but never trained.
inline bool is_buffer(const std::string& name) {
  return name.ends_with("bn_running_mean") || name.ends_with("bn_running_var") || name == "demo.age_stats";
}

/// Arrays that carry the L2 penalty: every weight matrix, but no bias, decay rate or batch-norm array.
inline bool is_l2_weight(const std::string& name) {
  return name.ends_with(".filters") || name.ends_with(".lstm_wx") || name.ends_with(".lstm_wh") ||
         (name.starts_with("dense") && name.ends_with(".w")) || name == "out.w";
}

inline std::set<std::string> trainable_names(const ParameterMap& params) {
  std::set<std::string> out;
  for (const auto& [name, _] : params)
    if (!is_buffer(name)) out.insert(name);
  return out;
}

/// Per-position feature width reaching the head from one stream.
inline std::size_t stream_width(const ModelConfig& cfg) {
  return static_cast<std::size_t>(cfg.use_lstm ? cfg.lstm_hidden : cfg.n_filters);
}

inline constexpr std::size_t kDemographicInputs = 3;

/// Softplus inverse of 1: the decay rate starts at one.
inline double initial_gamma_raw() { return std::log(std::numbers::e - 1.0); }

inline ParameterMap init_parameters(const ModelConfig& cfg, int V, std::uint64_t seed) {
  cfg.validate();
  if (V < 1) throw ConfigError("vocabulary must not be empty");
  Rng rng(derive_seed(seed, 0x1417));
  ParameterMap p;
  auto uniform = [&](std::vector<std::size_t> shape, double fan_in) {
    Array a(std::move(shape));
    const double limit = 1.0 / std::sqrt(fan_in);
    for (auto& v : a.data) v = rng.uniform(-limit, limit);
    return a;
  };
  const auto F = static_cast<std::size_t>(cfg.n_filters);
  const auto H = static_cast<std::size_t>(cfg.lstm_hidden);
  const auto d = static_cast<std::size_t>(cfg.filter_depth);
  const auto Vs = static_cast<std::size_t>(V);
  for (int s = 0; s < cfg.n_streams(); ++s) {
    const std::string pre = stream_prefix(s);
    p[pre + "filters"] = uniform({F, Vs, Vs, d}, static_cast<double>(Vs * d));
    p[pre + "gamma_raw"] = Array::scalar(initial_gamma_raw());
    p[pre + "bn_scale"] = Array::column(std::vector<double>(F, 1.0));
    p[pre + "bn_shift"] = Array::column(std::vector<double>(F, 0.0));
    p[pre + "bn_running_mean"] = Array::column(std::vector<double>(F, 0.0));
    p[pre + "bn_running_var"] = Array::column(std::vector<double>(F, 1.0));
    p[pre + "lstm_wx"] = uniform({4 * H, F}, static_cast<double>(F));
    p[pre + "lstm_wh"] = uniform({4 * H, H}, static_cast<double>(H));
    Array bias = Array::column(std::vector<double>(4 * H, 0.0));
    for (std::size_t r = H; r < 2 * H; ++r) bias[r] = 1.0;  // forget gate
    p[pre + "lstm_b"] = std::move(bias);
  }
  std::size_t width = stream_width(cfg) * static_cast<std::size_t>(cfg.n_streams());
  for (std::size_t n = 0; n < cfg.dense_sizes.size(); ++n) {
    const auto out = static_cast<std::size_t>(cfg.dense_sizes[n]);
    p["dense" + std::to_string(n) + ".w"] = uniform({out, width}, static_cast<double>(width));
    p["dense" + std::to_string(n) + ".b"] = Array::column(std::vector<double>(out, 0.0));
    width = out;
  }
  p["out.w"] = uniform({1, width + kDemographicInputs}, static_cast<double>(width + kDemographicInputs));
  p["out.b"] = Array::scalar(0.0);
  p["demo.age_stats"] = Array::column({0.0, 1.0});
  return p;
}

// --------------------------------------------------------------------------
// Encoded inputs

struct EncodedPatient {
  std::string patient_id;
  bool label = false;
  std::vector<graph::TensorEntry> entries;
  double age = 0.0;  ///< years at the prediction date
  double sex = 0.0;  ///< male = 1
  int imd_quintile = 3;
};

struct EncodedSet {
  int V = 0;
  int K = 0;
  std::vector<EncodedPatient> patients;

  std::size_t size() const noexcept { return patients.size(); }
  std::vector<double> labels() const {
    std::vector<double> y;
    for (const auto& p : patients) y.push_back(p.label ? 1.0 : 0.0);
    return y;
  }
};

/// Builds the tensor of every patient. A patient left with fewer than two
/// in-vocabulary visits is kept with an empty tensor and logged.
inline EncodedSet encode(const std::vector<cohort::PatientHistory>& histories, const graph::CodeVocabulary& vocab, const ModelConfig& cfg) {
  EncodedSet set;
  set.V = static_cast<int>(vocab.size());
  set.K = cfg.K;
  std::size_t empty = 0;
  for (const auto& h : histories) {
    EncodedPatient e;
    e.patient_id = h.patient_id;
    e.label = h.label;
    try {
      e.entries = graph::build_tensor(h, vocab, cfg.tensor_options()).entries;
    } catch (const DataError&) {
      ++empty;
    }
    e.age = static_cast<double>(cohort::age_at_prediction(h));
    e.sex = h.demographics.sex == cohort::Sex::male ? 1.0 : 0.0;
    e.imd_quintile = h.demographics.imd_quintile;
    set.patients.push_back(std::move(e));
  }
  if (empty > 0) log_info(std::to_string(empty) + " patient(s) had fewer than two in-vocabulary visits and use an empty graph");
  return set;
}

/// Training-set mean and SD of age (SD floored at one year).
inline Array age_statistics(const EncodedSet& set) {
  if (set.size() == 0) return Array::column({0.0, 1.0});
  double m = 0.0;
  for (const auto& p : set.patients) m += p.age;
  m /= static_cast<double>(set.size());
  double ss = 0.0;
  for (const auto& p : set.patients) ss += (p.age - m) * (p.age - m);
  const double sd = set.size() > 1 ? std::sqrt(ss / static_cast<double>(set.size() - 1)) : 1.0;
  return Array::column({m, std::max(sd, 1.0)});
}

// --------------------------------------------------------------------------
// Forward pass

/// Value-level time transform; absent entries stay zero by construction.
inline double time_transform(double t, double gamma, const ModelConfig& cfg) {
  if (!cfg.use_elapsed_time) return 1.0;
  if (!cfg.use_exp) return t;
  return std::exp(-(cfg.use_gamma ? gamma : 1.0) * t);
}

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

using VarMap = std::map<std::string, Var>;

inline void check_finite(const ad::Tape& tape, Var v, const std::string& layer) {
  for (double x : tape.value(v).data)
    if (!std::isfinite(x)) throw NumericError("non-finite activation in layer '" + layer + "'");
}

namespace detail {

inline Var param(const VarMap& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw InternalError("missing parameter '" + name + "'");
  return it->second;
}

inline Var lstm_final_state(ad::Tape& tape, Var seq, std::size_t L, std::size_t B, Var wx, Var wh, Var b) {
  const std::size_t H = tape.value(wh).cols();
  Var h = tape.constant(Array::matrix(H, B));
  Var c = tape.constant(Array::matrix(H, B));
  for (std::size_t l = 0; l < L; ++l) {
    Var x = ad::slice(seq, ad::Axis::cols, l * B, (l + 1) * B);
    Var gates = ad::add_bias(ad::add(ad::matmul(wx, x), ad::matmul(wh, h)), b);
    Var i = ad::sigmoid(ad::slice(gates, ad::Axis::rows, 0, H));
    Var f = ad::sigmoid(ad::slice(gates, ad::Axis::rows, H, 2 * H));
    Var g = ad::tanh(ad::slice(gates, ad::Axis::rows, 2 * H, 3 * H));
    Var o = ad::sigmoid(ad::slice(gates, ad::Axis::rows, 3 * H, 4 * H));
    c = ad::add(ad::mul(f, c), ad::mul(i, g));
    h = ad::mul(o, ad::tanh(c));
  }
  return h;
}

/// Column l*B + b of `seq` contributes 1/L to column b of the result.
inline Var mean_pool(ad::Tape& tape, Var seq, std::size_t L, std::size_t B) {
  Array pool = Array::matrix(L * B, B);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t b = 0; b < B; ++b) pool.at(l * B + b, b) = 1.0 / static_cast<double>(L);
  return ad::matmul(seq, tape.constant(std::move(pool)));
}

}  // namespace detail

struct ForwardOptions {
  ad::Mode mode = ad::Mode::infer;
  Rng* dropout_rng = nullptr;          ///< required when training with dropout > 0
  ParameterMap* running_out = nullptr;  ///< receives updated batch-norm moments in training mode
};

/// Transformed values of the batch entries for one stream, on the tape.
inline Var stream_values(ad::Tape& tape, const VarMap& vars, const std::vector<double>& t, int stream, const ModelConfig& cfg) {
  if (!cfg.use_elapsed_time || !cfg.use_exp || !cfg.use_gamma) {
    std::vector<double> v(t.size());
    for (std::size_t e = 0; e < t.size(); ++e) v[e] = time_transform(t[e], 1.0, cfg);
    return tape.constant(Array::column(std::move(v)));
  }
  const int owner = cfg.share_gamma ? 0 : stream;
  Var gamma = ad::softplus(detail::param(vars, stream_prefix(owner) + "gamma_raw"));
  return ad::exp(ad::negate(ad::scale(tape.constant(Array::column(t)), gamma)));
}

/// Logits (1 x B) for the patients `idx` of `data`.
inline Var forward(ad::Tape& tape, const VarMap& vars, const EncodedSet& data, std::span<const std::size_t> idx, const ModelConfig& cfg,
                   const ForwardOptions& opt = {}) {
  if (idx.empty()) throw InternalError("forward: empty batch");
  const std::size_t B = idx.size();
  auto structure = std::make_shared<ad::SparseBatch>();
  structure->V = data.V;
  structure->K = data.K;
  structure->batch = static_cast<int>(B);
  std::vector<double> t;
  for (std::size_t b = 0; b < B; ++b)
    for (const auto& e : data.patients.at(idx[b]).entries) {
      structure->entries.push_back({e.i, e.j, e.k, static_cast<int>(b)});
      t.push_back(e.t);
    }
  std::shared_ptr<const ad::SparseBatch> shared = structure;

  std::vector<Var> pooled;
  for (int s = 0; s < cfg.n_streams(); ++s) {
    const std::string pre = stream_prefix(s);
    const std::size_t L = ad::conv_output_length(data.K, cfg.filter_depth, cfg.stride(s));
    Var values = stream_values(tape, vars, t, s, cfg);
    check_finite(tape, values, pre + "time_transform");
    Var conv = ad::sparse_conv3d(detail::param(vars, pre + "filters"), values, shared, cfg.stride(s));
    check_finite(tape, conv, pre + "conv");
    ad::BatchNormRunning running;
    Array mean = tape.value(detail::param(vars, pre + "bn_running_mean"));
    Array var = tape.value(detail::param(vars, pre + "bn_running_var"));
    running.mean = &mean;
    running.var = &var;
    Var bn = ad::batch_norm(conv, detail::param(vars, pre + "bn_scale"), detail::param(vars, pre + "bn_shift"), opt.mode, running);
    check_finite(tape, bn, pre + "batch_norm");
    if (opt.mode == ad::Mode::train && opt.running_out) {
      (*opt.running_out)[pre + "bn_running_mean"] = mean;
      (*opt.running_out)[pre + "bn_running_var"] = var;
    }
    Var act = ad::leaky_relu(bn, kLeakySlope);
    Var summary = cfg.use_lstm ? detail::lstm_final_state(tape, act, L, B, detail::param(vars, pre + "lstm_wx"),
                                                          detail::param(vars, pre + "lstm_wh"), detail::param(vars, pre + "lstm_b"))
                               : detail::mean_pool(tape, act, L, B);
    check_finite(tape, summary, pre + (cfg.use_lstm ? "lstm" : "mean_pool"));
    pooled.push_back(summary);
  }
  Var x = pooled.size() == 1 ? pooled[0] : ad::concat(std::span<const Var>(pooled));
  if (cfg.dropout > 0.0 && opt.mode == ad::Mode::train) {
    if (!opt.dropout_rng) throw InternalError("forward: training with dropout needs a random source");
    x = ad::dropout(x, cfg.dropout, opt.mode, *opt.dropout_rng);
  }
  for (std::size_t n = 0; n < cfg.dense_sizes.size(); ++n) {
    const std::string pre = "dense" + std::to_string(n);
    x = ad::leaky_relu(ad::add_bias(ad::matmul(detail::param(vars, pre + ".w"), x), detail::param(vars, pre + ".b")), kLeakySlope);
    check_finite(tape, x, pre);
  }
  Array demo = Array::matrix(kDemographicInputs, B);
  if (cfg.use_demographics) {
    const auto& stats = tape.value(detail::param(vars, "demo.age_stats"));
    for (std::size_t b = 0; b < B; ++b) {
      const auto& p = data.patients[idx[b]];
      demo.at(0, b) = (p.age - stats[0]) / stats[1];
      demo.at(1, b) = p.sex;
      demo.at(2, b) = (p.imd_quintile - 1) / 4.0;
    }
  }
  Var z = ad::concat({x, tape.constant(std::move(demo))});
  Var logits = ad::add_bias(ad::matmul(detail::param(vars, "out.w"), z), detail::param(vars, "out.b"));
  check_finite(tape, logits, "out");
  return logits;
}

// --------------------------------------------------------------------------
// Objective

/// The regularisation part of the objective, on the tape.
inline Var penalty(ad::Tape& tape, const VarMap& vars, const ModelConfig& cfg) {
  Var total = tape.constant(Array::scalar(0.0));
  for (const auto& [name, v] : vars) {
    if (!tape.requires_grad(v)) continue;
    const bool filters = name.ends_with(".filters");
    if (filters && cfg.use_l1 && cfg.lambda_l1 > 0.0) total = ad::add(total, ad::scale(ad::l1_norm(v), cfg.lambda_l1));
    if (filters && cfg.use_graph_reg && cfg.lambda_g > 0.0) total = ad::add(total, ad::scale(ad::graph_regulariser(v), cfg.lambda_g));
    if (is_l2_weight(name) && cfg.use_l2 && cfg.lambda_l2 > 0.0) total = ad::add(total, ad::scale(ad::l2_norm(v), cfg.lambda_l2));
  }
  return total;
}

/// Same quantity as `penalty`, from plain arrays.
inline double penalty_value(const ParameterMap& params, const ModelConfig& cfg) {
  double total = 0.0;
  for (const auto& [name, a] : params) {
    if (is_buffer(name)) continue;
    const bool filters = name.ends_with(".filters");
    if (filters && cfg.use_l1 && cfg.lambda_l1 > 0.0) {
      double s = 0.0;
      for (double w : a.data) s += std::abs(w);
      total += cfg.lambda_l1 * s;
    }
    if (filters && cfg.use_graph_reg && cfg.lambda_g > 0.0) total += cfg.lambda_g * ad::graph_regulariser_value(a);
    if (is_l2_weight(name) && cfg.use_l2 && cfg.lambda_l2 > 0.0) {
      double s = 0.0;
      for (double w : a.data) s += w * w;
      total += cfg.lambda_l2 * s;
    }
  }
  return total;
}

/// Mean cross-entropy with probabilities clamped away from 0 and 1.
inline double cross_entropy_value(std::span<const double> logits, std::span<const double> labels) {
  if (logits.size() != labels.size() || logits.empty()) throw InternalError("cross_entropy_value: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = std::clamp(ad::detail::stable_sigmoid(logits[i]), ad::kProbabilityClamp, 1.0 - ad::kProbabilityClamp);
    s -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
  }
  return s / static_cast<double>(logits.size());
}

/// Full objective for one batch on the tape: cross-entropy plus the enabled penalties.
inline Var objective(ad::Tape& tape, const VarMap& vars, Var logits, std::vector<double> labels, const ModelConfig& cfg) {
  return ad::add(ad::binary_cross_entropy(logits, std::move(labels)), penalty(tape, vars, cfg));
}

}  // namespace tgcnn::model
