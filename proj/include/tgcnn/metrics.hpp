#pragma once

// Discrimination, calibration, logistic recalibration, bootstrap summaries and
// subgroup breakdowns for a list of predictions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tgcnn/cohort.hpp"
#include "tgcnn/error.hpp"
#include "tgcnn/logistic.hpp"
#include "tgcnn/prediction.hpp"
#include "tgcnn/random.hpp"

namespace tgcnn::metrics {

namespace detail {

inline std::pair<std::size_t, std::size_t> class_counts(const Predictions& preds) {
  std::size_t pos = 0;
  for (const auto& p : preds) pos += p.label ? 1 : 0;
  return {pos, preds.size() - pos};
}

}  // namespace detail

/// Mann-Whitney AUROC: (concordant + 0.5 * tied) / (positives * negatives), via mid-ranks.
inline double auroc(const Predictions& preds) {
  const auto [pos, neg] = detail::class_counts(preds);
  if (pos == 0 || neg == 0) throw DataError("undefined AUROC: both classes are required");
  std::vector<std::size_t> order(preds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return preds[a].probability < preds[b].probability; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && preds[order[j]].probability == preds[order[i]].probability) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t t = i; t < j; ++t)
      if (preds[order[t]].label) rank_sum += mid_rank;
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

/// Step-wise average precision. Ranking is by descending score, ties by ascending patient_id.
inline double auprc(const Predictions& preds) {
  const auto [pos, neg] = detail::class_counts(preds);
  if (pos == 0) throw DataError("undefined AUPRC: no positive outcomes");
  std::vector<const Prediction*> order;
  for (const auto& p : preds) order.push_back(&p);
  std::sort(order.begin(), order.end(), [](const Prediction* a, const Prediction* b) {
    if (a->probability != b->probability) return a->probability > b->probability;
    return a->patient_id < b->patient_id;
  });
  double acc = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!order[r]->label) continue;
    ++hits;
    acc += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return acc / static_cast<double>(pos);
}

struct Calibration {
  double slope = 1.0;
  double slope_se = 0.0;
  double intercept = 0.0;  ///< calibration-in-the-large: slope fixed at one
};

/// Logistic regression of outcomes on logit(p); plus the intercept with logit(p) as an offset.
inline Calibration calibration_slope_intercept(const Predictions& preds) {
  const auto [pos, neg] = detail::class_counts(preds);
  if (pos == 0 || neg == 0) throw DataError("degenerate calibration: both classes are required");
  std::vector<double> lp, y;
  for (const auto& p : preds) {
    if (!(p.probability > 0.0 && p.probability < 1.0)) throw DataError("calibration: probabilities must lie in (0,1)");
    lp.push_back(baselines::logit(p.probability));
    y.push_back(p.label ? 1.0 : 0.0);
  }
  const auto [lo, hi] = std::minmax_element(lp.begin(), lp.end());
  if (*hi - *lo < 1e-12) throw DataError("degenerate calibration: constant predictions");
  ScopedLogCapture quiet;
  const auto slope_fit = baselines::logit_fit(lp, 1, y);
  const auto citl = baselines::logit_fit({}, 0, y, {}, lp);
  return Calibration{slope_fit.beta[1], slope_fit.std_errors[1], citl.beta[0]};
}

struct CalibrationBin {
  double mean_predicted = 0.0;
  double observed_rate = 0.0;
  std::size_t count = 0;
  int bin = 0;
};

struct CalibrationCurve {
  std::vector<CalibrationBin> bins;
};

/// Equal-width probability bins on [0,1]; empty bins are omitted.
inline CalibrationCurve calibration_curve(const Predictions& preds, int n_bins = 10) {
  if (n_bins < 1) throw ConfigError("calibration_curve: n_bins must be >= 1");
  std::vector<double> sum_p(n_bins, 0.0), sum_y(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  for (const auto& p : preds) {
    const int b = std::clamp(static_cast<int>(std::floor(p.probability * n_bins)), 0, n_bins - 1);
    sum_p[b] += p.probability;
    sum_y[b] += p.label ? 1.0 : 0.0;
    ++count[b];
  }
  CalibrationCurve curve;
  for (int b = 0; b < n_bins; ++b) {
    if (count[b] == 0) continue;
    const double c = static_cast<double>(count[b]);
    curve.bins.push_back({sum_p[b] / c, sum_y[b] / c, count[b], b});
  }
  return curve;
}

struct Recalibrator {
  double intercept = 0.0;
  double slope = 1.0;
};

/// Fits outcome ~ a + b * linear_predictor on the recalibration set (Test 1).
inline Recalibrator recalibrate_fit(const Predictions& test1) {
  const auto [pos, neg] = detail::class_counts(test1);
  if (pos == 0 || neg == 0) throw DataError("recalibration needs both classes in the recalibration set");
  std::vector<double> lp, y;
  for (const auto& p : test1) {
    lp.push_back(p.linear_predictor);
    y.push_back(p.label ? 1.0 : 0.0);
  }
  const auto fit = baselines::logit_fit(lp, 1, y);
  return Recalibrator{fit.beta[0], fit.beta[1]};
}

inline Predictions recalibrate_apply(const Recalibrator& r, Predictions preds) {
  for (auto& p : preds) {
    p.linear_predictor = r.intercept + r.slope * p.linear_predictor;
    p.probability = baselines::sigmoid(p.linear_predictor);
  }
  return preds;
}

// --------------------------------------------------------------------------
// Reports

struct BootstrapSummary {
  double mean = 0.0;
  double sd = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t replicates = 0;  ///< replicates where the metric was defined
};

struct MetricsReport {
  std::size_t n = 0;
  std::size_t n_positive = 0;
  std::optional<double> auroc;
  std::optional<double> auprc;
  std::optional<double> calibration_slope;
  std::optional<double> calibration_slope_se;
  std::optional<double> calibration_intercept;
  CalibrationCurve curve;
  std::map<std::string, BootstrapSummary> bootstrap;
  std::map<std::string, MetricsReport> subgroups;
};

/// Linear-interpolation percentile of sorted data (q in [0,1]).
inline double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline BootstrapSummary summarize(std::vector<double> values) {
  BootstrapSummary s;
  s.replicates = values.size();
  if (values.empty()) return s;
  double m = 0.0;
  for (double v : values) m += v;
  m /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  s.mean = m;
  s.sd = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  std::sort(values.begin(), values.end());
  s.ci_low = percentile(values, 0.025);
  s.ci_high = percentile(values, 0.975);
  return s;
}

/// Point metrics that are defined for this sample; undefined ones stay empty.
inline MetricsReport point_metrics(const Predictions& preds) {
  MetricsReport r;
  r.n = preds.size();
  r.n_positive = detail::class_counts(preds).first;
  r.curve = calibration_curve(preds);
  const bool both = r.n_positive > 0 && r.n_positive < r.n;
  if (both) r.auroc = auroc(preds);
  if (r.n_positive > 0) r.auprc = auprc(preds);
  if (both) {
    try {
      const auto c = calibration_slope_intercept(preds);
      r.calibration_slope = c.slope;
      r.calibration_slope_se = c.slope_se;
      r.calibration_intercept = c.intercept;
    } catch (const DataError&) {
    }
  }
  return r;
}

/// B stratified resamples (positives and negatives resampled separately so both classes stay present).
inline std::map<std::string, BootstrapSummary> bootstrap_metrics(const Predictions& preds, int replicates = 500, std::uint64_t seed = 1) {
  if (replicates < 1) throw ConfigError("bootstrap needs at least one replicate");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < preds.size(); ++i) (preds[i].label ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) throw DataError("bootstrap needs both classes");
  std::map<std::string, std::vector<double>> samples;
  for (int b = 0; b < replicates; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    Predictions resample;
    resample.reserve(preds.size());
    std::size_t serial = 0;
    for (const auto* group : {&pos, &neg})
      for (std::size_t i = 0; i < group->size(); ++i) {
        Prediction p = preds[(*group)[rng.index(group->size())]];
        // unique ids keep the AUPRC tie rule well defined for duplicated rows
        char buf[24];
        std::snprintf(buf, sizeof buf, "#%08zu", serial++);
        p.patient_id = p.patient_id + buf;
        resample.push_back(std::move(p));
      }
    samples["auroc"].push_back(auroc(resample));
    samples["auprc"].push_back(auprc(resample));
    try {
      const auto c = calibration_slope_intercept(resample);
      samples["calibration_slope"].push_back(c.slope);
      samples["calibration_intercept"].push_back(c.intercept);
    } catch (const DataError&) {
    }
  }
  std::map<std::string, BootstrapSummary> out;
  for (auto& [name, values] : samples) out[name] = summarize(std::move(values));
  return out;
}

struct EvaluationOptions {
  int bootstrap_replicates = 500;  ///< 0 disables the bootstrap
  std::uint64_t seed = 1;
};

inline MetricsReport evaluate(const Predictions& preds, const EvaluationOptions& opt = {}) {
  MetricsReport r = point_metrics(preds);
  if (opt.bootstrap_replicates > 0 && r.n_positive > 0 && r.n_positive < r.n)
    r.bootstrap = bootstrap_metrics(preds, opt.bootstrap_replicates, opt.seed);
  return r;
}

// --------------------------------------------------------------------------
// Subgroups

struct SubjectInfo {
  cohort::Sex sex = cohort::Sex::female;
  int age = 50;  ///< age at prediction
  int imd_quintile = 3;
};

/// Age bands are left-closed: [.., 60), [60, 70), [70, ..). Anyone below 40 falls in the first band.
inline std::string age_band(int age) {
  if (age < 60) return "age=40-60";
  if (age < 70) return "age=60-70";
  return "age=70+";
}

inline std::vector<std::string> subgroup_names() {
  return {"sex=female", "sex=male", "age=40-60", "age=60-70", "age=70+", "imd=1", "imd=2", "imd=3", "imd=4", "imd=5"};
}

/// One report per subgroup along three independent axes (sex, age band, IMD quintile).
/// Metrics a subgroup cannot support (missing class, empty) are left undefined.
inline std::map<std::string, MetricsReport> stratified_evaluation(const Predictions& preds, const std::map<std::string, SubjectInfo>& subjects,
                                                                   const EvaluationOptions& opt = {}) {
  std::map<std::string, Predictions> groups;
  for (const auto& name : subgroup_names()) groups[name];
  for (const auto& p : preds) {
    auto it = subjects.find(p.patient_id);
    if (it == subjects.end()) throw DataError("stratified_evaluation: no demographics for '" + p.patient_id + "'");
    const auto& s = it->second;
    groups[s.sex == cohort::Sex::female ? "sex=female" : "sex=male"].push_back(p);
    groups[age_band(s.age)].push_back(p);
    groups["imd=" + std::to_string(s.imd_quintile)].push_back(p);
  }
  std::map<std::string, MetricsReport> out;
  for (const auto& [name, g] : groups) out[name] = evaluate(g, opt);
  return out;
}

inline std::map<std::string, SubjectInfo> subject_info(const std::vector<cohort::PatientHistory>& histories) {
  std::map<std::string, SubjectInfo> out;
  for (const auto& h : histories)
    out[h.patient_id] = SubjectInfo{h.demographics.sex, cohort::age_at_prediction(h), h.demographics.imd_quintile};
  return out;
}

// --------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  using nlohmann::ordered_json;
  auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json("undefined"); };
  ordered_json j;
  j["n"] = r.n;
  j["n_positive"] = r.n_positive;
  j["auroc"] = opt(r.auroc);
  j["auprc"] = opt(r.auprc);
  j["calibration_slope"] = opt(r.calibration_slope);
  j["calibration_slope_se"] = opt(r.calibration_slope_se);
  j["calibration_intercept"] = opt(r.calibration_intercept);
  ordered_json bins = ordered_json::array();
  for (const auto& b : r.curve.bins)
    bins.push_back({{"bin", b.bin}, {"mean_pred", b.mean_predicted}, {"obs_rate", b.observed_rate}, {"count", b.count}});
  j["calibration_curve"] = bins;
  ordered_json boot = ordered_json::object();
  for (const auto& [name, s] : r.bootstrap)
    boot[name] = {{"mean", s.mean}, {"sd", s.sd}, {"ci_low", s.ci_low}, {"ci_high", s.ci_high}, {"replicates", s.replicates}};
  j["bootstrap"] = boot;
  if (!r.subgroups.empty()) {
    ordered_json sub = ordered_json::object();
    for (const auto& [name, s] : r.subgroups) sub[name] = to_json(s);
    j["subgroups"] = sub;
  }
  return j;
}

inline std::string format_number(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// Flat rows `metric,value,sd,ci_low,ci_high,subgroup`; subgroup "all" for the top level.
inline void write_metrics_csv(std::ostream& out, const MetricsReport& r) {
  out << "metric,value,sd,ci_low,ci_high,subgroup\n";
  auto rows = [&out](const MetricsReport& rep, const std::string& group) {
    auto row = [&](const std::string& name, const std::optional<double>& v) {
      out << name << ',' << (v ? format_number(*v) : "undefined");
      if (auto it = rep.bootstrap.find(name); it != rep.bootstrap.end())
        out << ',' << format_number(it->second.sd) << ',' << format_number(it->second.ci_low) << ',' << format_number(it->second.ci_high);
      else
        out << ",,,";
      out << ',' << group << '\n';
    };
    out << "n," << rep.n << ",,,," << group << '\n';
    out << "n_positive," << rep.n_positive << ",,,," << group << '\n';
    row("auroc", rep.auroc);
    row("auprc", rep.auprc);
    row("calibration_slope", rep.calibration_slope);
    row("calibration_intercept", rep.calibration_intercept);
  };
  rows(r, "all");
  for (const auto& [name, s] : r.subgroups) rows(s, name);
}

inline void write_curve_csv(std::ostream& out, const CalibrationCurve& c) {
  out << "bin,mean_pred,obs_rate,count\n";
  for (const auto& b : c.bins)
    out << b.bin << ',' << format_number(b.mean_predicted) << ',' << format_number(b.observed_rate) << ',' << b.count << '\n';
}

inline void write_predictions_csv(std::ostream& out, const Predictions& preds) {
  out << "patient_id,probability,linear_predictor,label\n";
  for (const auto& p : preds)
    out << p.patient_id << ',' << format_number(p.probability) << ',' << format_number(p.linear_predictor) << ',' << (p.label ? 1 : 0) << '\n';
}

}  // namespace tgcnn::metrics
