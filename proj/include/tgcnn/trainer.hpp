#pragma once

// Minibatch Adam training with per-epoch evaluation and early stopping on
// validation accuracy. Model-agnostic: a model supplies logits and penalties.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tgcnn/autodiff.hpp"
#include "tgcnn/error.hpp"
#include "tgcnn/metrics.hpp"
#include "tgcnn/optimizer.hpp"
#include "tgcnn/random.hpp"

namespace tgcnn::train {

using ad::ParameterMap;

enum class Partition { train, validation };

/// Model hooks. `logits` builds a 1 x |idx| row on the tape; in training mode it
/// may write refreshed buffers (e.g. batch-norm moments) into `buffers_out`.
struct Problem {
  std::vector<double> train_labels;
  std::vector<double> val_labels;
  std::set<std::string> trainable;
  std::function<ad::Var(ad::Tape&, const std::map<std::string, ad::Var>&, Partition, std::span<const std::size_t>, ad::Mode, Rng&,
                        ParameterMap* buffers_out)>
      logits;
  std::function<ad::Var(ad::Tape&, const std::map<std::string, ad::Var>&)> penalty;  ///< may be empty
  std::function<double(const ParameterMap&)> penalty_value;                         ///< may be empty
};

struct LoopOptions {
  double lr = 1e-3;
  int batch_size = 32;
  int max_epochs = 30;
  int patience = 5;
  std::uint64_t seed = 1;
  std::size_t eval_chunk = 256;
};

struct HistoryRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  std::optional<double> train_auroc;
  std::optional<double> val_auroc;
  std::optional<double> val_cslope;
};

struct LoopResult {
  ParameterMap params;  ///< parameters of the best epoch
  std::vector<HistoryRow> history;
  int best_epoch = 0;
};

inline std::map<std::string, ad::Var> bind(ad::Tape& tape, const ParameterMap& params, const std::set<std::string>& trainable) {
  std::map<std::string, ad::Var> vars;
  for (const auto& [name, a] : params) vars[name] = trainable.count(name) ? tape.variable(a) : tape.constant(a);
  return vars;
}

/// Inference-mode logits for every sample of a partition, evaluated in chunks.
inline std::vector<double> infer_logits(const ParameterMap& params, const Problem& problem, Partition part, std::size_t n, std::size_t chunk = 256) {
  std::vector<double> out;
  out.reserve(n);
  Rng unused(0);
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    ad::Tape tape;
    const auto vars = bind(tape, params, {});
    const ad::Var z = problem.logits(tape, vars, part, idx, ad::Mode::infer, unused, nullptr);
    const auto& v = tape.value(z).data;
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

namespace detail {

struct PartitionScores {
  double loss = 0.0;
  double acc = 0.0;
  std::optional<double> auroc;
  std::optional<double> cslope;
};

inline PartitionScores score(std::span<const double> logits, std::span<const double> labels, double penalty) {
  PartitionScores s;
  if (labels.empty()) return s;
  Predictions preds;
  std::size_t correct = 0;
  double ce = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = baselines::sigmoid(logits[i]);
    const double pc = std::clamp(p, ad::kProbabilityClamp, 1.0 - ad::kProbabilityClamp);
    ce -= labels[i] * std::log(pc) + (1.0 - labels[i]) * std::log(1.0 - pc);
    correct += ((p >= 0.5) == (labels[i] > 0.5)) ? 1 : 0;
    preds.push_back({std::to_string(i), p, logits[i], labels[i] > 0.5});
  }
  const double n = static_cast<double>(labels.size());
  s.loss = ce / n + penalty;
  s.acc = static_cast<double>(correct) / n;
  const auto rep = metrics::point_metrics(preds);
  s.auroc = rep.auroc;
  s.cslope = rep.calibration_slope;
  return s;
}

}  // namespace detail

/// Evaluates the current parameters on both partitions (full objective, inference mode).
inline HistoryRow evaluate_epoch(int epoch, const ParameterMap& params, const Problem& problem, std::size_t chunk) {
  const double pen = problem.penalty_value ? problem.penalty_value(params) : 0.0;
  const auto tr_logits = infer_logits(params, problem, Partition::train, problem.train_labels.size(), chunk);
  const auto va_logits = infer_logits(params, problem, Partition::validation, problem.val_labels.size(), chunk);
  for (double z : tr_logits)
    if (!std::isfinite(z)) throw NumericError("non-finite training logit at epoch " + std::to_string(epoch));
  const auto tr = detail::score(tr_logits, problem.train_labels, pen);
  const auto va = detail::score(va_logits, problem.val_labels, pen);
  HistoryRow row;
  row.epoch = epoch;
  row.train_loss = tr.loss;
  row.val_loss = va.loss;
  row.train_acc = tr.acc;
  row.val_acc = va.acc;
  row.train_auroc = tr.auroc;
  row.val_auroc = va.auroc;
  row.val_cslope = va.cslope;
  return row;
}

/// Loss and gradients of one minibatch.
inline double batch_step(ad::Tape& tape, const ParameterMap& params, const Problem& problem, std::span<const std::size_t> idx, Rng& rng,
                         ParameterMap* grads, ParameterMap* buffers_out) {
  const auto vars = bind(tape, params, problem.trainable);
  const ad::Var z = problem.logits(tape, vars, Partition::train, idx, ad::Mode::train, rng, buffers_out);
  std::vector<double> y;
  for (auto i : idx) y.push_back(problem.train_labels[i]);
  ad::Var loss = ad::binary_cross_entropy(z, std::move(y));
  if (problem.penalty) loss = ad::add(loss, problem.penalty(tape, vars));
  tape.backward(loss);
  if (grads)
    for (const auto& name : problem.trainable) (*grads)[name] = tape.gradient(vars.at(name));
  return tape.value(loss)[0];
}

/// Keeps the epoch with the highest validation accuracy (lower validation loss breaks ties);
/// stops after `patience` epochs without improvement.
inline LoopResult run_training(ParameterMap params, const Problem& problem, const LoopOptions& opt) {
  if (problem.train_labels.empty()) throw DataError("training set is empty");
  if (opt.batch_size < 1 || opt.patience < 1 || opt.max_epochs < 0) throw ConfigError("invalid training loop options");
  const bool has_val = !problem.val_labels.empty();
  auto selection = [&](const HistoryRow& r) { return has_val ? std::pair{r.val_acc, -r.val_loss} : std::pair{r.train_acc, -r.train_loss}; };

  LoopResult result;
  result.history.push_back(evaluate_epoch(0, params, problem, opt.eval_chunk));
  result.params = params;
  auto best = selection(result.history.back());
  int since_best = 0;

  ad::OptimizerState state;
  const ad::AdamOptions adam{opt.lr, 0.9, 0.999, 1e-8};
  Rng order_rng(derive_seed(opt.seed, 0xA11));
  Rng dropout_rng(derive_seed(opt.seed, 0xD20));
  std::vector<std::size_t> order(problem.train_labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    order_rng.shuffle(order);
    std::size_t batch_no = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(opt.batch_size), ++batch_no) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(opt.batch_size));
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      ad::Tape tape;
      ParameterMap grads, buffers;
      double loss = 0.0;
      try {
        loss = batch_step(tape, params, problem, idx, dropout_rng, &grads, &buffers);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no) + ")");
      }
      if (!std::isfinite(loss))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no));
      ad::adam_step(params, grads, state, adam);
      for (auto& [name, a] : buffers) params.at(name) = std::move(a);
    }
    result.history.push_back(evaluate_epoch(epoch, params, problem, opt.eval_chunk));
    const auto current = selection(result.history.back());
    if (current > best) {
      best = current;
      result.params = params;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= opt.patience) {
      break;
    }
  }
  return result;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? metrics::format_number(*v) : "NA"; }

inline void write_history_csv(std::ostream& out, const std::vector<HistoryRow>& history) {
  out << "epoch,train_loss,val_loss,train_acc,val_acc,train_auroc,val_auroc,val_cslope\n";
  for (const auto& r : history)
    out << r.epoch << ',' << metrics::format_number(r.train_loss) << ',' << metrics::format_number(r.val_loss) << ','
        << metrics::format_number(r.train_acc) << ',' << metrics::format_number(r.val_acc) << ',' << format_optional(r.train_auroc) << ','
        << format_optional(r.val_auroc) << ',' << format_optional(r.val_cslope) << '\n';
}

}  // namespace tgcnn::train
