#pragma once

// Command-line front end. Every artifact lands under one run directory.

#include <CLI11.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tgcnn/baselines.hpp"
#include "tgcnn/cohort.hpp"
#include "tgcnn/config.hpp"
#include "tgcnn/error.hpp"
#include "tgcnn/graph_builder.hpp"
#include "tgcnn/log.hpp"
#include "tgcnn/metrics.hpp"
#include "tgcnn/training.hpp"

namespace tgcnn::cli {

namespace fs = std::filesystem;
using cohort::PatientHistory;

enum ExitCode : int { kSuccess = 0, kUsage = 1, kDataError = 2 };

struct Context {
  config::RunConfig cfg;
  fs::path run_dir;
  std::ostream* out = &std::cout;
};

// --------------------------------------------------------------------------
// Files

inline std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline fs::path cohort_dir(const Context& ctx) { return ctx.cfg.data_dir.empty() ? ctx.run_dir / "cohort" : fs::path(ctx.cfg.data_dir); }

inline std::vector<PatientHistory> ingest(const Context& ctx) {
  const auto dir = cohort_dir(ctx);
  if (!fs::exists(dir / "events.csv")) throw DataError("no cohort at " + dir.string() + " (run 'generate' or set data_dir)");
  return cohort::ingest_cohort(dir / "events.csv", dir / "demographics.csv", dir / "outcomes.csv", ctx.cfg.analysis_period());
}

// --------------------------------------------------------------------------
// Prepared cohort

struct Prepared {
  std::size_t n_raw = 0;
  std::vector<PatientHistory> included;
  std::vector<PatientHistory> matched_train, test1, test2;
  std::map<std::string, int> folds;
  graph::CodeVocabulary vocab;

  const std::vector<PatientHistory>& partition(const std::string& name) const {
    if (name == "test1") return test1;
    if (name == "test2") return test2;
    if (name == "matched_train") return matched_train;
    throw ConfigError("unknown partition '" + name + "' (expected matched_train, test1 or test2)");
  }
};

/// Rebuilds the partitions recorded by `prepare` from the cohort files.
inline Prepared load_prepared(const Context& ctx) {
  const auto manifest_path = ctx.run_dir / "split" / "manifest.csv";
  if (!fs::exists(manifest_path)) throw DataError("no prepared split in " + ctx.run_dir.string() + " (run 'prepare' first)");
  Prepared p;
  auto raw = ingest(ctx);
  p.n_raw = raw.size();
  p.included = cohort::prepare_histories(std::move(raw), ctx.cfg.horizon_months);
  std::map<std::string, const PatientHistory*> by_id;
  for (const auto& h : p.included) by_id[h.patient_id] = &h;

  std::ifstream in(manifest_path);
  std::string line;
  std::getline(in, line);
  if (line != "patient_id,partition,fold") throw DataError(manifest_path.string() + ": unexpected header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::stringstream ss(line);
    std::string id, part, fold;
    std::getline(ss, id, ',');
    std::getline(ss, part, ',');
    std::getline(ss, fold, ',');
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError(manifest_path.string(), lineno, 1, "patient '" + id + "' is not in the prepared cohort");
    if (part == "matched_train") {
      p.matched_train.push_back(*it->second);
      p.folds[id] = std::stoi(fold);
    } else if (part == "test1") {
      p.test1.push_back(*it->second);
    } else if (part == "test2") {
      p.test2.push_back(*it->second);
    } else if (part != "unused") {
      throw DataError(manifest_path.string(), lineno, 2, "unknown partition '" + part + "'");
    }
  }
  p.vocab = graph::CodeVocabulary::load(ctx.run_dir / "split" / "vocab.txt");
  return p;
}

/// Matched training set split into training and early-stopping folds.
inline std::pair<std::vector<PatientHistory>, std::vector<PatientHistory>> train_val(const Prepared& p, int val_fold) {
  std::vector<PatientHistory> tr, va;
  for (const auto& h : p.matched_train) (p.folds.at(h.patient_id) == val_fold ? va : tr).push_back(h);
  return {std::move(tr), std::move(va)};
}

// --------------------------------------------------------------------------
// Models

inline const std::vector<std::string>& model_names() {
  static const std::vector<std::string> names{"tgcnn", "lr_demographics", "lr_codes", "lr_both", "rnn", "lstm"};
  return names;
}

inline void check_model_name(const std::string& name) {
  for (const auto& n : model_names())
    if (n == name) return;
  throw ConfigError("unknown model '" + name + "' (expected tgcnn, lr_demographics, lr_codes, lr_both, rnn or lstm)");
}

inline bool is_logistic(const std::string& name) { return name.starts_with("lr_"); }

/// Scores `targets` with a baseline trained on `train` (and `val` for early stopping).
inline std::vector<Predictions> baseline_predictions(const Context& ctx, const std::string& name, const std::vector<PatientHistory>& train,
                                                     const std::vector<PatientHistory>& val, const graph::CodeVocabulary& vocab,
                                                     const std::vector<const std::vector<PatientHistory>*>& targets, std::uint64_t seed,
                                                     const fs::path& artifacts = {}) {
  std::vector<Predictions> out;
  if (is_logistic(name)) {
    std::vector<PatientHistory> all = train;
    all.insert(all.end(), val.begin(), val.end());
    const auto b = baselines::fit_logistic_baseline(all, vocab, baselines::parse_feature_set(name.substr(3)));
    if (!artifacts.empty()) {
      auto f = open_out(artifacts / "coefficients.csv");
      baselines::write_coefficients_csv(f, b);
    }
    for (const auto* t : targets) out.push_back(baselines::predict_logistic(b, *t, vocab));
    return out;
  }
  auto scfg = ctx.cfg.sequence_config();
  scfg.kind = baselines::parse_sequence_kind(name);
  scfg.seed = seed;
  const auto m = baselines::sequence_baseline_train(train, val, vocab, scfg);
  if (!artifacts.empty()) {
    auto f = open_out(artifacts / "history.csv");
    train::write_history_csv(f, m.history);
  }
  for (const auto* t : targets) out.push_back(baselines::sequence_predict(m, *t, vocab));
  return out;
}

inline model::Checkpoint load_trained(const Context& ctx) {
  const auto path = ctx.run_dir / "model" / "checkpoint.bin";
  if (!fs::exists(path)) throw DataError("no trained model in " + ctx.run_dir.string() + " (run 'train' first)");
  return model::load_checkpoint(path);
}

/// Predictions of `name` on each target partition.
inline std::vector<Predictions> model_predictions(const Context& ctx, const Prepared& p, const std::string& name,
                                                  const std::vector<const std::vector<PatientHistory>*>& targets, const fs::path& artifacts = {}) {
  check_model_name(name);
  if (name == "tgcnn") {
    const auto ckpt = load_trained(ctx);
    std::vector<Predictions> out;
    for (const auto* t : targets) out.push_back(model::predict(ckpt.params, *t, p.vocab, ckpt.config));
    return out;
  }
  const auto [tr, va] = train_val(p, ctx.cfg.val_fold);
  return baseline_predictions(ctx, name, tr, va, p.vocab, targets, ctx.cfg.seed, artifacts);
}

/// k-fold cross-validation of a baseline; fold f uses seed + f.
inline model::CvResult baseline_cv(const Context& ctx, const Prepared& p, const std::string& name) {
  std::vector<model::FoldRecord> records;
  for (int f = 0; f < ctx.cfg.n_folds; ++f) {
    const auto [tr, va] = train_val(p, f);
    if (tr.empty() || va.empty()) throw DataError("fold " + std::to_string(f) + " is empty");
    const auto preds = baseline_predictions(ctx, name, tr, va, p.vocab, {&tr, &va}, ctx.cfg.seed + static_cast<std::uint64_t>(f));
    const auto tr_rep = metrics::point_metrics(preds[0]);
    const auto va_rep = metrics::point_metrics(preds[1]);
    model::FoldRecord rec;
    rec.fold = f;
    rec.train_auroc = tr_rep.auroc.value_or(rec.train_auroc);
    rec.val_auroc = va_rep.auroc.value_or(rec.val_auroc);
    rec.train_cslope = tr_rep.calibration_slope.value_or(rec.train_cslope);
    rec.val_cslope = va_rep.calibration_slope.value_or(rec.val_cslope);
    rec.val_acc = model::accuracy(preds[1]);
    records.push_back(rec);
  }
  return model::summarize_folds(std::move(records));
}

inline metrics::EvaluationOptions evaluation_options(const Context& ctx) { return {ctx.cfg.bootstrap, ctx.cfg.seed}; }

inline void write_report_files(const fs::path& dir, const std::string& stem, const metrics::MetricsReport& r) {
  auto j = open_out(dir / (stem + "_metrics.json"));
  j << metrics::to_json(r).dump(2) << '\n';
  auto c = open_out(dir / (stem + "_metrics.csv"));
  metrics::write_metrics_csv(c, r);
  auto k = open_out(dir / (stem + "_curve.csv"));
  metrics::write_curve_csv(k, r.curve);
}

inline std::string fmt(double v, int digits = 3) {
  if (!std::isfinite(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string fmt(const std::optional<double>& v, int digits = 3) { return v ? fmt(*v, digits) : "undefined"; }

// --------------------------------------------------------------------------
// Commands

inline void cmd_generate(const Context& ctx) {
  const auto histories = cohort::generate_synthetic_cohort(ctx.cfg.generator, ctx.cfg.seed);
  const auto dir = ctx.run_dir / "cohort";
  cohort::write_cohort_csv(histories, dir);
  std::size_t cases = 0;
  for (const auto& h : histories) cases += h.label ? 1 : 0;
  *ctx.out << "generated " << histories.size() << " patients (" << cases << " cases) in " << dir.string() << '\n';
}

inline void cmd_prepare(const Context& ctx) {
  auto raw = ingest(ctx);
  const std::size_t n_raw = raw.size();
  auto included = cohort::prepare_histories(std::move(raw), ctx.cfg.horizon_months);
  std::set<std::string> all_ids;
  for (const auto& h : included) all_ids.insert(h.patient_id);
  const auto split = cohort::split_cohort(included, ctx.cfg.seed, ctx.cfg.split_options());
  const auto vocab = graph::build_vocabulary(split.matched_train, ctx.cfg.vocab_size);

  const auto dir = ctx.run_dir / "split";
  {
    std::map<std::string, std::string> rows;
    for (const auto& id : all_ids) rows[id] = "unused,";
    for (const auto& h : split.matched_train) rows[h.patient_id] = "matched_train," + std::to_string(split.fold_assignment.at(h.patient_id));
    for (const auto& h : split.test1) rows[h.patient_id] = "test1,";
    for (const auto& h : split.test2) rows[h.patient_id] = "test2,";
    auto f = open_out(dir / "manifest.csv");
    f << "patient_id,partition,fold\n";
    for (const auto& [id, rest] : rows) f << id << ',' << rest << '\n';
  }
  {
    auto f = open_out(dir / "pairs.csv");
    f << "case_id,control_id,age_difference_years\n";
    for (const auto& pr : split.pairs) f << pr.case_id << ',' << pr.control_id << ',' << pr.age_difference_years << '\n';
  }
  vocab.save(dir / "vocab.txt");
  *ctx.out << "prepared " << included.size() << " of " << n_raw << " patients: matched_train=" << split.matched_train.size()
           << " test1=" << split.test1.size() << " test2=" << split.test2.size() << " unmatched_cases=" << split.unmatched_case_ids.size()
           << " vocabulary=" << vocab.size() << '\n';
}

inline void cmd_train(const Context& ctx) {
  const auto p = load_prepared(ctx);
  const auto [tr, va] = train_val(p, ctx.cfg.val_fold);
  const auto mcfg = ctx.cfg.model_config();
  const auto result = model::train_model(tr, va, p.vocab, mcfg);
  const auto dir = ctx.run_dir / "model";
  fs::create_directories(dir);
  model::save_checkpoint(dir / "checkpoint.bin", result.params, mcfg);
  auto h = open_out(dir / "history.csv");
  train::write_history_csv(h, result.history);
  const auto& best = result.history.at(static_cast<std::size_t>(result.best_epoch));
  *ctx.out << "trained on " << tr.size() << " patients; best epoch " << result.best_epoch << " val_acc=" << fmt(best.val_acc)
           << " val_auroc=" << fmt(best.val_auroc) << '\n';
}

inline void cmd_cv(const Context& ctx, const std::vector<std::string>& models) {
  const auto p = load_prepared(ctx);
  std::vector<std::pair<std::string, model::CvResult>> rows;
  const auto dir = ctx.run_dir / "cv";
  for (const auto& name : models) {
    check_model_name(name);
    auto r = name == "tgcnn" ? model::cross_validate(p.matched_train, p.folds, p.vocab, ctx.cfg.model_config()) : baseline_cv(ctx, p, name);
    auto f = open_out(dir / ("folds_" + name + ".csv"));
    model::write_folds_csv(f, r);
    *ctx.out << name << ": val_auroc " << model::format_mean_sd(r.val_auroc) << '\n';
    rows.emplace_back(name, std::move(r));
  }
  auto t = open_out(dir / "table.csv");
  model::write_cv_table(t, rows);
}

inline void cmd_search(const Context& ctx) {
  const auto p = load_prepared(ctx);
  const auto s = model::random_search(p.matched_train, p.folds, p.vocab, ctx.cfg.model_config(), ctx.cfg.search_trials, ctx.cfg.seed);
  const auto dir = ctx.run_dir / "search";
  auto f = open_out(dir / "trials.csv");
  f << "trial,lr,lambda_l1,lambda_l2,lambda_g,n_filters,filter_depth,lstm_hidden,dropout,val_acc,val_auroc\n";
  for (std::size_t t = 0; t < s.trials.size(); ++t) {
    const auto& c = s.trials[t];
    f << t << ',' << metrics::format_number(c.lr) << ',' << metrics::format_number(c.lambda_l1) << ',' << metrics::format_number(c.lambda_l2) << ','
      << metrics::format_number(c.lambda_g) << ',' << c.n_filters << ',' << c.filter_depth << ',' << c.lstm_hidden << ','
      << metrics::format_number(c.dropout) << ',' << metrics::format_number(s.results[t].val_acc.mean) << ','
      << metrics::format_number(s.results[t].val_auroc.mean) << '\n';
  }
  config::RunConfig best = ctx.cfg;
  best.model = s.trials[s.best];
  auto b = open_out(dir / "best_config.txt");
  b << config::to_text(best);
  *ctx.out << "best trial " << s.best << " of " << s.trials.size() << ": val_acc " << model::format_mean_sd(s.results[s.best].val_acc)
           << "; configuration in " << (dir / "best_config.txt").string() << '\n';
}

inline void cmd_ablate(const Context& ctx) {
  const auto p = load_prepared(ctx);
  const auto rows = model::run_ablation(p.matched_train, p.folds, p.vocab, ctx.cfg.model_config());
  const auto dir = ctx.run_dir / "ablation";
  std::vector<std::pair<std::string, model::CvResult>> table;
  for (const auto& r : rows) {
    auto f = open_out(dir / ("folds_" + r.name + ".csv"));
    model::write_folds_csv(f, r.cv);
    *ctx.out << r.name << ": val_auroc " << model::format_mean_sd(r.cv.val_auroc) << '\n';
    table.emplace_back(r.name, r.cv);
  }
  auto t = open_out(dir / "table.csv");
  model::write_cv_table(t, table);
}

inline void cmd_evaluate(const Context& ctx, const std::string& name, const std::string& partition) {
  const auto p = load_prepared(ctx);
  const auto dir = ctx.run_dir / "eval" / (name + "_" + partition);
  const auto preds = model_predictions(ctx, p, name, {&p.partition(partition)}, dir).at(0);
  const auto report = metrics::evaluate(preds, evaluation_options(ctx));
  auto f = open_out(dir / "predictions.csv");
  metrics::write_predictions_csv(f, preds);
  write_report_files(dir, partition, report);
  *ctx.out << name << " on " << partition << ": auroc " << fmt(report.auroc) << " auprc " << fmt(report.auprc) << " slope "
           << fmt(report.calibration_slope) << '\n';
}

struct Recalibrated {
  metrics::Recalibrator recalibrator;
  Predictions before, after;
};

inline Recalibrated recalibrated_test2(const Context& ctx, const Prepared& p, const std::string& name, const fs::path& artifacts = {}) {
  const auto preds = model_predictions(ctx, p, name, {&p.test1, &p.test2}, artifacts);
  Recalibrated r;
  r.recalibrator = metrics::recalibrate_fit(preds[0]);
  r.before = preds[1];
  r.after = metrics::recalibrate_apply(r.recalibrator, preds[1]);
  return r;
}

inline void cmd_recalibrate(const Context& ctx, const std::string& name) {
  const auto p = load_prepared(ctx);
  const auto dir = ctx.run_dir / "recalibration" / name;
  const auto r = recalibrated_test2(ctx, p, name, dir);
  const auto opt = evaluation_options(ctx);
  const auto before = metrics::evaluate(r.before, opt);
  const auto after = metrics::evaluate(r.after, opt);
  {
    auto f = open_out(dir / "recalibrator.txt");
    f << "intercept = " << metrics::format_number(r.recalibrator.intercept) << "\nslope = " << metrics::format_number(r.recalibrator.slope) << '\n';
  }
  write_report_files(dir, "test2_before", before);
  write_report_files(dir, "test2_after", after);
  auto f = open_out(dir / "test2_recalibrated_predictions.csv");
  metrics::write_predictions_csv(f, r.after);
  *ctx.out << name << " recalibrated on test1 (a=" << fmt(r.recalibrator.intercept) << ", b=" << fmt(r.recalibrator.slope)
           << "); test2 slope " << fmt(before.calibration_slope) << " -> " << fmt(after.calibration_slope) << '\n';
}

inline void cmd_stratify(const Context& ctx, const std::string& name) {
  const auto p = load_prepared(ctx);
  const auto r = recalibrated_test2(ctx, p, name);
  const auto opt = evaluation_options(ctx);
  auto report = metrics::evaluate(r.after, opt);
  report.subgroups = metrics::stratified_evaluation(r.after, metrics::subject_info(p.test2), opt);
  const auto dir = ctx.run_dir / "stratify" / name;
  auto j = open_out(dir / "subgroups.json");
  j << metrics::to_json(report).dump(2) << '\n';
  auto c = open_out(dir / "subgroups.csv");
  metrics::write_metrics_csv(c, report);
  for (const auto& [g, s] : report.subgroups) *ctx.out << g << ": n=" << s.n << " auroc " << fmt(s.auroc) << '\n';
}

// --------------------------------------------------------------------------
// Report

struct CohortRow {
  std::string name;
  std::size_t n = 0, cases = 0, female = 0, male = 0;
  double age_mean = 0.0, age_sd = 0.0;
  std::array<std::size_t, 5> imd{};
};

inline CohortRow cohort_row(const std::string& name, const std::vector<PatientHistory>& hs) {
  CohortRow r;
  r.name = name;
  r.n = hs.size();
  std::vector<double> ages;
  for (const auto& h : hs) {
    r.cases += h.label ? 1 : 0;
    (h.demographics.sex == cohort::Sex::female ? r.female : r.male) += 1;
    r.imd.at(static_cast<std::size_t>(h.demographics.imd_quintile - 1)) += 1;
    ages.push_back(cohort::age_at_prediction(h));
  }
  const auto ms = model::mean_sd(ages);
  r.age_mean = ms.mean;
  r.age_sd = ms.sd;
  return r;
}

inline void write_cohort_table(std::ostream& out, const std::vector<CohortRow>& rows) {
  out << "partition,n,cases,case_pct,female,male,age_mean,age_sd,imd1,imd2,imd3,imd4,imd5\n";
  for (const auto& r : rows) {
    out << r.name << ',' << r.n << ',' << r.cases << ',' << fmt(r.n ? 100.0 * static_cast<double>(r.cases) / static_cast<double>(r.n) : 0.0, 2)
        << ',' << r.female << ',' << r.male << ',' << fmt(r.age_mean, 2) << ',' << fmt(r.age_sd, 2);
    for (auto c : r.imd) out << ',' << c;
    out << '\n';
  }
}

/// Splits one CSV line; fields may be double-quoted.
inline std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (char c : line) {
    if (c == '"')
      quoted = !quoted;
    else if (c == ',' && !quoted)
      out.emplace_back();
    else
      out.back() += c;
  }
  return out;
}

/// Renders a CSV file as a markdown table.
inline std::string csv_to_markdown(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, md;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv_fields(line);
    md += "|";
    for (const auto& x : f) md += " " + x + " |";
    md += "\n";
    if (header) {
      md += "|";
      for (std::size_t i = 0; i < f.size(); ++i) md += " --- |";
      md += "\n";
      header = false;
    }
  }
  return md;
}

/// Markdown section from an artifact file, or a note naming the command that makes it.
inline std::string section_from(const fs::path& path, const std::string& command) {
  if (!fs::exists(path)) return "_Not available: run `tgcnn " + command + "`._\n";
  return csv_to_markdown(read_file(path));
}

inline void cmd_report(const Context& ctx) {
  const auto p = load_prepared(ctx);
  const auto dir = ctx.run_dir / "report";
  std::vector<CohortRow> rows{cohort_row("included", p.included), cohort_row("matched_train", p.matched_train), cohort_row("test1", p.test1),
                              cohort_row("test2", p.test2)};
  {
    auto f = open_out(dir / "cohort_table.csv");
    write_cohort_table(f, rows);
  }
  const auto recal = ctx.run_dir / "recalibration" / "tgcnn";
  for (const auto* stem : {"test2_before_metrics.csv", "test2_after_metrics.csv", "test2_before_curve.csv", "test2_after_curve.csv"})
    if (fs::exists(recal / stem)) fs::copy_file(recal / stem, dir / stem, fs::copy_options::overwrite_existing);
  for (const auto& [from, to] : std::vector<std::pair<fs::path, std::string>>{
           {ctx.run_dir / "cv" / "table.csv", "cv_table.csv"}, {ctx.run_dir / "ablation" / "table.csv", "ablation_table.csv"}})
    if (fs::exists(from)) fs::copy_file(from, dir / to, fs::copy_options::overwrite_existing);

  std::ostringstream md;
  md << "# Run report\n\n";
  md << "Run directory: `" << ctx.run_dir.filename().string() << "`, seed " << ctx.cfg.seed << ".\n\n";
  md << "## Cohort\n\n";
  md << p.n_raw << " patients ingested, " << p.included.size() << " after windowing and inclusion.\n\n";
  md << section_from(dir / "cohort_table.csv", "prepare") << '\n';
  md << "## Cross-validation on the matched training set\n\nMean (SD) over folds.\n\n" << section_from(dir / "cv_table.csv", "cv") << '\n';
  md << "## Ablation\n\n" << section_from(dir / "ablation_table.csv", "ablate") << '\n';
  md << "## Test 2 metrics, before recalibration\n\n" << section_from(dir / "test2_before_metrics.csv", "recalibrate") << '\n';
  md << "## Test 2 metrics, after recalibration on Test 1\n\n" << section_from(dir / "test2_after_metrics.csv", "recalibrate") << '\n';
  md << "## Calibration curve, before recalibration\n\n" << section_from(dir / "test2_before_curve.csv", "recalibrate") << '\n';
  md << "## Calibration curve, after recalibration\n\n" << section_from(dir / "test2_after_curve.csv", "recalibrate");
  auto f = open_out(dir / "report.md");
  f << md.str();
  *ctx.out << "report written to " << (dir / "report.md").string() << '\n';
}

// --------------------------------------------------------------------------
// Entry point

/// Runs the CLI on `args` (program name first). Returns the process exit code.
inline int cli_main(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Temporal graph CNN pipeline for hip replacement prediction on synthetic EHR data", "tgcnn"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.fallthrough();

  std::string config_file, run_dir, runs_root;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_patients;
  std::optional<double> prevalence;
  app.add_option("--config", config_file, "key = value configuration file");
  app.add_option("--set", overrides, "override one configuration key (key=value); repeatable");
  app.add_option("--seed", seed, "run seed (falls back to RUN_SEED, then 1)");
  app.add_option("--run-dir", run_dir, "use this run directory instead of the hashed one; its config.txt is the base configuration");
  app.add_option("--runs-root", runs_root, "parent of hashed run directories");
  app.add_option("--n", n_patients, "synthetic cohort size (gen.n_patients)");
  app.add_option("--prevalence", prevalence, "synthetic case prevalence (gen.case_prevalence)");

  std::string model_name = "tgcnn", partition = "test2";
  std::vector<std::string> cv_models = model_names();

  auto* generate = app.add_subcommand("generate", "write a synthetic cohort");
  auto* prepare = app.add_subcommand("prepare", "window, include, split and match the cohort; build the vocabulary");
  auto* trainc = app.add_subcommand("train", "fit the model with early stopping on one fold");
  auto* cv = app.add_subcommand("cv", "k-fold cross-validation on the matched training set");
  cv->add_option("--models", cv_models, "models to cross-validate")->delimiter(',');
  auto* search = app.add_subcommand("search", "random hyperparameter search");
  auto* ablate = app.add_subcommand("ablate", "cross-validate every ablation variant");
  auto* evaluate = app.add_subcommand("evaluate", "score a partition with bootstrap intervals");
  evaluate->add_option("--model", model_name, "tgcnn, lr_demographics, lr_codes, lr_both, rnn or lstm");
  evaluate->add_option("--partition", partition, "matched_train, test1 or test2");
  auto* recalibrate = app.add_subcommand("recalibrate", "fit recalibration on Test 1 and apply it to Test 2");
  recalibrate->add_option("--model", model_name, "model to recalibrate");
  auto* stratify = app.add_subcommand("stratify", "subgroup metrics on recalibrated Test 2 predictions");
  stratify->add_option("--model", model_name, "model to stratify");
  auto* report = app.add_subcommand("report", "collect tables and curves into a markdown report");
  (void)generate, (void)prepare, (void)trainc, (void)search, (void)ablate, (void)report;

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsage;
  }

  try {
    Context ctx;
    ctx.out = &out;
    std::set<std::string> seen;
    if (!run_dir.empty() && fs::exists(fs::path(run_dir) / "config.txt"))
      ctx.cfg = config::load_config(fs::path(run_dir) / "config.txt", {}, &seen);
    if (!config_file.empty()) ctx.cfg = config::load_config(config_file, ctx.cfg, &seen);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
      config::set_value(ctx.cfg, config::detail::trim(o.substr(0, eq)), config::detail::trim(o.substr(eq + 1)));
      seen.insert(config::detail::trim(o.substr(0, eq)));
    }
    if (n_patients) ctx.cfg.generator.n_patients = *n_patients;
    if (prevalence) ctx.cfg.generator.case_prevalence = *prevalence;
    if (!runs_root.empty()) ctx.cfg.runs_root = runs_root;
    if (seed) {
      ctx.cfg.seed = *seed;
    } else if (!seen.count("seed")) {
      if (auto env = config::environment_seed()) ctx.cfg.seed = *env;
    }
    config::validate(ctx.cfg);
    ctx.run_dir = run_dir.empty() ? config::run_directory(ctx.cfg) : fs::path(run_dir);
    fs::create_directories(ctx.run_dir);
    {
      auto f = open_out(ctx.run_dir / "config.txt");
      f << config::to_text(ctx.cfg);
    }

    if (app.got_subcommand("generate")) cmd_generate(ctx);
    if (app.got_subcommand("prepare")) cmd_prepare(ctx);
    if (app.got_subcommand("train")) cmd_train(ctx);
    if (app.got_subcommand("cv")) cmd_cv(ctx, cv_models);
    if (app.got_subcommand("search")) cmd_search(ctx);
    if (app.got_subcommand("ablate")) cmd_ablate(ctx);
    if (app.got_subcommand("evaluate")) cmd_evaluate(ctx, model_name, partition);
    if (app.got_subcommand("recalibrate")) cmd_recalibrate(ctx, model_name);
    if (app.got_subcommand("stratify")) cmd_stratify(ctx, model_name);
    if (app.got_subcommand("report")) cmd_report(ctx);
    return kSuccess;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
}

inline int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return cli_main(args);
}

}  // namespace tgcnn::cli
