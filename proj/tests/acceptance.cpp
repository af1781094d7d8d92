// Acceptance checks: one PASS/FAIL line per criterion, exit status 0 only if all pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "tgcnn/baselines.hpp"
#include "tgcnn/cli.hpp"
#include "tgcnn/cohort.hpp"
#include "tgcnn/graph_builder.hpp"
#include "tgcnn/metrics.hpp"
#include "tgcnn/training.hpp"

namespace fs = std::filesystem;
using namespace tgcnn;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("tgcnn_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "tgcnn");
  std::ostringstream out, err;
  const int code = cli::cli_main(args, out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

// ------------------------------------------------------------------ 1

/// Dense reference: materialise the V x V x K tensor per sample and slide every filter over it.
std::vector<double> dense_conv(const ad::Array& w, const ad::SparseBatch& sb, const std::vector<double>& values, int stride) {
  const int F = static_cast<int>(w.shape[0]), V = sb.V, d = static_cast<int>(w.shape[3]), K = sb.K, B = sb.batch;
  const int L = (K - d) / stride + 1;
  std::vector<double> dense(static_cast<std::size_t>(B) * V * V * K, 0.0);
  auto at = [&](int b, int i, int j, int k) -> double& { return dense[((static_cast<std::size_t>(b) * V + i) * V + j) * K + k]; };
  for (std::size_t e = 0; e < sb.entries.size(); ++e) {
    const auto& en = sb.entries[e];
    at(en.sample, en.i, en.j, en.k) += values[e];
  }
  std::vector<double> out(static_cast<std::size_t>(F) * L * B, 0.0);
  for (int f = 0; f < F; ++f)
    for (int l = 0; l < L; ++l)
      for (int b = 0; b < B; ++b) {
        double s = 0.0;
        for (int i = 0; i < V; ++i)
          for (int j = 0; j < V; ++j)
            for (int q = 0; q < d; ++q) s += w.data[((static_cast<std::size_t>(f) * V + i) * V + j) * d + q] * at(b, i, j, l * stride + q);
        out[static_cast<std::size_t>(f) * L * B + static_cast<std::size_t>(l) * B + b] = s;
      }
  return out;
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    auto sb = std::make_shared<ad::SparseBatch>();
    sb->V = 1 + static_cast<int>(rng.index(8));
    sb->K = 1 + static_cast<int>(rng.index(10));
    sb->batch = 1 + static_cast<int>(rng.index(3));
    const int d = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(std::min(3, sb->K))));
    const int F = 1 + static_cast<int>(rng.index(4));
    const int stride = 1 + static_cast<int>(rng.index(2));
    std::set<std::tuple<int, int, int, int>> used;
    const int nnz = static_cast<int>(rng.index(static_cast<std::size_t>(sb->V * sb->V * sb->K * sb->batch) / 2 + 2));
    for (int e = 0; e < nnz; ++e) {
      const int b = static_cast<int>(rng.index(static_cast<std::size_t>(sb->batch)));
      const int i = static_cast<int>(rng.index(static_cast<std::size_t>(sb->V)));
      const int j = static_cast<int>(rng.index(static_cast<std::size_t>(sb->V)));
      const int k = static_cast<int>(rng.index(static_cast<std::size_t>(sb->K)));
      if (used.insert({b, i, j, k}).second) sb->entries.push_back({i, j, k, b});
    }
    ad::Array w({static_cast<std::size_t>(F), static_cast<std::size_t>(sb->V), static_cast<std::size_t>(sb->V), static_cast<std::size_t>(d)});
    for (auto& x : w.data) x = rng.uniform(-1.0, 1.0);
    ad::Array vals = ad::Array::matrix(sb->entries.size(), 1);
    for (auto& x : vals.data) x = rng.uniform(0.0, 1.0);
    ad::Tape tape;
    const auto out = ad::sparse_conv3d(tape.constant(w), tape.constant(vals), sb, stride);
    const auto expected = dense_conv(w, *sb, vals.data, stride);
    const auto& got = tape.value(out).data;
    if (got.size() != expected.size()) return {false, "shape mismatch on instance " + std::to_string(inst)};
    for (std::size_t q = 0; q < got.size(); ++q) worst = std::max(worst, std::abs(got[q] - expected[q]));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10 && secs < 10.0, "100 instances, max abs diff " + num(worst) + ", " + num(secs, 3) + " s"};
}

// ------------------------------------------------------------------ 2

model::EncodedSet toy_set(int V, int K, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  model::EncodedSet s{V, K, {}};
  for (std::size_t p = 0; p < n; ++p) {
    model::EncodedPatient e;
    e.patient_id = "T" + std::to_string(100 + p);
    e.label = p % 2 == 1;
    const int transitions = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(K)));
    std::set<std::tuple<int, int, int>> used;
    for (int k = K - transitions; k < K; ++k) {
      const double t = rng.uniform(0.0, 6.0);
      for (int q = 0; q < 3; ++q) {
        const int i = static_cast<int>(rng.index(static_cast<std::size_t>(V)));
        const int j = static_cast<int>(rng.index(static_cast<std::size_t>(V)));
        if (used.insert({i, j, k}).second) e.entries.push_back({i, j, k, t});
      }
    }
    e.age = 45.0 + static_cast<double>(rng.index(40));
    e.sex = static_cast<double>(rng.index(2));
    e.imd_quintile = 1 + static_cast<int>(rng.index(5));
    s.patients.push_back(std::move(e));
  }
  return s;
}

Outcome criterion2() {
  const auto t0 = Clock::now();
  model::ModelConfig cfg;
  cfg.K = 8;
  cfg.filter_depth = 2;
  cfg.n_filters = 3;
  cfg.lstm_hidden = 8;
  cfg.dense_sizes = {4};
  cfg.dropout = 0.0;
  cfg.lambda_l1 = 0.01;
  cfg.lambda_l2 = 0.01;
  cfg.lambda_g = 0.01;
  const auto data = toy_set(6, 8, 6, 17);
  auto params = model::init_parameters(cfg, 6, 3);
  params["demo.age_stats"] = model::age_statistics(data);
  const auto report = ad::finite_difference_check(model::loss_function(data, cfg), params, {.eps = 1e-5, .max_elements_per_array = 200, .seed = 2, .only = {}});
  const double secs = seconds_since(t0);
  std::string worst_name;
  double worst = 0.0;
  for (const auto& [name, err] : report.per_parameter)
    if (err >= worst) {
      worst = err;
      worst_name = name;
    }
  const bool gammas = report.per_parameter.count("s0.gamma_raw") && report.per_parameter.count("s1.gamma_raw");
  return {gammas && report.max_rel_error < 1e-4 && secs < 60.0,
          std::to_string(report.per_parameter.size()) + " groups incl. both gamma_raw, max rel err " + num(worst) + " (" + worst_name + "), " +
              num(secs, 3) + " s"};
}

// ------------------------------------------------------------------ 3

double pairwise_auroc(const Predictions& p) {
  double conc = 0.0, pairs = 0.0;
  for (const auto& a : p)
    if (a.label)
      for (const auto& b : p)
        if (!b.label) {
          conc += a.probability > b.probability ? 1.0 : a.probability == b.probability ? 0.5 : 0.0;
          pairs += 1.0;
        }
  return conc / pairs;
}

double rank_walk_ap(const Predictions& p) {
  // rank of each row: descending score, ties by ascending id
  std::vector<std::pair<std::size_t, double>> precisions;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!p[i].label) continue;
    std::size_t rank = 1, hits = 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const bool before = p[j].probability > p[i].probability || (p[j].probability == p[i].probability && p[j].patient_id < p[i].patient_id);
      if (before) ++rank;
      if (p[j].label && (before || j == i)) ++hits;
    }
    precisions.emplace_back(rank, static_cast<double>(hits) / static_cast<double>(rank));
  }
  std::sort(precisions.begin(), precisions.end());
  double s = 0.0;
  for (const auto& [r, v] : precisions) s += v;
  return s / static_cast<double>(precisions.size());
}

Predictions simulate(std::size_t n, double distort, std::uint64_t seed) {
  Rng rng(seed);
  Predictions out;
  for (std::size_t i = 0; i < n; ++i) {
    const double eta = rng.normal(-1.0, 1.2);
    const bool y = rng.uniform() < 1.0 / (1.0 + std::exp(-eta));
    const double shown = distort * eta;
    char id[16];
    std::snprintf(id, sizeof id, "S%06zu", i);
    out.push_back({id, 1.0 / (1.0 + std::exp(-shown)), shown, y});
  }
  return out;
}

Outcome criterion3() {
  Rng rng(303);
  int auroc_mismatch = 0, ap_mismatch = 0, instances = 0;
  while (instances < 1000) {
    const std::size_t n = 2 + rng.index(199);
    const int levels = rng.bernoulli(0.5) ? 5 : 1000000;  // coarse scores force ties
    Predictions p;
    for (std::size_t i = 0; i < n; ++i) {
      char id[16];
      std::snprintf(id, sizeof id, "P%05zu", rng.index(100000));
      const double s = static_cast<double>(rng.index(static_cast<std::size_t>(levels)) + 1) / static_cast<double>(levels + 1);
      p.push_back({id + std::to_string(i), s, 0.0, rng.bernoulli(0.3)});
    }
    const auto pos = std::count_if(p.begin(), p.end(), [](const Prediction& x) { return x.label; });
    if (pos == 0 || pos == static_cast<long>(n)) continue;
    ++instances;
    if (metrics::auroc(p) != pairwise_auroc(p)) ++auroc_mismatch;
    if (metrics::auprc(p) != rank_walk_ap(p)) ++ap_mismatch;
  }
  const auto c1 = metrics::calibration_slope_intercept(simulate(20000, 1.0, 31));
  const auto c2 = metrics::calibration_slope_intercept(simulate(20000, 0.5, 32));
  const bool ok = auroc_mismatch == 0 && ap_mismatch == 0 && std::abs(c1.slope - 1.0) <= 0.05 && std::abs(c2.slope - 2.0) <= 0.1;
  return {ok, "auroc mismatches " + std::to_string(auroc_mismatch) + "/1000, auprc mismatches " + std::to_string(ap_mismatch) +
                  "/1000, slopes " + num(c1.slope) + " (target 1.0) and " + num(c2.slope) + " (target 2.0)"};
}

// ------------------------------------------------------------------ 4

Outcome criterion4() {
  const auto t0 = Clock::now();
  cohort::GeneratorConfig g;
  g.n_patients = 100000;
  g.case_prevalence = 0.07;
  const std::uint64_t seed = 11;
  ScopedLogCapture quiet;
  const auto split = cohort::split_cohort(cohort::prepare_histories(cohort::generate_synthetic_cohort(g, seed)), seed, {});
  const auto vocab = graph::build_vocabulary(split.matched_train);
  std::vector<cohort::PatientHistory> tr, va;
  for (const auto& h : split.matched_train) (split.fold_assignment.at(h.patient_id) == 0 ? va : tr).push_back(h);
  model::ModelConfig cfg;
  cfg.n_filters = 8;
  cfg.lstm_hidden = 16;
  cfg.dense_sizes = {16};
  cfg.K = 50;
  cfg.max_epochs = 6;
  cfg.seed = seed;
  const auto res = model::train_model(tr, va, vocab, cfg);
  const auto p1 = model::predict(res.params, split.test1, vocab, cfg);
  const auto p2 = model::predict(res.params, split.test2, vocab, cfg);
  const auto c1 = metrics::calibration_slope_intercept(p1);
  const auto r = metrics::recalibrate_fit(p1);
  const auto after = metrics::recalibrate_apply(r, p2);
  const auto ca = metrics::calibration_slope_intercept(after);
  const double z = (c1.slope - 1.0) / c1.slope_se;
  const double auc_shift = std::abs(metrics::auroc(after) - metrics::auroc(p2));
  const bool ok = std::abs(z) > 1.96 && ca.slope >= 0.8 && ca.slope <= 1.2 && auc_shift <= 1e-12;
  return {ok, "test1 slope " + num(c1.slope) + " (z vs 1 = " + num(z, 3) + "), test2 slope after recalibration " + num(ca.slope) +
                  ", test2 AUROC change " + num(auc_shift) + ", " + num(seconds_since(t0), 3) + " s"};
}

// ------------------------------------------------------------------ 5

Outcome criterion5() {
  const auto t0 = Clock::now();
  cohort::GeneratorConfig g;
  g.n_patients = 2000;
  g.case_prevalence = 0.25;
  const std::uint64_t seed = 7;
  ScopedLogCapture quiet;
  const auto split = cohort::split_cohort(cohort::prepare_histories(cohort::generate_synthetic_cohort(g, seed)), seed, {});
  const auto vocab = graph::build_vocabulary(split.matched_train);
  std::vector<cohort::PatientHistory> tr, va;
  for (const auto& h : split.matched_train) (split.fold_assignment.at(h.patient_id) == 0 ? va : tr).push_back(h);
  model::ModelConfig cfg;
  cfg.seed = seed;
  const auto res = model::train_model(tr, va, vocab, cfg);
  const double tg = metrics::auroc(model::predict(res.params, va, vocab, cfg));
  const auto lr = baselines::fit_logistic_baseline(tr, vocab, baselines::FeatureSet::demographics);
  const double demo = metrics::auroc(baselines::predict_logistic(lr, va, vocab));
  const double secs = seconds_since(t0);
  return {tg >= 0.80 && tg - demo >= 0.10 && secs < 900.0,
          "validation AUROC " + num(tg) + " vs demographics-only LR " + num(demo) + " on " + std::to_string(va.size()) + " matched patients, " +
              num(secs, 3) + " s"};
}

// ------------------------------------------------------------------ 6

const char* kTinyRun =
    "gen.n_patients = 800\n"
    "gen.case_prevalence = 0.2\n"
    "model.n_filters = 3\n"
    "model.lstm_hidden = 4\n"
    "model.dense_sizes = 4\n"
    "model.max_epochs = 2\n"
    "model.K = 20\n"
    "seq.max_epochs = 2\n"
    "bootstrap = 20\n"
    "n_folds = 3\n";

Outcome criterion6() {
  const auto root = scratch_dir("ablate");
  {
    std::ofstream f(root / "run.cfg");
    f << kTinyRun;
  }
  const std::vector<std::string> common{"--config", (root / "run.cfg").string(), "--runs-root", (root / "runs").string(), "--seed", "3"};
  for (const char* cmd : {"generate", "prepare", "ablate"}) {
    std::vector<std::string> a{cmd};
    a.insert(a.end(), common.begin(), common.end());
    if (cli(a) != 0) return {false, std::string(cmd) + " failed"};
  }
  fs::path run;
  for (const auto& e : fs::directory_iterator(root / "runs")) run = e.path();

  // table lists every variant once, in order
  std::ifstream table(run / "ablation" / "table.csv");
  std::string line;
  std::getline(table, line);
  std::vector<std::string> names;
  while (std::getline(table, line)) names.push_back(cli::csv_fields(line).at(0));
  const bool all_variants = names == model::ablation_names() && names.size() == 11;

  // w/o time trained on every fold
  bool time_trained = true;
  std::ifstream folds(run / "ablation" / "folds_wo_time.csv");
  std::getline(folds, line);
  int fold_rows = 0;
  while (std::getline(folds, line)) {
    ++fold_rows;
    time_trained &= cli::csv_fields(line).at(2) != "nan";
  }
  time_trained &= fold_rows == 3;

  // w/o time: every transformed tensor value is exactly one
  cli::Context ctx;
  ctx.cfg = config::load_config(run / "config.txt");
  ctx.run_dir = run;
  const auto prepared = cli::load_prepared(ctx);
  const auto wo_time = model::ablation_config("wo_time", ctx.cfg.model_config());
  const auto enc = model::encode(prepared.matched_train, prepared.vocab, wo_time);
  const auto params = model::init_parameters(wo_time, enc.V, 1);
  ad::Tape tape;
  const auto vars = train::bind(tape, params, model::trainable_names(params));
  std::vector<double> t;
  for (const auto& p : enc.patients)
    for (const auto& e : p.entries) t.push_back(e.t);
  std::size_t not_one = 0, checked = 0;
  for (int s = 0; s < wo_time.n_streams(); ++s)
    for (double v : tape.value(model::stream_values(tape, vars, t, s, wo_time)).data) {
      not_one += v != 1.0;
      ++checked;
    }

  // w/o two streams: one stream of K - d + 1 positions
  const auto single = model::ablation_config("wo_two_streams", ctx.cfg.model_config());
  const auto sp = model::init_parameters(single, enc.V, 1);
  ad::Tape t2;
  const auto v2 = train::bind(t2, sp, {});
  std::vector<std::size_t> idx{0, 1, 2, 3};
  model::forward(t2, v2, enc, idx, single);
  std::vector<std::size_t> widths;
  for (std::size_t id = 0; id < t2.size(); ++id)
    if (t2.node(id).op == "sparse_conv3d") widths.push_back(t2.node(id).value.cols());
  const std::size_t L = static_cast<std::size_t>(single.K - single.filter_depth + 1);
  const bool one_stream = single.n_streams() == 1 && !sp.count("s1.filters") && widths == std::vector<std::size_t>{L * idx.size()};

  fs::remove_all(root);
  return {all_variants && time_trained && not_one == 0 && checked > 0 && one_stream,
          std::to_string(names.size()) + " variants; w/o time trained on " + std::to_string(fold_rows) + " folds with " + std::to_string(not_one) +
              " of " + std::to_string(checked) + " values != 1; w/o two streams has " + std::to_string(widths.size()) + " stream(s), L = " +
              std::to_string(widths.empty() ? 0 : widths[0] / idx.size())};
}

// ------------------------------------------------------------------ 7

std::map<std::string, std::string> tree_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), dir).string()] = ss.str();
  }
  return out;
}

Outcome criterion7() {
  const auto root = scratch_dir("determinism");
  {
    std::ofstream f(root / "run.cfg");
    f << kTinyRun;
  }
  std::vector<std::map<std::string, std::string>> trees;
  // same runs root both times so the configurations are identical; the first run is moved aside
  for (const char* kept : {"first", "second"}) {
    const std::vector<std::string> common{"--config", (root / "run.cfg").string(), "--runs-root", (root / "runs").string(), "--seed", "9"};
    for (const char* cmd : {"generate", "prepare", "train", "cv", "evaluate", "recalibrate", "stratify", "report"}) {
      std::vector<std::string> a{cmd};
      a.insert(a.end(), common.begin(), common.end());
      if (cli(a) != 0) return {false, std::string(cmd) + " failed"};
    }
    fs::rename(root / "runs", root / kept);
    trees.push_back(tree_bytes(root / kept));
  }
  std::size_t differing = 0;
  for (const auto& [name, bytes] : trees[0]) {
    auto it = trees[1].find(name);
    if (it == trees[1].end() || it->second != bytes) {
      ++differing;
      std::cerr << "differs: " << name << '\n';
    }
  }
  bool key_files = true;
  for (const auto* f : {"model/checkpoint.bin", "model/history.csv", "report/report.md"}) {
    bool found = false;
    for (const auto& [name, _] : trees[0]) found |= name.ends_with(f);
    key_files &= found;
  }
  fs::remove_all(root);
  return {differing == 0 && trees[0].size() == trees[1].size() && key_files,
          std::to_string(trees[0].size()) + " files per run (checkpoint, history, report included), " + std::to_string(differing) + " differ"};
}

// ------------------------------------------------------------------ 8

Outcome criterion8() {
  cohort::GeneratorConfig g;
  g.n_patients = 20000;
  const std::uint64_t seed = 5;
  ScopedLogCapture quiet;
  const auto raw = cohort::generate_synthetic_cohort(g, seed);
  const auto prepared = cohort::prepare_histories(raw);

  // windowing: no retained case visit on or after (replacement year - 1, same month, same day)
  std::map<std::string, const cohort::PatientHistory*> kept;
  for (const auto& h : prepared) kept[h.patient_id] = &h;
  std::size_t in_window_raw = 0, in_window_kept = 0;
  auto in_window = [](const cohort::Visit& v, Date rep) {
    // ISO dates compare chronologically as strings
    const std::string r = rep.to_string();
    char cutoff[16];
    std::snprintf(cutoff, sizeof cutoff, "%04d%s", rep.year() - 1, r.substr(4).c_str());
    return v.date.to_string() >= std::string(cutoff);
  };
  for (const auto& h : raw) {
    if (!h.label || !h.replacement_date) continue;
    for (const auto& v : h.visits) in_window_raw += in_window(v, *h.replacement_date) ? v.codes.size() : 0;
    if (auto it = kept.find(h.patient_id); it != kept.end())
      for (const auto& v : it->second->visits) in_window_kept += in_window(v, *h.replacement_date) ? v.codes.size() : 0;
  }

  const auto split = cohort::split_cohort(prepared, seed, {});
  std::map<std::string, const cohort::PatientHistory*> by_id;
  for (const auto& h : prepared) by_id[h.patient_id] = &h;
  std::size_t mismatched = 0;
  double gap = 0.0;
  for (const auto& p : split.pairs) {
    const auto& c = *by_id.at(p.case_id);
    const auto& k = *by_id.at(p.control_id);
    mismatched += c.demographics.sex != k.demographics.sex || c.demographics.imd_quintile != k.demographics.imd_quintile;
    const int ref_year = c.replacement_date->year();
    gap += std::abs((ref_year - c.demographics.birth_year) - (ref_year - k.demographics.birth_year));
  }
  const double mean_gap = split.pairs.empty() ? 1e9 : gap / static_cast<double>(split.pairs.size());

  std::set<std::string> seen;
  std::size_t overlaps = 0;
  for (const auto* part : {&split.matched_train, &split.test1, &split.test2})
    for (const auto& h : *part) overlaps += !seen.insert(h.patient_id).second;
  auto prevalence = [](const std::vector<cohort::PatientHistory>& hs) {
    return static_cast<double>(std::count_if(hs.begin(), hs.end(), [](const auto& h) { return h.label; })) / static_cast<double>(hs.size());
  };
  const double base = prevalence(prepared);
  const double d1 = std::abs(prevalence(split.test1) - base), d2 = std::abs(prevalence(split.test2) - base);

  const bool ok = in_window_raw > 0 && in_window_kept == 0 && mismatched == 0 && mean_gap <= 2.0 && overlaps == 0 && d1 <= 0.01 && d2 <= 0.01;
  return {ok, std::to_string(in_window_raw) + " in-window case codes before windowing, " + std::to_string(in_window_kept) + " after; " +
                  std::to_string(split.pairs.size()) + " pairs, " + std::to_string(mismatched) + " sex/IMD mismatches, mean age gap " +
                  num(mean_gap, 3) + " y; " + std::to_string(overlaps) + " overlaps; prevalence " + num(100 * base, 3) + "% vs test1 " +
                  num(100 * prevalence(split.test1), 3) + "% and test2 " + num(100 * prevalence(split.test2), 3) + "%"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"sparse convolution matches dense oracle", criterion1}, {"full-loss gradient check", criterion2},
      {"metric oracles", criterion3},                          {"recalibration behaviour", criterion4},
      {"learnability", criterion5},                            {"ablation harness", criterion6},
      {"determinism", criterion7},                             {"cohort protocol", criterion8},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t c = 0; c < criteria.size(); ++c) {
    const int number = static_cast<int>(c + 1);
    if (!only.empty() && !only.count(number)) continue;
    Outcome o;
    try {
      o = criteria[c].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << number << " (" << criteria[c].first << "): " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
