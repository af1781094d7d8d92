#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tgcnn/cli.hpp"
#include "tgcnn/config.hpp"

namespace fs = std::filesystem;
using namespace tgcnn;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("tgcnn_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "tgcnn");
  std::ostringstream out, err;
  const int code = cli::cli_main(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

const char* kSmall =
    "gen.n_patients = 600\n"
    "gen.case_prevalence = 0.2\n"
    "model.n_filters = 3\n"
    "model.lstm_hidden = 4\n"
    "model.dense_sizes = 4\n"
    "model.max_epochs = 2\n"
    "model.K = 20\n"
    "seq.max_epochs = 1\n"
    "bootstrap = 10\n"
    "n_folds = 3\n";

}  // namespace

TEST(Config, TextRoundTrip) {
  config::RunConfig c;
  c.seed = 42;
  c.generator.n_patients = 321;
  c.model.dense_sizes = {8, 4};
  c.sequence.hidden = 7;
  std::istringstream in(config::to_text(c));
  config::RunConfig back;
  config::apply_text(back, in, "mem");
  EXPECT_EQ(config::to_text(back), config::to_text(c));
  EXPECT_EQ(back.generator.n_patients, 321u);
  EXPECT_EQ(back.model.dense_sizes, (std::vector<int>{8, 4}));
}

TEST(Config, CommentsAndBlankLines) {
  std::istringstream in("# header\n\n  model.lr = 0.01   # trailing\nseed=9\n");
  config::RunConfig c;
  std::set<std::string> seen;
  config::apply_text(c, in, "mem", &seen);
  EXPECT_DOUBLE_EQ(c.model.lr, 0.01);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(seen, (std::set<std::string>{"model.lr", "seed"}));
}

TEST(Config, UnknownKeyNamesLine) {
  std::istringstream in("seed = 1\nmodel.bogus = 3\n");
  config::RunConfig c;
  try {
    config::apply_text(c, in, "f.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("f.cfg:2"), std::string::npos);
  }
}

TEST(Config, MalformedValueRejected) {
  config::RunConfig c;
  EXPECT_THROW(config::set_value(c, "n_folds", "five"), ConfigError);
  EXPECT_THROW(config::set_value(c, "period_start", "2020/01/01"), ConfigError);
  EXPECT_THROW(config::set_value(c, "model.use_lstm", "maybe"), ConfigError);
}

TEST(Config, ValidateCatchesBadCombinations) {
  config::RunConfig c;
  c.val_fold = c.n_folds;
  EXPECT_THROW(config::validate(c), ConfigError);
  c = {};
  c.test_fraction = 1.0;
  EXPECT_THROW(config::validate(c), ConfigError);
  c = {};
  EXPECT_NO_THROW(config::validate(c));
}

TEST(Config, HashIgnoresSeedAndRunsRoot) {
  config::RunConfig a, b;
  b.seed = 99;
  b.runs_root = "elsewhere";
  EXPECT_EQ(config::config_hash(a), config::config_hash(b));
  b.model.lr = 0.5;
  EXPECT_NE(config::config_hash(a), config::config_hash(b));
  a.seed = 7;
  EXPECT_NE(config::run_directory(a).filename().string().find("-seed7"), std::string::npos);
}

TEST(Cli, ExitCodes) {
  TempDir tmp("codes");
  EXPECT_EQ(run({"--help"}).code, 0);
  const auto bad = run({"train", "--bogus-flag"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"train", "--config", (tmp.path / "missing.cfg").string()}).code, 2);
  EXPECT_EQ(run({"train", "--runs-root", tmp.path.string(), "--set", "nonsense=1"}).code, 1);
  EXPECT_EQ(run({"train", "--runs-root", tmp.path.string(), "--set", "n_folds=1"}).code, 1);
  // no cohort prepared yet
  const auto r = run({"train", "--runs-root", tmp.path.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("prepare"), std::string::npos);
}

TEST(Cli, SeedPrecedence) {
  TempDir tmp("seed");
  write(tmp.path / "a.cfg", "seed = 5\n");
  ::setenv("RUN_SEED", "11", 1);
  // environment applies when nothing else sets the seed
  ASSERT_EQ(run({"report", "--runs-root", tmp.path.string()}).code, 2);
  bool found = false;
  for (const auto& e : fs::directory_iterator(tmp.path)) found |= e.path().filename().string().ends_with("-seed11");
  EXPECT_TRUE(found);
  // file beats environment, flag beats file
  config::RunConfig c = config::load_config(tmp.path / "a.cfg");
  EXPECT_EQ(c.seed, 5u);
  ASSERT_EQ(run({"report", "--runs-root", tmp.path.string(), "--config", (tmp.path / "a.cfg").string()}).code, 2);
  ASSERT_EQ(run({"report", "--runs-root", tmp.path.string(), "--config", (tmp.path / "a.cfg").string(), "--seed", "3"}).code, 2);
  ::unsetenv("RUN_SEED");
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(tmp.path))
    if (e.is_directory()) names.insert(e.path().filename().string().substr(e.path().filename().string().find("-seed")));
  EXPECT_EQ(names, (std::set<std::string>{"-seed11", "-seed5", "-seed3"}));
}

TEST(Cli, GeneratePrepareTrainPipeline) {
  TempDir tmp("pipeline");
  write(tmp.path / "small.cfg", kSmall);
  const std::vector<std::string> common{"--config", (tmp.path / "small.cfg").string(), "--runs-root", (tmp.path / "runs").string(), "--seed", "4"};
  auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), common.begin(), common.end());
    return run(a);
  };
  ASSERT_EQ(with({"generate"}).code, 0);
  ASSERT_EQ(with({"prepare"}).code, 0);
  const auto t = with({"train"});
  ASSERT_EQ(t.code, 0) << t.err;

  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(tmp.path / "runs")) dirs.push_back(e.path());
  ASSERT_EQ(dirs.size(), 1u);
  const auto dir = dirs[0];
  for (const auto* f : {"config.txt", "cohort/events.csv", "split/manifest.csv", "split/pairs.csv", "split/vocab.txt", "model/checkpoint.bin",
                        "model/history.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;

  // the echoed configuration reproduces the run directory and the checkpoint
  const auto ckpt = slurp(dir / "model/checkpoint.bin");
  const auto re = run({"train", "--config", (dir / "config.txt").string(), "--runs-root", (tmp.path / "runs").string()});
  ASSERT_EQ(re.code, 0) << re.err;
  EXPECT_EQ(slurp(dir / "model/checkpoint.bin"), ckpt);

  // explicit run directory reads its own config.txt
  ASSERT_EQ(run({"evaluate", "--run-dir", dir.string(), "--model", "lr_demographics"}).code, 0);
  EXPECT_TRUE(fs::exists(dir / "eval/lr_demographics_test2/test2_metrics.json"));
  EXPECT_TRUE(fs::exists(dir / "eval/lr_demographics_test2/coefficients.csv"));

  EXPECT_EQ(run({"evaluate", "--run-dir", dir.string(), "--partition", "nowhere"}).code, 1);
  EXPECT_EQ(run({"evaluate", "--run-dir", dir.string(), "--model", "svm"}).code, 1);

  ASSERT_EQ(run({"recalibrate", "--run-dir", dir.string()}).code, 0);
  for (const auto* f : {"recalibrator.txt", "test2_before_curve.csv", "test2_after_curve.csv", "test2_after_metrics.json"})
    EXPECT_TRUE(fs::exists(dir / "recalibration/tgcnn" / f)) << f;
  ASSERT_EQ(run({"stratify", "--run-dir", dir.string()}).code, 0);
  EXPECT_TRUE(fs::exists(dir / "stratify/tgcnn/subgroups.csv"));

  ASSERT_EQ(run({"report", "--run-dir", dir.string()}).code, 0);
  const auto first = slurp(dir / "report/report.md");
  ASSERT_EQ(run({"report", "--run-dir", dir.string()}).code, 0);
  EXPECT_EQ(slurp(dir / "report/report.md"), first);
  EXPECT_NE(first.find("## Cohort"), std::string::npos);
  EXPECT_NE(first.find("run `tgcnn ablate`"), std::string::npos);

  // cohort table rows add up: sexes and IMD quintiles to n
  std::istringstream table(slurp(dir / "report/cohort_table.csv"));
  std::string line;
  std::getline(table, line);
  int rows = 0;
  while (std::getline(table, line)) {
    const auto f = cli::csv_fields(line);
    ASSERT_EQ(f.size(), 13u);
    const long n = std::stol(f[1]);
    EXPECT_EQ(std::stol(f[4]) + std::stol(f[5]), n);
    long imd = 0;
    for (int i = 8; i < 13; ++i) imd += std::stol(f[static_cast<std::size_t>(i)]);
    EXPECT_EQ(imd, n);
    ++rows;
  }
  EXPECT_EQ(rows, 4);
}

TEST(Cli, CsvToMarkdown) {
  EXPECT_EQ(cli::csv_to_markdown("a,b\n1,\"x, y\"\n"), "| a | b |\n| --- | --- |\n| 1 | x, y |\n");
}
