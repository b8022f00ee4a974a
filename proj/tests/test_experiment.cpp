#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "lakit/experiment.hpp"

using namespace lakit;
namespace fs = std::filesystem;

namespace {

// Small enough to train and evaluate in a second or two.
const std::string kTiny =
    "run_name = tiny\n"
    "seed = 3\n"
    "[dataset]\nsource = synthetic\ntrain_samples = 96\ntest_samples = 48\nclasses = 3\n"
    "[model]\narch = mlp\nhidden = 16\n"
    "[train]\nregime = la\nepochs = 2\nbatch_size = 32\nops = gamma plasma\n"
    "[eval]\ncorruptions = gaussian_noise contrast\nattacks = fgsm@0.03 pgd@0.03\npgd_steps = 3\n"
    "calibration_bins = 4\n";

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("lakit_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

ExperimentConfig tiny_in(const fs::path& out) {
  auto cfg = parse_experiment_config(kTiny, "tiny");
  cfg.output_dir = out.string();
  return cfg;
}

std::string expect_config_error(const std::string& text) {
  try {
    parse_experiment_config(text, "cfg.ini");
  } catch (const ConfigError& e) {
    return e.what();
  }
  ADD_FAILURE() << "no ConfigError for:\n" << text;
  return {};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(LAKIT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, ParsesSectionsAndResolvesSeed) {
  const auto cfg = parse_experiment_config(kTiny);
  EXPECT_EQ(cfg.run_name, "tiny");
  EXPECT_EQ(cfg.train.regime, Regime::la);
  EXPECT_EQ(cfg.train.ops, (std::vector<AugOp>{AugOp::gamma, AugOp::plasma}));
  EXPECT_EQ(cfg.model.hidden, (std::vector<std::size_t>{16}));
  EXPECT_EQ(cfg.train.seed, 3u);
  EXPECT_EQ(cfg.model.init_seed, 3u);
  EXPECT_EQ(cfg.eval.seed, 3u);
  ASSERT_EQ(cfg.eval.attacks.size(), 2u);
  EXPECT_EQ(cfg.eval.attacks[0].steps, 1u);
  EXPECT_EQ(cfg.eval.attacks[1].steps, 3u);
  EXPECT_TRUE(cfg.eval.attacks[1].random_start);
  EXPECT_EQ(cfg.eval.corruptions.size(), 2u);
}

TEST(Config, CommentsAndBlankLines) {
  const auto cfg = parse_experiment_config("# header\n\nrun_name = x ; trailing\n[train]\nepochs = 4 # four\n");
  EXPECT_EQ(cfg.run_name, "x");
  EXPECT_EQ(cfg.train.epochs, 4u);
}

TEST(Config, ErrorsNameLineAndField) {
  auto msg = expect_config_error("run_name = a\n[train]\nregime = magic\n");
  EXPECT_NE(msg.find("cfg.ini line 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("[train] regime"), std::string::npos) << msg;
  EXPECT_NE(msg.find("magic"), std::string::npos) << msg;

  msg = expect_config_error("[train]\nepochz = 3\n");
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("unknown field [train] epochz"), std::string::npos) << msg;

  msg = expect_config_error("[optim]\n");
  EXPECT_NE(msg.find("unknown section"), std::string::npos) << msg;

  msg = expect_config_error("seed = 1\nseed = 2\n");
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("duplicate"), std::string::npos) << msg;

  msg = expect_config_error("[train]\nepochs = -1\n");
  EXPECT_NE(msg.find("[train] epochs"), std::string::npos) << msg;

  msg = expect_config_error("[train]\nlr0 = fast\n");
  EXPECT_NE(msg.find("[train] lr0"), std::string::npos) << msg;

  msg = expect_config_error("[eval]\nattacks = cw@0.1\n");
  EXPECT_NE(msg.find("[eval] attacks"), std::string::npos) << msg;

  msg = expect_config_error("just words\n");
  EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;

  expect_config_error("[train]\nops = identity\n");
  expect_config_error("[dataset]\nsource = cifar10\n");  // no path
}

TEST(Config, JsonRoundTripPreservesRunId) {
  const auto cfg = parse_experiment_config(kTiny);
  const auto back = config_from_json(config_to_json(cfg));
  EXPECT_EQ(config_to_json(back), config_to_json(cfg));
  EXPECT_EQ(run_id(back), run_id(cfg));
}

TEST(Config, RunIdIgnoresOutputDirOnly) {
  auto a = parse_experiment_config(kTiny);
  auto b = a;
  b.output_dir = "/elsewhere";
  EXPECT_EQ(run_id(a), run_id(b));
  EXPECT_EQ(run_id(a).size(), 16u);
  b = parse_experiment_config(kTiny + "[model]\n", "x");
  EXPECT_EQ(run_id(a), run_id(b));
  auto c = parse_experiment_config("seed = 4\n" + kTiny.substr(kTiny.find("[dataset]")), "x");
  c.run_name = a.run_name;
  EXPECT_NE(run_id(a), run_id(c));
  // key order in the file does not matter
  const auto d = parse_experiment_config("[model]\nhidden = 16\narch = mlp\n", "x");
  const auto e = parse_experiment_config("[model]\narch = mlp\nhidden = 16\n", "x");
  EXPECT_EQ(run_id(d), run_id(e));
}

TEST(Config, FnvKnownValues) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Experiment, RunWritesEveryArtifact) {
  TempDir tmp;
  const auto cfg = tiny_in(tmp.path());
  const auto res = run_experiment(cfg);
  EXPECT_EQ(res.dir, tmp.path() / ("tiny-" + run_id(cfg)));
  for (const char* f : {kManifestFile, kCheckpointFile, kEpochLogFile, kReportJsonFile, kReportCsvFile})
    EXPECT_TRUE(fs::exists(res.dir / f)) << f;
  const auto m = RunManifest::read(res.dir);
  EXPECT_EQ(m.status, "complete");
  EXPECT_EQ(m.run_id, res.run_id);
  EXPECT_EQ(m.artifacts.front(), kManifestFile);
  EXPECT_EQ(m.artifacts.size(), 5u);
  EXPECT_TRUE(m.timings.count("train_seconds"));
  const auto epochs = read_text_file(res.dir / kEpochLogFile);
  EXPECT_EQ(std::count(epochs.begin(), epochs.end(), '\n'), 3);
  ASSERT_TRUE(res.report);
  EXPECT_EQ(res.report->corruptions.size(), 2u);
  EXPECT_EQ(res.report->attacks.size(), 2u);
  EXPECT_EQ(res.report->calibration_bins, 4u);
  EXPECT_EQ(load_run_report(res.dir).clean_error, res.report->clean_error);
}

TEST(Experiment, ManifestComesFirst) {
  TempDir tmp;
  auto cfg = tiny_in(tmp.path());
  std::vector<std::string> seen_at_first_epoch;
  RunOptions opt;
  opt.log = [&](const std::string& line) {
    if (line.rfind("epoch 1 ", 0) != 0) return;
    for (const auto& e : fs::directory_iterator(run_directory(cfg)))
      seen_at_first_epoch.push_back(e.path().filename().string());
    const auto m = RunManifest::read(run_directory(cfg));
    EXPECT_EQ(m.status, "running");
    EXPECT_EQ(m.artifacts.size(), 5u);  // planned, not yet written
  };
  run_experiment(cfg, opt);
  std::sort(seen_at_first_epoch.begin(), seen_at_first_epoch.end());
  EXPECT_EQ(seen_at_first_epoch, (std::vector<std::string>{kEpochLogFile, kManifestFile}));
}

TEST(Experiment, ExistingRunNeedsForce) {
  TempDir tmp;
  const auto cfg = tiny_in(tmp.path());
  RunOptions quick;
  quick.evaluate = false;
  run_experiment(cfg, quick);
  EXPECT_EQ(RunManifest::read(run_directory(cfg)).status, "trained");
  EXPECT_THROW(run_experiment(cfg, quick), RunExistsError);
  write_text_file(run_directory(cfg) / "stale.txt", "x");
  quick.force = true;
  run_experiment(cfg, quick);
  EXPECT_FALSE(fs::exists(run_directory(cfg) / "stale.txt"));
}

TEST(Experiment, DeterministicAcrossOutputDirectories) {
  TempDir a, b;
  const auto ra = run_experiment(tiny_in(a.path()));
  const auto rb = run_experiment(tiny_in(b.path()));
  EXPECT_EQ(ra.run_id, rb.run_id);
  for (const char* f : {kReportJsonFile, kReportCsvFile, kEpochLogFile, kCheckpointFile})
    EXPECT_EQ(read_text_file(ra.dir / f), read_text_file(rb.dir / f)) << f;
}

TEST(Experiment, SeedChangesResults) {
  TempDir tmp;
  auto a = tiny_in(tmp.path());
  auto b = a;
  b.seed = 4;
  b.resolve();
  const auto ra = run_experiment(a);
  const auto rb = run_experiment(b);
  EXPECT_NE(ra.dir, rb.dir);
  EXPECT_NE(read_text_file(ra.dir / kCheckpointFile), read_text_file(rb.dir / kCheckpointFile));
}

TEST(Experiment, EvaluateRunReproducesReport) {
  TempDir tmp;
  const auto res = run_experiment(tiny_in(tmp.path()));
  const auto first = read_text_file(res.dir / kReportJsonFile);
  fs::remove(res.dir / kReportJsonFile);
  evaluate_run(res.dir);
  EXPECT_EQ(read_text_file(res.dir / kReportJsonFile), first);
  EXPECT_EQ(resolve_run(res.run_id, tmp.path().string()), res.dir);
  EXPECT_THROW(resolve_run("ffffffffffffffff", tmp.path().string()), DataError);
}

TEST(Experiment, CompareRuns) {
  TempDir tmp;
  auto a = tiny_in(tmp.path());
  auto b = a;
  b.run_name = "tiny_ls";
  b.train.regime = Regime::ls;
  const auto ra = run_experiment(a);
  const auto rb = run_experiment(b);
  const auto csv = compare_runs({ra.dir, rb.dir});
  EXPECT_EQ(csv.rfind("metric,tiny:" + ra.run_id + ",tiny_ls:" + rb.run_id + ",pct_change:tiny_ls:", 0), 0u);
  EXPECT_NE(csv.find("\nFGSM@0.03,"), std::string::npos);
  EXPECT_NE(csv.find("\nPGD@0.03,"), std::string::npos);
}

TEST(Experiment, MissingDataWritesNothing) {
  TempDir tmp;
  auto cfg = tiny_in(tmp.path());
  cfg.dataset.source = DataSource::cifar10;
  cfg.dataset.path = (tmp.path() / "nowhere").string();
  try {
    run_experiment(cfg);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(exit_code_for(e), kExitData);
  }
  EXPECT_TRUE(fs::is_empty(tmp.path()));
}

TEST(Experiment, ExitCodes) {
  EXPECT_EQ(exit_code_for(ConfigError("x")), kExitConfig);
  EXPECT_EQ(exit_code_for(RunExistsError("x")), kExitConfig);
  EXPECT_EQ(exit_code_for(DataError("x")), kExitData);
  EXPECT_EQ(exit_code_for(ShapeError("x")), kExitRuntime);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), kExitRuntime);
}

TEST(Cli, ExitCodesAndNoArtifactsOnConfigError) {
  TempDir tmp;
  const auto bad = tmp.path() / "bad.ini";
  write_text_file(bad, "[train]\nregime = magic\n");
  const auto out = tmp.path() / "runs";
  EXPECT_EQ(run_cli("run --config " + bad.string() + " --out " + out.string()), kExitConfig);
  EXPECT_FALSE(fs::exists(out));
  EXPECT_EQ(run_cli("run --config " + (tmp.path() / "missing.ini").string()), kExitConfig);
  EXPECT_EQ(run_cli("frobnicate"), kExitConfig);

  const auto good = tmp.path() / "tiny.ini";
  write_text_file(good, kTiny);
  EXPECT_EQ(run_cli("run --quiet --config " + good.string() + " --out " + out.string()), kExitOk);
  EXPECT_EQ(run_cli("run --quiet --config " + good.string() + " --out " + out.string()), kExitConfig);
  EXPECT_EQ(run_cli("run --quiet --force --config " + good.string() + " --out " + out.string()), kExitOk);
  const auto id = run_id(parse_experiment_config(kTiny));
  EXPECT_EQ(run_cli("report " + id + " --out " + out.string() + " --format csv"), kExitOk);
  EXPECT_EQ(run_cli("report deadbeef --out " + out.string()), kExitData);
  EXPECT_EQ(run_cli("attack " + id + " --out " + out.string() + " --family pgd --epsilon 0.1 --steps 2 --samples 8 --dump " +
                    (tmp.path() / "adv.lakt").string()),
            kExitOk);
  EXPECT_TRUE(fs::exists(tmp.path() / "adv.lakt"));
  EXPECT_EQ(run_cli("corrupt --config " + good.string() + " --corruption contrast --severity 2 --samples 4 -o " +
                    (tmp.path() / "c.lakt").string()),
            kExitOk);
  const auto dumped = load_tensors<float>((tmp.path() / "c.lakt").string());
  ASSERT_EQ(dumped.size(), 2u);
  EXPECT_EQ(dumped[1].name, "corrupted");
  EXPECT_EQ(dumped[1].tensor.dim(0), 4u);
  EXPECT_EQ(run_cli("corrupt --config " + good.string() + " --corruption contrast --severity 9 -o x.lakt"), kExitConfig);
}

TEST(Config, ShippedExamplesParse) {
  std::size_t count = 0;
  for (const auto& e : fs::directory_iterator(fs::path(LAKIT_SOURCE_DIR) / "configs")) {
    if (e.path().extension() != ".ini") continue;
    EXPECT_NO_THROW(load_experiment_config(e.path().string())) << e.path();
    ++count;
  }
  EXPECT_GE(count, 4u);
}
