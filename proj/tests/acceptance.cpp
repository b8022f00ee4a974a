// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. The CIFAR-10 criteria read the binary
// batches from $LAKIT_CIFAR10_DIR (or the directory configured at build
// time) and fail when the data is missing.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "lakit/attacks.hpp"
#include "lakit/evaluate.hpp"
#include "lakit/experiment.hpp"
#include "lakit/labels.hpp"
#include "lakit/metrics.hpp"
#include "lakit/optim.hpp"
#include "lakit/trainer.hpp"
#include "oracles.hpp"

#ifndef LAKIT_CIFAR10_DIR
#define LAKIT_CIFAR10_DIR ""
#endif

using namespace lakit;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::ostringstream detail;
  std::string reasons;

  void fail_if(bool bad, const std::string& why) {
    if (!bad) return;
    pass = false;
    reasons += (reasons.empty() ? "" : "; ") + why;
  }
};

int failures = 0;
std::vector<int> selected;  // empty: every criterion

bool wanted(int id) { return selected.empty() || std::find(selected.begin(), selected.end(), id) != selected.end(); }

void report(int id, const std::string& title, Verdict& v) {
  if (!v.pass) ++failures;
  std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << title << "): " << v.detail.str();
  if (!v.pass) std::cout << " [" << v.reasons << "]";
  std::cout << std::endl;
}

template <class F>
void run_criterion(int id, const std::string& title, F&& body) {
  if (!wanted(id)) return;
  Verdict v;
  try {
    body(v);
  } catch (const std::exception& e) {
    v.fail_if(true, std::string("exception: ") + e.what());
  }
  report(id, title, v);
}

// ---- 1 ---------------------------------------------------------------------

void gradient_correctness(Verdict& v) {
  const auto t0 = Clock::now();
  const auto cases = gradcheck::make_cases(240, 2024);
  double worst = 0.0;
  std::string worst_name;
  std::size_t bad = 0;
  for (const auto& c : cases) {
    const auto out = gradcheck::check(c);
    if (out.rel_error > worst) {
      worst = out.rel_error;
      worst_name = c.name;
    }
    if (!(out.rel_error < 1e-4)) ++bad;
  }
  const double secs = seconds_since(t0);
  v.detail << cases.size() << " cases, max rel error " << worst << " (" << worst_name << "), " << secs << " s";
  v.fail_if(cases.size() < 100, "fewer than 100 cases");
  v.fail_if(bad > 0, std::to_string(bad) + " cases at or above 1e-4");
  v.fail_if(secs >= 120.0, "suite slower than 2 min");
}

// ---- 2 ---------------------------------------------------------------------

void golden_label(Verdict& v) {
  const auto lbl = make_la_label(10, 3, 7, std::optional<std::size_t>(1), 0.07);
  std::vector<double> expect(13, 0.0);
  expect[7] = 1.0 - 0.07;
  expect[11] = 0.07;
  v.detail << "values =";
  for (double x : lbl.values) v.detail << ' ' << x;
  v.fail_if(lbl.values != expect, "layout differs from [0 x7, 1-0.07, 0, 0, 0, 0.07, 0]");
  std::vector<std::size_t> nonzero;
  for (std::size_t i = 0; i < lbl.values.size(); ++i)
    if (lbl.values[i] != 0.0) nonzero.push_back(i);
  v.fail_if(nonzero != std::vector<std::size_t>{7, 11}, "nonzero positions are not {7, 11}");
  // 1 - 0.07 is the double nearest 0.93 minus one ulp; the two must agree to an ulp
  v.fail_if(std::abs(lbl.values[7] - 0.93) > std::nextafter(0.93, 1.0) - 0.93, "class mass not 0.93");
  v.fail_if(std::abs(lbl.values[7] + lbl.values[11] - 1.0) > 1e-15, "mass does not sum to 1");
}

// ---- 3 ---------------------------------------------------------------------

void calibration_oracle(Verdict& v) {
  Rng rng(303);
  double worst = 0.0;
  std::size_t order_violations = 0;
  const std::size_t sets = 1000;
  for (std::size_t s = 0; s < sets; ++s) {
    const std::size_t n = 1 + rng.below(1500);
    const std::size_t k = 2 + rng.below(9);
    std::vector<PredictionRecord> recs(n);
    for (auto& r : recs) {
      // coarse confidences half the time so ties are common
      r.confidence = rng.bernoulli(0.5) ? (1.0 + static_cast<double>(rng.below(20))) / 20.0
                                        : rng.uniform(1.0 / static_cast<double>(k), 1.0);
      r.predicted = rng.below(k);
      r.truth = rng.bernoulli(r.confidence) ? r.predicted : rng.below(k);
    }
    const std::size_t bins = s == 0 ? 15 : 1 + rng.below(std::min<std::size_t>(n, 30));
    for (bool equal_count : {true, false}) {
      const auto got =
          calibration_errors(recs, bins, equal_count ? BinningMode::equal_count : BinningMode::equal_width);
      const auto [ece, rms] = oracle::calibration(recs, bins, equal_count);
      worst = std::max({worst, std::abs(got.ece - ece), std::abs(got.rms - rms)});
      if (!(got.rms >= got.ece)) ++order_violations;
    }
  }
  v.detail << sets << " sets x 2 binning modes, max |delta| " << worst << ", rms < ece in " << order_violations
           << " cases";
  v.fail_if(!(worst < 1e-12), "oracle mismatch >= 1e-12");
  v.fail_if(order_violations > 0, "rms >= ece violated");
}

// ---- 4 ---------------------------------------------------------------------

void attack_invariants(Verdict& v) {
  Rng rng(404);
  std::size_t outside = 0, mismatch = 0, cases = 0;
  const auto t0 = Clock::now();
  for (; cases < 1000; ++cases) {
    ModelConfig c;
    c.arch = rng.bernoulli(0.5) ? Arch::mlp : Arch::small_cnn;
    c.channels = 1 + rng.below(3);
    c.height = c.width = 8;
    c.num_classes = 2 + rng.below(5);
    c.num_ops = rng.below(4);
    c.hidden = c.arch == Arch::mlp ? std::vector<std::size_t>{6} : std::vector<std::size_t>{3};
    c.batch_norm = rng.bernoulli(0.5);
    c.init_seed = rng.next_u64();
    const Model<float> model(c);
    Tensor<float> x({1 + rng.below(4), c.channels, c.height, c.width});
    for (auto& p : x.data()) {
      const double u = rng.uniform();
      p = u < 0.1 ? 0.0f : u > 0.9 ? 1.0f : static_cast<float>(rng.uniform());
    }
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < x.dim(0); ++i) labels.push_back(rng.below(c.num_classes));
    const double eps = rng.bernoulli(0.1) ? 0.0 : rng.uniform(0.0, 0.5);

    auto contained = [&](const Tensor<float>& adv) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = std::abs(static_cast<double>(adv[i]) - static_cast<double>(x[i]));
        if (d > eps || adv[i] < 0.0f || adv[i] > 1.0f) return false;
      }
      return true;
    };
    const auto mode = rng.bernoulli(0.5) ? LogitMode::masked_k : LogitMode::full_km;
    const AttackConfig f{AttackFamily::fgsm, eps, 1, 0.0, false, mode, 0};
    const auto fg = fgsm(model, x, labels, f);
    AttackConfig p{AttackFamily::pgd, eps, 1 + rng.below(6), rng.uniform(0.0, 0.2), rng.bernoulli(0.5), mode,
                   rng.next_u64()};
    const auto pg = pgd(model, x, labels, p);
    const AttackConfig one{AttackFamily::pgd, eps, 1, eps, false, mode, 0};
    const auto pg1 = pgd(model, x, labels, one).adversarial;
    if (!contained(fg.adversarial) || !contained(pg.adversarial)) ++outside;
    if (pg1.shape() != fg.adversarial.shape() ||
        std::memcmp(pg1.data().data(), fg.adversarial.data().data(), x.size() * sizeof(float)) != 0) {
      ++mismatch;
    }
  }
  v.detail << cases << " cases, " << outside << " outside ball/box, " << mismatch
           << " pgd(1, alpha=eps) != fgsm, " << seconds_since(t0) << " s";
  v.fail_if(outside > 0, "containment violated");
  v.fail_if(mismatch > 0, "single-step pgd differs from fgsm");
}

// ---- 5 ---------------------------------------------------------------------

void mce_arithmetic(Verdict& v) {
  const auto fixture = corruption_errors({{"c", {10, 20, 30, 40, 50}}});
  v.detail << "fixture CE = " << fixture.ce.at("c");
  v.fail_if(fixture.ce.at("c") != 30.0 || fixture.mce != 30.0, "fixture CE is not 30");
  Rng rng(505);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::map<std::string, std::vector<double>> table;
    const std::size_t count = 1 + rng.below(15);
    for (std::size_t c = 0; c < count; ++c) {
      auto& row = table["c" + std::to_string(c)];
      for (int s = 0; s < 5; ++s) row.push_back(rng.uniform(0.0, 100.0));
    }
    const auto got = corruption_errors(table);
    const auto [ce, mce] = oracle::corruption_means(table);
    for (const auto& [name, value] : ce) worst = std::max(worst, std::abs(value - got.ce.at(name)));
    worst = std::max(worst, std::abs(mce - got.mce));
  }
  v.detail << ", 1000 random tables max |delta| " << worst;
  v.fail_if(!(worst < 1e-12), "oracle mismatch >= 1e-12");
}

// ---- 6, 7 --------------------------------------------------------------------

std::string cifar_dir() {
  if (const char* env = std::getenv("LAKIT_CIFAR10_DIR"); env && *env) return env;
  return LAKIT_CIFAR10_DIR;
}

std::optional<ExperimentData> load_cifar(std::string& why) {
  DatasetSection d;
  d.source = DataSource::cifar10;
  d.path = cifar_dir();
  d.train_samples = 5000;
  d.test_samples = 2000;
  d.data_seed = 0;
  if (d.path.empty()) {
    why = "data missing: LAKIT_CIFAR10_DIR not set";
    return std::nullopt;
  }
  try {
    return load_experiment_data(d);
  } catch (const std::exception& e) {
    why = std::string("data missing: ") + e.what();
    return std::nullopt;
  }
}

const std::vector<AugOp> kLaOps = {AugOp::plasma, AugOp::gamma, AugOp::planckian_jitter};

struct Trained {
  Model<float> model;
  double seconds = 0.0;
};

// small_cnn, 10 epochs, batch 128, default optimizer settings.
Trained train_cifar(Regime regime, std::uint64_t seed, const Dataset& train_set, const std::vector<AugOp>& ops) {
  TrainConfig cfg;
  cfg.regime = regime;
  cfg.epochs = 10;
  cfg.batch_size = 128;
  cfg.seed = seed;
  cfg.ops = ops;
  ModelConfig mc;
  mc.arch = Arch::small_cnn;
  mc.hidden = default_hidden(Arch::small_cnn);
  mc.num_classes = train_set.num_classes;
  mc.init_seed = seed;
  Model<float> model = make_model_for<float>(mc, cfg);
  const auto t0 = Clock::now();
  train<float>(cfg, model, train_set);
  return {std::move(model), seconds_since(t0)};
}

double fgsm_error(const Model<float>& model, const Dataset& test) {
  EvalConfig ec;
  ec.seed = 0;
  return attacked_error(model, test, AttackSpec{AttackFamily::fgsm, 0.03, 1, 0.0, false, LogitMode::masked_k}, ec);
}

// ---- 8 ---------------------------------------------------------------------

void reduction_identities(Verdict& v) {
  const auto ds = synthesize_shapes(160, 4, 808);
  ModelConfig mc;
  mc.arch = Arch::small_cnn;
  mc.hidden = {4, 8};
  mc.num_classes = 4;
  mc.init_seed = 8;
  TrainConfig std_cfg;
  std_cfg.regime = Regime::standard;
  std_cfg.epochs = 3;
  std_cfg.batch_size = 32;
  std_cfg.lr0 = 0.05;
  std_cfg.seed = 8;
  TrainConfig la_cfg = std_cfg;
  la_cfg.regime = Regime::la;
  const auto a = train<float>(std_cfg, mc, ds);
  const auto b = train<float>(la_cfg, mc, ds);
  bool same = a.log.size() == b.log.size();
  for (std::size_t e = 0; same && e < a.log.size(); ++e) same = a.log[e].mean_loss == b.log[e].mean_loss;
  for (std::size_t i = 0; same && i < a.model.parameters().size(); ++i)
    same = a.model.parameters()[i].tensor == b.model.parameters()[i].tensor;
  v.detail << "la(M=0) vs standard loss trajectory " << (same ? "bitwise equal" : "differs");
  v.fail_if(!same, "la without ops does not reproduce standard");

  std::size_t checked = 0, off = 0;
  for (Regime r : {Regime::la, Regime::ls, Regime::mtl}) {
    TrainConfig cfg = std_cfg;
    cfg.regime = r;
    cfg.epochs = 1;
    cfg.ops = kLaOps;
    cfg.delta = {0.0, 0.0};
    ModelConfig small = mc;
    small.arch = Arch::mlp;
    small.hidden = {8};
    Model<float> model = make_model_for<float>(small, cfg);
    train<float>(cfg, model, ds, [&](const SampleRecord& rec) {
      auto expect = make_onehot(4, ds.labels[rec.index]);
      expect.resize(rec.target.size(), 0.0);
      ++checked;
      if (rec.target != expect || rec.delta != 0.0) ++off;
    });
  }
  v.detail << "; delta = 0: " << checked << " la/ls/mtl targets, " << off << " not one-hot";
  v.fail_if(off > 0 || checked == 0, "delta = 0 targets are not one-hot");
}

// ---- 9 ---------------------------------------------------------------------

void end_to_end_determinism(Verdict& v) {
  const fs::path root = fs::temp_directory_path() / ("lakit_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string text =
      "run_name = determinism\n"
      "seed = 9\n"
      "[dataset]\nsource = synthetic\ntrain_samples = 512\ntest_samples = 256\nclasses = 4\n"
      "[model]\narch = small_cnn\nhidden = 8 16\n"
      "[train]\nregime = la\nepochs = 3\nbatch_size = 64\nlr0 = 0.05\nops = plasma gamma planckian_jitter\n"
      "[eval]\ncorruptions = all\nattacks = fgsm@0.03 pgd@0.03 fgsm@0.3 pgd@0.3\n";
  const auto t0 = Clock::now();
  std::vector<std::string> reports;
  std::vector<double> times;
  for (const char* sub : {"a", "b"}) {
    ExperimentConfig cfg = parse_experiment_config(text, "acceptance");
    cfg.output_dir = (root / sub).string();
    const auto t = Clock::now();
    const auto res = run_experiment(cfg);
    times.push_back(seconds_since(t));
    for (const char* f : {kManifestFile, kCheckpointFile, kEpochLogFile, kReportJsonFile, kReportCsvFile})
      v.fail_if(!fs::exists(res.dir / f), std::string("missing artifact ") + f);
    reports.push_back(read_text_file(res.dir / kReportJsonFile));
  }
  const double total = seconds_since(t0);
  fs::remove_all(root);
  v.detail << "two runs " << total << " s total (" << times[0] << " s + " << times[1] << " s), report.json " << reports[0].size() << " bytes, "
           << (reports[0] == reports[1] ? "byte-identical" : "differs");
  v.fail_if(reports[0] != reports[1], "reports differ");
  v.fail_if(total >= 120.0, "pipeline slower than 2 min");
}

// ---- 10 --------------------------------------------------------------------

void lr_schedule(Verdict& v) {
  TrainConfig cfg;  // lr0 0.1, eta_min factor 1e-4
  const std::size_t total = cfg.epochs * ((5000 + 127) / 128);
  const double first = cosine_lr(0, total, cfg.lr0, cfg.eta_min());
  const double last = cosine_lr(total, total, cfg.lr0, cfg.eta_min());
  const double mid = cosine_lr(total / 2, total, cfg.lr0, cfg.eta_min());
  bool monotone = true;
  double prev = first;
  for (std::size_t t = 1; t <= total; ++t) {
    const double lr = cosine_lr(t, total, cfg.lr0, cfg.eta_min());
    if (lr > prev) monotone = false;
    prev = lr;
  }
  v.detail << "T = " << total << ", lr(0) = " << first << ", lr(T) = " << last << ", lr(T/2) = " << mid
           << ", monotone " << (monotone ? "yes" : "no");
  v.fail_if(first != 0.1, "lr(0) != 0.1");
  v.fail_if(last != 1e-5, "lr(T) != 1e-5");
  v.fail_if(std::abs(mid - (0.1 + 1e-5) / 2) > 1e-15, "midpoint off");
  v.fail_if(!monotone, "schedule increases somewhere");
}

}  // namespace

// Optional arguments restrict the run to the listed criterion ids.
int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  std::cout.precision(6);
  run_criterion(1, "gradient correctness", gradient_correctness);
  run_criterion(2, "golden label vector", golden_label);
  run_criterion(3, "calibration oracle equivalence", calibration_oracle);
  run_criterion(4, "attack invariants", attack_invariants);
  run_criterion(5, "mCE arithmetic", mce_arithmetic);

  std::string why;
  const auto cifar = wanted(6) || wanted(7) ? load_cifar(why) : std::nullopt;
  run_criterion(6, "desk-scale learnability", [&](Verdict& v) {
    if (!cifar) {
      v.fail_if(true, why);
      return;
    }
    // plain K-way head: no augmentation ops in the standard regime
    const auto trained = train_cifar(Regime::standard, 0, cifar->train, {});
    const double err = error_rate(predict_records(trained.model, cifar->test));
    v.detail << "clean test error " << err << "% on " << cifar->test.size() << " images, training "
             << trained.seconds << " s";
    v.fail_if(err > 45.0, "test error above 45%");
    v.fail_if(trained.seconds > 900.0, "training slower than 15 min");
  });
  run_criterion(7, "directional LA effect", [&](Verdict& v) {
    if (!cifar) {
      v.fail_if(true, why);
      return;
    }
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      // the twin lists the same ops so both models have the K + M head
      const auto std_model = train_cifar(Regime::standard, seed, cifar->train, kLaOps).model;
      const auto la_model = train_cifar(Regime::la, seed, cifar->train, kLaOps).model;
      const double e_std = fgsm_error(std_model, cifar->test);
      const double e_la = fgsm_error(la_model, cifar->test);
      wins += e_la < e_std;
      v.detail << (seed ? "; " : "") << "seed " << seed << ": standard " << e_std << "%, la " << e_la << "%";
    }
    v.detail << " -> la lower in " << wins << "/3";
    v.fail_if(wins < 2, "la not lower in at least 2 of 3 seeds");
  });

  run_criterion(8, "reduction identities", reduction_identities);
  run_criterion(9, "end-to-end determinism", end_to_end_determinism);
  run_criterion(10, "learning-rate schedule", lr_schedule);

  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
