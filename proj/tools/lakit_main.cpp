// lakit command-line front end: run / train / eval / attack / corrupt /
// report / compare. Exit codes: 0 ok, 2 config, 3 data, 4 runtime.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lakit/experiment.hpp"

namespace fs = std::filesystem;
using namespace lakit;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool force = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config) {
  auto* opt = cmd->add_option("--config", c.config, "experiment config file");
  if (needs_config) opt->required();
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "overrides the config output_dir");
  cmd->add_flag("--force", c.force, "overwrite an existing run directory");
  cmd->add_flag("--quiet", c.quiet, "no progress output");
}

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = load_experiment_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.output_dir = *c.out;
  cfg.resolve();
  cfg.validate();
  return cfg;
}

std::function<void(const std::string&)> progress(bool quiet) {
  if (quiet) return {};
  return [](const std::string& s) { std::cerr << "[lakit] " << s << std::endl; };
}

fs::path find_run(const std::string& ref, const Common& c) {
  return resolve_run(ref, c.out.value_or("runs"));
}

struct Loaded {
  ExperimentConfig cfg;
  ExperimentData data;
  Model<float> model;
};

Loaded load_run(const fs::path& dir) {
  const auto manifest = RunManifest::read(dir);
  auto cfg = config_from_json(manifest.config);
  auto data = load_experiment_data(cfg.dataset);
  auto model = load_run_model(dir, cfg, data.train);
  return {std::move(cfg), std::move(data), std::move(model)};
}

int cmd_run(const Common& c, bool evaluate_too) {
  const auto cfg = load_config(c);
  RunOptions opt;
  opt.force = c.force;
  opt.evaluate = evaluate_too;
  opt.log = progress(c.quiet);
  const auto res = run_experiment(cfg, opt);
  std::cout << res.dir.string() << "\n";
  if (res.report) std::cout << report_csv(*res.report);
  return kExitOk;
}

int cmd_eval(const Common& c, const std::string& ref) {
  RunOptions opt;
  opt.log = progress(c.quiet);
  const auto report = evaluate_run(find_run(ref, c), opt);
  std::cout << report_csv(report);
  return kExitOk;
}

struct AttackArgs {
  std::string run;
  std::string family = "fgsm";
  double epsilon = 0.03;
  std::size_t steps = 1;
  double step_size = 0.0;
  bool random_start = false;
  std::string logit_mode = "masked_k";
  std::size_t samples = 0;
  std::string dump;
};

int cmd_attack(const Common& c, const AttackArgs& a) {
  auto run = load_run(find_run(a.run, c));
  AttackSpec spec{parse_attack_family(a.family), a.epsilon, a.steps, a.step_size, a.random_start,
                  parse_logit_mode(a.logit_mode)};
  if (spec.family == AttackFamily::fgsm) spec.steps = 1;
  EvalConfig ec = eval_config_for(run.cfg);
  ec.attack_samples = a.samples;
  const double err = attacked_error(run.model, run.data.test, spec, ec);
  std::cout << "attack,epsilon,steps,step_size,random_start,logit_mode,samples,error\n"
            << attack_family_name(spec.family) << "," << format_number(spec.epsilon) << "," << spec.steps << ","
            << format_number(spec.to_config(0).effective_step_size()) << "," << (spec.random_start ? "true" : "false")
            << "," << logit_mode_name(spec.logit_mode) << ","
            << (a.samples == 0 ? run.data.test.size() : std::min(a.samples, run.data.test.size())) << ","
            << format_number(err) << "\n";
  if (!a.dump.empty()) {
    // first batch only: clean inputs, adversarial inputs, labels
    const std::size_t n = std::min(ec.batch_size, a.samples == 0 ? run.data.test.size() : a.samples);
    std::vector<std::size_t> idx(n), labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      idx[i] = i;
      labels[i] = run.data.test.labels[i];
    }
    const auto x = gather_batch<float>(run.data.test, idx);
    const auto seed = derive_seed({ec.seed, detail::kAttackEvalStream, static_cast<std::uint64_t>(spec.family),
                                   std::bit_cast<std::uint64_t>(spec.epsilon), 0});
    const auto adv = attack(run.model, x, labels, spec.to_config(seed));
    Tensor<float> lab({n});
    for (std::size_t i = 0; i < n; ++i) lab[i] = static_cast<float>(labels[i]);
    save_tensors<float>(a.dump, {{"clean", x}, {"adversarial", adv.adversarial}, {"labels", lab}});
    std::cerr << "wrote " << a.dump << "\n";
  }
  return kExitOk;
}

struct CorruptArgs {
  std::string corruption;
  int severity = 3;
  std::size_t samples = 16;
  std::string output;
};

int cmd_corrupt(const Common& c, const CorruptArgs& a) {
  const auto cfg = load_config(c);
  const auto data = load_experiment_data(cfg.dataset);
  const EvalConfig ec = eval_config_for(cfg);
  const Corruption corr = parse_corruption(a.corruption);
  const CorruptionSpec spec{corr, a.severity};
  const std::size_t n = std::min(a.samples == 0 ? data.test.size() : a.samples, data.test.size());
  std::vector<Image> clean, out;
  for (std::size_t i = 0; i < n; ++i) {
    clean.push_back(data.test.image(i));
    // same per-image seeds as the evaluation sweep
    const auto seed = derive_seed({ec.seed, detail::kCorruptionEvalStream, static_cast<std::uint64_t>(corr),
                                   static_cast<std::uint64_t>(a.severity), i});
    out.push_back(apply_corruption(clean.back(), spec, seed, ec.severity));
  }
  save_tensors<float>(a.output, {{"clean", stack_images<float>(clean)}, {"corrupted", stack_images<float>(out)}});
  std::cout << a.output << "\n";
  return kExitOk;
}

int cmd_report(const Common& c, const std::string& ref, const std::string& format) {
  const auto report = load_run_report(find_run(ref, c));
  if (format == "json") std::cout << report_json(report);
  else if (format == "csv") std::cout << report_csv(report);
  else throw ConfigError("unknown report format '" + format + "'");
  return kExitOk;
}

int cmd_compare(const Common& c, const std::vector<std::string>& refs, const std::string& output) {
  std::vector<fs::path> dirs;
  for (const auto& r : refs) dirs.push_back(find_run(r, c));
  const auto csv = compare_runs(dirs);
  if (output.empty()) std::cout << csv;
  else write_text_file(output, csv);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lakit: label-augmentation robustness experiments"};
  app.set_version_flag("--version", std::string(kToolkitVersion));
  app.require_subcommand(1);

  Common run_c, train_c, eval_c, attack_c, corrupt_c, report_c, compare_c;
  auto* run = app.add_subcommand("run", "train, evaluate and write every artifact");
  add_common(run, run_c, true);
  auto* train_cmd = app.add_subcommand("train", "train and checkpoint without evaluation");
  add_common(train_cmd, train_c, true);

  std::string eval_ref;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate the checkpoint of an existing run");
  eval_cmd->add_option("run", eval_ref, "run directory or run id")->required();
  add_common(eval_cmd, eval_c, false);

  AttackArgs aa;
  auto* attack_cmd = app.add_subcommand("attack", "attack a trained run's checkpoint");
  attack_cmd->add_option("run", aa.run, "run directory or run id")->required();
  attack_cmd->add_option("--family", aa.family, "fgsm | pgd");
  attack_cmd->add_option("--epsilon", aa.epsilon, "L-inf budget");
  attack_cmd->add_option("--steps", aa.steps, "pgd steps");
  attack_cmd->add_option("--step-size", aa.step_size, "pgd step size (default epsilon / 4)");
  attack_cmd->add_flag("--random-start", aa.random_start, "pgd uniform start in the ball");
  attack_cmd->add_option("--logit-mode", aa.logit_mode, "masked_k | full_km");
  attack_cmd->add_option("--samples", aa.samples, "first n test images (0 = all)");
  attack_cmd->add_option("--dump", aa.dump, "write the first batch (clean, adversarial, labels) as LAKT");
  add_common(attack_cmd, attack_c, false);

  CorruptArgs ca;
  auto* corrupt_cmd = app.add_subcommand("corrupt", "write corrupted test images as LAKT");
  corrupt_cmd->add_option("--corruption", ca.corruption, "corruption name")->required();
  corrupt_cmd->add_option("--severity", ca.severity, "1..5")->check(CLI::Range(1, 5));
  corrupt_cmd->add_option("--samples", ca.samples, "number of test images (0 = all)");
  corrupt_cmd->add_option("-o,--output", ca.output, "output file")->required();
  add_common(corrupt_cmd, corrupt_c, true);

  std::string report_ref, report_format = "json";
  auto* report_cmd = app.add_subcommand("report", "print a run's report");
  report_cmd->add_option("run", report_ref, "run directory or run id")->required();
  report_cmd->add_option("--format", report_format, "json | csv");
  add_common(report_cmd, report_c, false);

  std::vector<std::string> compare_refs;
  std::string compare_output;
  auto* compare_cmd = app.add_subcommand("compare", "metric table across runs; the first is the baseline");
  compare_cmd->add_option("runs", compare_refs, "run directories or run ids")->required()->expected(2, -1);
  compare_cmd->add_option("-o,--output", compare_output, "write the CSV here instead of stdout");
  add_common(compare_cmd, compare_c, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_c, true);
    if (*train_cmd) return cmd_run(train_c, false);
    if (*eval_cmd) return cmd_eval(eval_c, eval_ref);
    if (*attack_cmd) return cmd_attack(attack_c, aa);
    if (*corrupt_cmd) return cmd_corrupt(corrupt_c, ca);
    if (*report_cmd) return cmd_report(report_c, report_ref, report_format);
    if (*compare_cmd) return cmd_compare(compare_c, compare_refs, compare_output);
  } catch (const std::exception& e) {
    std::cerr << "lakit: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}
