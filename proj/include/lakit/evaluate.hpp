#pragma once

#include <bit>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lakit/attacks.hpp"
#include "lakit/augment.hpp"
#include "lakit/data.hpp"
#include "lakit/metrics.hpp"
#include "lakit/model.hpp"
#include "lakit/random.hpp"
#include "lakit/report.hpp"

namespace lakit {

// One entry of the attack sweep; step_size <= 0 means epsilon / 4.
struct AttackSpec {
  AttackFamily family = AttackFamily::fgsm;
  double epsilon = 0.03;
  std::size_t steps = 1;
  double step_size = 0.0;
  bool random_start = false;
  LogitMode logit_mode = LogitMode::masked_k;

  AttackConfig to_config(std::uint64_t seed) const {
    return {family, epsilon, steps, step_size, random_start, logit_mode, seed};
  }
};

// fgsm and 40-step pgd (alpha = eps / 4, random start) at eps 0.03 and 0.3.
inline std::vector<AttackSpec> default_attacks() {
  std::vector<AttackSpec> out;
  for (double eps : {0.03, 0.3}) {
    out.push_back({AttackFamily::fgsm, eps, 1, 0.0, false, LogitMode::masked_k});
    out.push_back({AttackFamily::pgd, eps, 40, 0.0, true, LogitMode::masked_k});
  }
  return out;
}

struct EvalConfig {
  std::vector<Corruption> corruptions{kAllCorruptions.begin(), kAllCorruptions.end()};
  std::vector<AttackSpec> attacks = default_attacks();
  std::size_t calibration_bins = 15;
  BinningMode binning = BinningMode::equal_count;
  std::size_t batch_size = 256;
  std::size_t attack_samples = 0;  // first n test images are attacked; 0 = all
  std::uint64_t seed = 0;
  SeverityTable severity = SeverityTable::builtin();

  void validate() const {
    if (calibration_bins < 1) throw ConfigError("eval: calibration_bins must be >= 1");
    if (batch_size < 1) throw ConfigError("eval: batch_size must be >= 1");
    for (const auto& a : attacks) a.to_config(0).validate();
    for (std::size_t i = 0; i < corruptions.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (corruptions[i] == corruptions[j]) {
          throw ConfigError(std::string("eval: corruption listed twice: ") + corruption_name(corruptions[i]));
        }
  }
};

namespace detail {

enum EvalStream : std::uint64_t { kCorruptionEvalStream = 5, kAttackEvalStream = 6 };

template <class T>
void append_records(std::vector<PredictionRecord>& out, const Model<T>& model, const Tensor<T>& x,
                    std::span<const std::size_t> truths) {
  const auto mp = masked_class_prediction(model.predict_logits(x), model.num_classes());
  for (std::size_t i = 0; i < truths.size(); ++i) {
    out.push_back({static_cast<double>(mp.probs.at(i, mp.pred[i])), mp.pred[i], truths[i]});
  }
}

}  // namespace detail

// Masked predictions (eval phase) for every image of ds, in dataset order.
template <class T>
std::vector<PredictionRecord> predict_records(const Model<T>& model, const Dataset& ds, std::size_t batch_size = 256) {
  std::vector<PredictionRecord> out;
  out.reserve(ds.size());
  for (const auto& idx : sequential_batches(ds.size(), batch_size)) {
    std::vector<std::size_t> truths;
    for (std::size_t i : idx) truths.push_back(ds.labels[i]);
    detail::append_records(out, model, gather_batch<T>(ds, idx), truths);
  }
  return out;
}

// Image i of the (c, s) sweep uses seed derive_seed({seed, stream, c, s, i}),
// with c the corruption's position in the canonical list, so results do not
// depend on which other corruptions are evaluated.
template <class T>
double corrupted_error(const Model<T>& model, const Dataset& ds, Corruption c, int severity,
                       const EvalConfig& cfg) {
  std::vector<PredictionRecord> recs;
  recs.reserve(ds.size());
  const CorruptionSpec spec{c, severity};
  for (const auto& idx : sequential_batches(ds.size(), cfg.batch_size)) {
    std::vector<Image> images;
    std::vector<std::size_t> truths;
    for (std::size_t i : idx) {
      const auto seed = derive_seed({cfg.seed, detail::kCorruptionEvalStream, static_cast<std::uint64_t>(c),
                                     static_cast<std::uint64_t>(severity), i});
      images.push_back(apply_corruption(ds.image(i), spec, seed, cfg.severity));
      truths.push_back(ds.labels[i]);
    }
    detail::append_records(recs, model, stack_images<T>(images), truths);
  }
  return error_rate(recs);
}

// Batch b of an attack uses seed derive_seed({seed, stream, family, eps bits, b}).
template <class T>
double attacked_error(const Model<T>& model, const Dataset& ds, const AttackSpec& spec, const EvalConfig& cfg) {
  const std::size_t n = cfg.attack_samples == 0 ? ds.size() : std::min(cfg.attack_samples, ds.size());
  std::vector<PredictionRecord> recs;
  recs.reserve(n);
  const auto plan = sequential_batches(n, cfg.batch_size);
  for (std::size_t b = 0; b < plan.size(); ++b) {
    const auto& idx = plan[b];
    std::vector<std::size_t> truths;
    for (std::size_t i : idx) truths.push_back(ds.labels[i]);
    const auto seed = derive_seed({cfg.seed, detail::kAttackEvalStream, static_cast<std::uint64_t>(spec.family),
                                   std::bit_cast<std::uint64_t>(spec.epsilon), b});
    const auto adv = attack(model, gather_batch<T>(ds, idx), truths, spec.to_config(seed));
    detail::append_records(recs, model, adv.adversarial, truths);
  }
  return error_rate(recs);
}

// Clean error and calibration, the corruption sweep (severities 1..5 of every
// configured corruption) and the attack sweep. `progress`, when set, receives
// a short label before each stage.
template <class T>
EvalReport evaluate(const Model<T>& model, const Dataset& test, const EvalConfig& cfg,
                    const std::function<void(const std::string&)>& progress = {}) {
  cfg.validate();
  test.validate();
  if (test.num_classes != model.num_classes()) {
    throw ConfigError("eval: test set has K = " + std::to_string(test.num_classes) + " but model K = " +
                      std::to_string(model.num_classes()));
  }
  auto note = [&](const std::string& s) {
    if (progress) progress(s);
  };
  EvalReport r;
  r.test_samples = test.size();
  r.num_classes = test.num_classes;
  r.severity_table_version = cfg.severity.version();
  r.calibration_bins = cfg.calibration_bins;
  r.binning = binning_name(cfg.binning);
  r.attack_samples = cfg.attacks.empty() ? 0
                     : cfg.attack_samples == 0 ? test.size()
                                               : std::min(cfg.attack_samples, test.size());

  note("clean");
  const auto clean = predict_records(model, test, cfg.batch_size);
  r.clean_error = error_rate(clean);
  const auto cal = calibration_errors(clean, cfg.calibration_bins, cfg.binning);
  r.ece = cal.ece;
  r.rms = cal.rms;

  std::map<std::string, std::vector<double>> per_severity;
  for (Corruption c : cfg.corruptions) {
    note(std::string("corruption ") + corruption_name(c));
    auto& errs = per_severity[corruption_name(c)];
    for (int s = 1; s <= 5; ++s) errs.push_back(corrupted_error(model, test, c, s, cfg));
  }
  if (!per_severity.empty()) {
    const auto summary = corruption_errors(per_severity);
    r.mce = summary.mce;
    for (const auto& [name, errs] : per_severity) {
      CorruptionEntry e;
      std::copy(errs.begin(), errs.end(), e.severity_errors.begin());
      e.ce = summary.ce.at(name);
      r.corruptions[name] = e;
    }
  }

  for (const auto& spec : cfg.attacks) {
    const AttackConfig ac = spec.to_config(0);
    AttackEntry e{attack_family_name(spec.family), spec.epsilon, spec.steps, ac.effective_step_size(),
                  spec.random_start, logit_mode_name(spec.logit_mode), 0.0};
    note("attack " + e.key());
    e.error = attacked_error(model, test, spec, cfg);
    r.attacks.push_back(e);
  }
  return r;
}

}  // namespace lakit
