#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lakit/attacks.hpp"
#include "lakit/augment.hpp"
#include "lakit/data.hpp"
#include "lakit/errors.hpp"
#include "lakit/labels.hpp"
#include "lakit/model.hpp"
#include "lakit/optim.hpp"
#include "lakit/random.hpp"

namespace lakit {

enum class Regime { standard, la, ls, mtl, adv_fgsm, adv_pgd };

inline const char* regime_name(Regime r) {
  switch (r) {
    case Regime::standard: return "standard";
    case Regime::la: return "la";
    case Regime::ls: return "ls";
    case Regime::mtl: return "mtl";
    case Regime::adv_fgsm: return "adv_fgsm";
    case Regime::adv_pgd: return "adv_pgd";
  }
  return "?";
}

inline Regime parse_regime(std::string_view s) {
  for (Regime r : {Regime::standard, Regime::la, Regime::ls, Regime::mtl, Regime::adv_fgsm, Regime::adv_pgd})
    if (s == regime_name(r)) return r;
  throw ConfigError("unknown regime '" + std::string(s) + "'");
}

enum class DeltaMode { per_sample, per_batch };

inline const char* delta_mode_name(DeltaMode m) { return m == DeltaMode::per_sample ? "per_sample" : "per_batch"; }

inline DeltaMode parse_delta_mode(std::string_view s) {
  if (s == "per_sample") return DeltaMode::per_sample;
  if (s == "per_batch") return DeltaMode::per_batch;
  throw ConfigError("unknown delta mode '" + std::string(s) + "'");
}

struct TrainConfig {
  Regime regime = Regime::standard;
  std::size_t epochs = 25;
  double lr0 = 0.1;
  double eta_min_factor = 1e-4;  // eta_min = factor * lr0
  double momentum = 0.9;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  DeltaRange delta;
  DeltaMode delta_mode = DeltaMode::per_sample;
  // Operation j of the label layout is ops[j]. Only la and mtl apply them;
  // the other regimes keep the K + M head with unused op slots.
  std::vector<AugOp> ops;
  double identity_probability = 0.5;
  AugParamRanges op_ranges;
  bool preprocess = true;
  FlipCropParams flip_crop;
  // adversarial training: eps 0.3; adv_pgd takes 10 steps, fgsm ignores the count
  AttackConfig attack{AttackFamily::fgsm, 0.3, 10, 0.0, false, LogitMode::masked_k, 0};

  double eta_min() const { return eta_min_factor * lr0; }

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(lr0 > eta_min()) || eta_min() < 0.0) throw ConfigError("train: need lr0 > eta_min >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must be in [0, 1)");
    if (!(delta.lo >= 0.0 && delta.lo <= delta.hi && delta.hi <= 1.0)) throw ConfigError("train: bad delta range");
    if (!(identity_probability >= 0.0 && identity_probability <= 1.0)) {
      throw ConfigError("train: identity_probability must be in [0, 1]");
    }
    for (AugOp op : ops)
      if (op == AugOp::identity) throw ConfigError("train: 'identity' is implicit and cannot be listed as an op");
    if (regime == Regime::adv_fgsm || regime == Regime::adv_pgd) attack.validate();
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;  // percent
  double lr = 0.0;              // at the first step of the epoch
};

// Per-sample view of what the training pipeline did, for inspection and tests.
struct SampleRecord {
  std::size_t index = 0;
  std::optional<std::size_t> op_index;
  double delta = 0.0;
  std::vector<double> target;
};

template <class T>
struct TrainResult {
  Model<T> model;
  std::vector<EpochLog> log;
};

namespace detail {

inline void check_regime_model(const TrainConfig& cfg, std::size_t dataset_k, std::size_t model_k, bool mtl,
                               std::size_t head0, std::size_t head1) {
  if (dataset_k != model_k) {
    throw ConfigError("train: dataset has K = " + std::to_string(dataset_k) + " but model K = " +
                      std::to_string(model_k));
  }
  const bool wants_mtl = cfg.regime == Regime::mtl;
  if (wants_mtl != mtl) {
    throw ConfigError(std::string("train: regime '") + regime_name(cfg.regime) + "' does not match a " +
                      (mtl ? "two-head" : "single-head") + " model");
  }
  if (cfg.regime == Regime::la && head0 != model_k + cfg.ops.size()) {
    throw ConfigError("train: la regime needs M = " + std::to_string(cfg.ops.size()) + " op units, model head has " +
                      std::to_string(head0 - model_k));
  }
  if (cfg.regime == Regime::mtl && (head0 != model_k || head1 != cfg.ops.size() + 1)) {
    throw ConfigError("train: mtl heads must be K and M + 1 wide");
  }
  if (cfg.regime == Regime::mtl && cfg.ops.empty()) {
    throw ConfigError("train: mtl regime needs at least one op");
  }
}

enum Stream : std::uint64_t { kPreprocessStream = 1, kAugmentStream = 2, kBatchDeltaStream = 3, kAttackStream = 4 };

}  // namespace detail

// Trains `model` in place. `on_sample`, when set, sees every sample's target.
template <class T>
std::vector<EpochLog> train(const TrainConfig& cfg, Model<T>& model, const Dataset& ds,
                            const std::function<void(const SampleRecord&)>& on_sample = {},
                            const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  ds.validate();
  const std::size_t k = model.num_classes();
  const std::size_t head0 = model.head_width(0);
  const std::size_t head1 = model.is_mtl() ? model.head_width(1) : 0;
  detail::check_regime_model(cfg, ds.num_classes, k, model.is_mtl(), head0, head1);
  // only la and mtl apply the ops; the other regimes see flip/crop alone
  const bool uses_ops = cfg.regime == Regime::la || cfg.regime == Regime::mtl;
  const std::size_t m = uses_ops ? cfg.ops.size() : 0;

  SgdMomentum<T> opt(cfg.momentum);
  const std::size_t per_epoch = (ds.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * per_epoch;
  std::size_t step = 0;
  std::vector<EpochLog> log;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto plan = batches(ds.size(), cfg.batch_size, cfg.seed, epoch);
    EpochLog entry{epoch + 1, 0.0, 0.0, cosine_lr(step, total_steps, cfg.lr0, cfg.eta_min())};
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < plan.size(); ++b) {
      const auto& idx = plan[b];
      const std::size_t n = idx.size();
      std::vector<Image> images;
      images.reserve(n);
      std::vector<std::size_t> labels(n);
      Tensor<T> targets({n, head0});
      Tensor<T> op_targets({n, head1 == 0 ? 1 : head1});
      std::vector<T> class_w(n, T{1}), op_w(n, T{0});

      std::optional<double> batch_delta;
      if (cfg.delta_mode == DeltaMode::per_batch) {
        Rng r(derive_seed({cfg.seed, epoch, b, detail::kBatchDeltaStream}));
        batch_delta = sample_delta(r, cfg.delta);
      }

      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t sample = idx[i];
        const std::size_t label = ds.labels[sample];
        labels[i] = label;
        Image img = ds.image(sample);
        if (cfg.preprocess) {
          img = preprocess_flip_crop(img, derive_seed({cfg.seed, epoch, sample, detail::kPreprocessStream}),
                                     cfg.flip_crop);
        }
        Rng aug(derive_seed({cfg.seed, epoch, sample, detail::kAugmentStream}));
        std::optional<std::size_t> op;
        if (m > 0 && !aug.bernoulli(cfg.identity_probability)) {
          op = static_cast<std::size_t>(aug.below(m));
          img = apply_op(img, sample_op(cfg.ops[*op], aug, cfg.op_ranges));
        }
        auto draw_delta = [&] { return batch_delta ? *batch_delta : sample_delta(aug, cfg.delta); };

        SampleRecord rec{sample, op, 0.0, {}};
        switch (cfg.regime) {
          case Regime::la: {
            const double delta = op ? draw_delta() : 0.0;
            auto lbl = make_la_label(k, m, label, op, delta, cfg.delta);
            rec.delta = delta;
            rec.target = std::move(lbl.values);
            break;
          }
          case Regime::ls: {
            const double delta = draw_delta();
            auto lbl = make_ls_label(k, label, delta);
            rec.delta = delta;
            rec.target = std::move(lbl.values);
            break;
          }
          case Regime::mtl: {
            const double delta = draw_delta();
            auto t = make_mtl_target(k, m, label, op, delta);
            rec.delta = delta;
            rec.target = t.class_onehot;
            for (std::size_t c = 0; c < t.op_onehot.size(); ++c) op_targets.at(i, c) = static_cast<T>(t.op_onehot[c]);
            class_w[i] = static_cast<T>(t.class_weight);
            op_w[i] = static_cast<T>(t.op_weight);
            break;
          }
          default: rec.target = make_onehot(k, label); break;
        }
        for (std::size_t c = 0; c < rec.target.size(); ++c) targets.at(i, c) = static_cast<T>(rec.target[c]);
        if (on_sample) on_sample(rec);
        images.push_back(std::move(img));
      }

      const Tensor<T> x = stack_images<T>(images);
      const double lr = cosine_lr(step, total_steps, cfg.lr0, cfg.eta_min());
      StepResult res;
      switch (cfg.regime) {
        case Regime::mtl:
          res = train_step<T>(
              model, opt, x,
              [&](Tape<T>& tape, const std::vector<Var>& heads) {
                const Var a = tape.weighted_softmax_cross_entropy(heads[0], targets, class_w);
                const Var bl = tape.weighted_softmax_cross_entropy(heads[1], op_targets, op_w);
                return tape.add(a, bl);
              },
              lr);
          break;
        case Regime::adv_fgsm:
        case Regime::adv_pgd: {
          AttackConfig ac = cfg.attack;
          ac.family = cfg.regime == Regime::adv_fgsm ? AttackFamily::fgsm : AttackFamily::pgd;
          ac.seed = derive_seed({cfg.seed, epoch, b, detail::kAttackStream});
          res = adversarial_training_step(model, opt, x, labels, targets, ac, lr);
          break;
        }
        default: res = supervised_step(model, opt, x, targets, lr); break;
      }
      loss_sum += res.loss * static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) correct += res.predictions[i] == labels[i];
      ++step;
    }
    entry.mean_loss = loss_sum / static_cast<double>(ds.size());
    entry.train_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(ds.size());
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return log;
}

// Model shape implied by a regime: two heads (K, M + 1) for mtl, otherwise a
// single K + M head with M = number of configured ops, so every regime of an
// experiment shares one architecture.
inline ModelConfig model_for_regime(ModelConfig base, const TrainConfig& cfg) {
  base.num_ops = cfg.ops.size();
  return base;
}

template <class T>
Model<T> make_model_for(const ModelConfig& base, const TrainConfig& cfg) {
  const ModelConfig mc = model_for_regime(base, cfg);
  if (cfg.regime == Regime::mtl) {
    MtlModelConfig mtl{mc, mc.num_classes, cfg.ops.size() + 1};
    mtl.shared.num_ops = 0;
    return Model<T>(mtl);
  }
  return Model<T>(mc);
}

template <class T>
TrainResult<T> train(const TrainConfig& cfg, const ModelConfig& model_cfg, const Dataset& ds) {
  Model<T> model = make_model_for<T>(model_cfg, cfg);
  auto log = train(cfg, model, ds);
  return {std::move(model), std::move(log)};
}

}  // namespace lakit
