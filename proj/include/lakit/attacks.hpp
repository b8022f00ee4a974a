#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lakit/errors.hpp"
#include "lakit/model.hpp"
#include "lakit/optim.hpp"
#include "lakit/random.hpp"
#include "lakit/tape.hpp"

namespace lakit {

enum class AttackFamily { fgsm, pgd };

// masked_k differentiates through the K class logits only (the test-time
// classifier); full_km uses the whole K + M head.
enum class LogitMode { masked_k, full_km };

inline const char* attack_family_name(AttackFamily f) { return f == AttackFamily::fgsm ? "fgsm" : "pgd"; }
inline const char* logit_mode_name(LogitMode m) { return m == LogitMode::masked_k ? "masked_k" : "full_km"; }

inline AttackFamily parse_attack_family(std::string_view s) {
  if (s == "fgsm") return AttackFamily::fgsm;
  if (s == "pgd") return AttackFamily::pgd;
  throw ConfigError("unknown attack family '" + std::string(s) + "'");
}

inline LogitMode parse_logit_mode(std::string_view s) {
  if (s == "masked_k") return LogitMode::masked_k;
  if (s == "full_km") return LogitMode::full_km;
  throw ConfigError("unknown logit mode '" + std::string(s) + "'");
}

struct AttackConfig {
  AttackFamily family = AttackFamily::fgsm;
  double epsilon = 0.03;
  std::size_t steps = 1;
  double step_size = 0.0;  // <= 0 selects epsilon / 4
  bool random_start = false;
  LogitMode logit_mode = LogitMode::masked_k;
  std::uint64_t seed = 0;

  double effective_step_size() const { return step_size > 0.0 ? step_size : epsilon / 4.0; }

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack: epsilon must be >= 0");
    if (steps < 1) throw ConfigError("attack: steps must be >= 1");
    if (family == AttackFamily::pgd && !(effective_step_size() > 0.0) && epsilon > 0.0) {
      throw ConfigError("attack: pgd step size must be > 0");
    }
  }
};

template <class T>
struct AttackResult {
  Tensor<T> adversarial;
  bool zero_gradient = false;  // some step saw an all-zero input gradient
};

// Gradient of the mean cross-entropy against the true classes with respect to
// the input batch. Parameters are not differentiated.
template <class T>
Tensor<T> input_gradient(const Model<T>& model, const Tensor<T>& x, std::span<const std::size_t> labels,
                         LogitMode mode) {
  if (x.rank() != 4 || labels.size() != x.dim(0)) throw ShapeError("attack: label count does not match batch");
  Tape<T> tape;
  const auto params = model.bind(tape, false);
  const Var input = tape.leaf(x, true);
  Var logits = model.forward_logits(tape, params, input);
  const std::size_t k = model.num_classes();
  const std::size_t width = tape.shape(logits)[1];
  std::size_t classes = width;
  if (mode == LogitMode::masked_k && width > k) {
    logits = tape.slice_cols(logits, 0, k);
    classes = k;
  }
  Tensor<T> targets({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) throw ValidationError("attack: label " + std::to_string(labels[i]) + " >= K");
    targets.at(i, labels[i]) = T{1};
  }
  const Var loss = tape.softmax_cross_entropy(logits, targets);
  return tape.backward(loss, {input})[0];
}

namespace detail {

// Bounds of [origin - eps, origin + eps] intersected with [0, 1], tightened by
// one ulp where rounding would let |x - origin| exceed eps.
template <class T>
std::pair<T, T> linf_bounds(T origin, T eps) {
  T lo = origin - eps;
  T hi = origin + eps;
  using Wide = long double;
  while (static_cast<Wide>(origin) - static_cast<Wide>(lo) > static_cast<Wide>(eps)) lo = std::nextafter(lo, origin);
  while (static_cast<Wide>(hi) - static_cast<Wide>(origin) > static_cast<Wide>(eps)) hi = std::nextafter(hi, origin);
  return {std::max(lo, T{0}), std::min(hi, T{1})};
}

// Largest T not above eps, so narrowing never widens the budget.
template <class T>
T budget_as(double eps) {
  T e = static_cast<T>(eps);
  while (static_cast<double>(e) > eps) e = std::nextafter(e, T{0});
  return e;
}

template <class T>
T project(T candidate, T origin, T eps) {
  const auto [lo, hi] = linf_bounds(origin, eps);
  return std::clamp(candidate, lo, hi);
}

template <class T>
T sign_of(T v) {
  return static_cast<T>((v > T{0}) - (v < T{0}));
}

// x <- project(x + step * sign(g)) against the ball around origin.
template <class T>
bool signed_step(Tensor<T>& x, const Tensor<T>& origin, const Tensor<T>& grad, T step, T eps) {
  bool all_zero = true;
  auto xv = x.data();
  const auto ov = origin.data();
  const auto gv = grad.data();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (gv[i] != T{0}) all_zero = false;
    xv[i] = project(static_cast<T>(xv[i] + step * sign_of(gv[i])), ov[i], eps);
  }
  return all_zero;
}

}  // namespace detail

// x' = clamp(x + eps * sign(grad_x L)) inside the L-inf ball and [0, 1].
template <class T>
AttackResult<T> fgsm(const Model<T>& model, const Tensor<T>& x, std::span<const std::size_t> labels,
                     const AttackConfig& cfg) {
  cfg.validate();
  const T eps = detail::budget_as<T>(cfg.epsilon);
  AttackResult<T> out{x, false};
  const auto g = input_gradient(model, x, labels, cfg.logit_mode);
  out.zero_gradient = detail::signed_step(out.adversarial, x, g, eps, eps);
  return out;
}

// Projected signed-gradient ascent, projection after every step. With
// random_start the iterate begins at a uniform point of the eps-ball.
template <class T>
AttackResult<T> pgd(const Model<T>& model, const Tensor<T>& x, std::span<const std::size_t> labels,
                    const AttackConfig& cfg) {
  cfg.validate();
  const T eps = detail::budget_as<T>(cfg.epsilon);
  const T alpha = detail::budget_as<T>(cfg.effective_step_size());
  AttackResult<T> out{x, false};
  if (cfg.random_start) {
    Rng rng(cfg.seed);
    auto xv = out.adversarial.data();
    const auto ov = x.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      xv[i] = detail::project(static_cast<T>(ov[i] + static_cast<T>(rng.uniform(-cfg.epsilon, cfg.epsilon))), ov[i], eps);
    }
  }
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const auto g = input_gradient(model, out.adversarial, labels, cfg.logit_mode);
    if (detail::signed_step(out.adversarial, x, g, alpha, eps)) out.zero_gradient = true;
  }
  return out;
}

template <class T>
AttackResult<T> attack(const Model<T>& model, const Tensor<T>& x, std::span<const std::size_t> labels,
                       const AttackConfig& cfg) {
  return cfg.family == AttackFamily::fgsm ? fgsm(model, x, labels, cfg) : pgd(model, x, labels, cfg);
}

// Crafts adversarial inputs against the current weights (no gradient flows
// into generation), then takes one supervised step on them.
template <class T>
StepResult adversarial_training_step(Model<T>& model, SgdMomentum<T>& opt, const Tensor<T>& x,
                                     std::span<const std::size_t> labels, const Tensor<T>& targets,
                                     const AttackConfig& cfg, double lr) {
  const auto adv = attack(model, x, labels, cfg);
  return supervised_step(model, opt, adv.adversarial, targets, lr);
}

}  // namespace lakit
