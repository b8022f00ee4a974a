#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "lakit/checkpoint.hpp"
#include "lakit/errors.hpp"
#include "lakit/model.hpp"
#include "lakit/tape.hpp"

namespace lakit {

// lr(t) = eta_min + (lr0 - eta_min) (1 + cos(pi t / T)) / 2, 0 <= t <= T.
inline double cosine_lr(std::size_t step, std::size_t total, double lr0, double eta_min) {
  if (step > total) {
    throw ValidationError("cosine_lr: step " + std::to_string(step) + " beyond schedule length " +
                          std::to_string(total));
  }
  if (total == 0) return lr0;
  if (step == total) return eta_min;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

// v <- mu v + g ; p <- p - lr v
template <class T>
void sgd_momentum_step(std::vector<NamedTensor<T>>& params, const std::vector<Tensor<T>>& grads,
                       std::vector<Tensor<T>>& velocity, double lr, double momentum) {
  if (grads.size() != params.size()) throw ShapeError("sgd: gradient count does not match parameters");
  if (velocity.empty()) {
    for (const auto& p : params) velocity.emplace_back(p.tensor.shape());
  }
  if (velocity.size() != params.size()) throw ShapeError("sgd: velocity count does not match parameters");
  const T mu = static_cast<T>(momentum);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    if (grads[i].shape() != p.shape() || velocity[i].shape() != p.shape()) {
      throw ShapeError("sgd: shape mismatch on '" + params[i].name + "': " + to_string(p.shape()) + " vs " +
                       to_string(grads[i].shape()));
    }
    auto pv = p.data();
    auto vv = velocity[i].data();
    const auto gv = grads[i].data();
    for (std::size_t j = 0; j < pv.size(); ++j) {
      vv[j] = mu * vv[j] + gv[j];
      pv[j] -= rate * vv[j];
    }
  }
}

template <class T>
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}

  void step(std::vector<NamedTensor<T>>& params, const std::vector<Tensor<T>>& grads, double lr) {
    sgd_momentum_step(params, grads, velocity_, lr, momentum_);
  }

  double momentum() const noexcept { return momentum_; }
  const std::vector<Tensor<T>>& velocity() const noexcept { return velocity_; }

 private:
  double momentum_;
  std::vector<Tensor<T>> velocity_;
};

template <class T>
using HeadLoss = std::function<Var(Tape<T>&, const std::vector<Var>& heads)>;

struct StepResult {
  double loss = 0.0;
  std::vector<std::size_t> predictions;  // masked class prediction on head 0
};

// One forward/backward/update on `x` with a caller-supplied loss over the
// model's heads. Batch-norm layers run in the train phase and their running
// statistics are updated after the parameter step.
template <class T>
StepResult train_step(Model<T>& model, SgdMomentum<T>& opt, const Tensor<T>& x, const HeadLoss<T>& loss_fn,
                      double lr) {
  Tape<T> tape;
  const auto params = model.bind(tape, true);
  const Var input = tape.constant(x);
  std::vector<BatchNormStats<T>> stats;
  const auto heads = model.forward_heads(tape, params, input, Phase::train, &stats);
  const Var loss = loss_fn(tape, heads);
  auto grads = tape.backward(loss, params);
  StepResult out;
  out.loss = static_cast<double>(tape.value(loss)[0]);
  out.predictions = masked_class_prediction(tape.value(heads[0]), model.num_classes()).pred;
  opt.step(model.parameters(), grads, lr);
  if (!stats.empty()) model.update_running_stats(stats);
  return out;
}

// Soft-target cross-entropy on head 0.
template <class T>
StepResult supervised_step(Model<T>& model, SgdMomentum<T>& opt, const Tensor<T>& x, const Tensor<T>& targets,
                           double lr) {
  return train_step<T>(
      model, opt, x,
      [&targets](Tape<T>& tape, const std::vector<Var>& heads) { return tape.softmax_cross_entropy(heads[0], targets); },
      lr);
}

}  // namespace lakit
