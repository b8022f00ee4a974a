#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lakit/checkpoint.hpp"
#include "lakit/errors.hpp"
#include "lakit/random.hpp"
#include "lakit/tape.hpp"
#include "lakit/tensor.hpp"

namespace lakit {

enum class Arch { mlp, small_cnn };

inline const char* arch_name(Arch a) { return a == Arch::mlp ? "mlp" : "small_cnn"; }

// Single-head classifier configuration. The output head has K + M units:
// class logits at 0..K-1, augmentation-operation logits at K..K+M-1.
struct ModelConfig {
  Arch arch = Arch::small_cnn;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 10;  // K
  std::size_t num_ops = 0;       // M
  // mlp: hidden dense widths (empty = linear classifier).
  // small_cnn: output channels of each conv(3x3, pad 1)/batch-norm/relu/maxpool(2)
  // stage; the last stage is global-average-pooled into the head.
  std::vector<std::size_t> hidden = {32, 64, 128};
  bool batch_norm = true;  // small_cnn only; false gives conv + bias stages
  std::uint64_t init_seed = 0;

  std::size_t head_width() const { return num_classes + num_ops; }
};

inline std::vector<std::size_t> default_hidden(Arch a) {
  return a == Arch::mlp ? std::vector<std::size_t>{128} : std::vector<std::size_t>{32, 64, 128};
}

// Shared trunk with two task heads: head_a predicts the class, head_b the
// augmentation operation.
struct MtlModelConfig {
  ModelConfig shared;
  std::size_t head_a = 10;
  std::size_t head_b = 1;
};

// train: batch-norm layers normalize with batch statistics; eval: with the
// running statistics.
enum class Phase { train, eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    validate(cfg_);
    if (cfg_.head_width() < 2) throw ConfigError("model: head width K + M must be at least 2");
    build({cfg_.head_width()}, {"head"});
  }

  explicit Model(const MtlModelConfig& cfg) : cfg_(cfg.shared) {
    validate(cfg_);
    if (cfg.head_a < 2) throw ConfigError("model: class head needs at least 2 units");
    if (cfg.head_b < 1) throw ConfigError("model: operation head needs at least 1 unit");
    build({cfg.head_a, cfg.head_b}, {"head_a", "head_b"});
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  std::size_t num_classes() const noexcept { return cfg_.num_classes; }
  std::size_t head_count() const noexcept { return head_widths_.size(); }
  std::size_t head_width(std::size_t head) const { return head_widths_.at(head); }
  bool is_mtl() const noexcept { return head_widths_.size() == 2; }

  std::vector<NamedTensor<T>>& parameters() noexcept { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const noexcept { return params_; }

  // Non-trainable state (batch-norm running mean / variance), in layer order.
  const std::vector<NamedTensor<T>>& buffers() const noexcept { return buffers_; }

  // Parameters followed by buffers: everything a checkpoint must hold.
  std::vector<NamedTensor<T>> state() const {
    auto all = params_;
    all.insert(all.end(), buffers_.begin(), buffers_.end());
    return all;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  Shape input_shape(std::size_t batch) const { return {batch, cfg_.channels, cfg_.height, cfg_.width}; }

  // Records every parameter as a leaf. Pass trainable = false when only input
  // gradients are wanted (attacks).
  std::vector<Var> bind(Tape<T>& tape, bool trainable) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(tape.leaf(p.tensor, trainable));
    return vars;
  }

  // One Var per head, each [N x head_width]. In the train phase the batch
  // statistics of every batch-norm layer are appended to `batch_stats`.
  std::vector<Var> forward_heads(Tape<T>& tape, std::span<const Var> params, Var x, Phase phase = Phase::eval,
                                 std::vector<BatchNormStats<T>>* batch_stats = nullptr) const {
    const Shape& xs = tape.shape(x);
    if (xs.size() != 4 || xs[1] != cfg_.channels || xs[2] != cfg_.height || xs[3] != cfg_.width) {
      throw ShapeError("model: input " + to_string(xs) + " does not match configured " +
                       to_string(input_shape(xs.empty() ? 0 : xs[0])));
    }
    if (params.size() != params_.size()) throw ShapeError("model: parameter binding size mismatch");
    std::size_t p = 0;
    Var h = x;
    if (cfg_.arch == Arch::small_cnn) {
      for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
        h = tape.conv2d(h, params[p++], {1, 1});
        if (cfg_.batch_norm) {
          BatchNormStats<T> stats;
          if (phase == Phase::train) {
            h = tape.batch_norm(h, params[p], params[p + 1], kBatchNormEps, nullptr, &stats);
            if (batch_stats) batch_stats->push_back(std::move(stats));
          } else {
            const BatchNormStats<T> running{buffers_[2 * l].tensor, buffers_[2 * l + 1].tensor};
            h = tape.batch_norm(h, params[p], params[p + 1], kBatchNormEps, &running);
          }
          p += 2;
        } else {
          h = tape.add_bias(h, params[p++]);
        }
        h = tape.max_pool2d(tape.relu(h), 2);
      }
      h = tape.global_avg_pool(h);
    } else {
      h = tape.flatten(h);
      for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
        h = tape.relu(tape.add_bias(tape.matmul(h, params[p]), params[p + 1]));
        p += 2;
      }
    }
    std::vector<Var> heads;
    for (std::size_t k = 0; k < head_widths_.size(); ++k) {
      heads.push_back(tape.add_bias(tape.matmul(h, params[p]), params[p + 1]));
      p += 2;
    }
    return heads;
  }

  Var forward_logits(Tape<T>& tape, std::span<const Var> params, Var x) const {
    return forward_heads(tape, params, x, Phase::eval)[0];
  }

  // running <- (1 - momentum) running + momentum batch, per batch-norm layer.
  void update_running_stats(const std::vector<BatchNormStats<T>>& batch, double momentum = kBatchNormMomentum) {
    if (batch.size() * 2 != buffers_.size()) throw ShapeError("model: batch statistics do not match layers");
    const T mu = static_cast<T>(momentum);
    for (std::size_t l = 0; l < batch.size(); ++l) {
      auto mean = buffers_[2 * l].tensor.data();
      auto var = buffers_[2 * l + 1].tensor.data();
      for (std::size_t c = 0; c < mean.size(); ++c) {
        mean[c] = (T{1} - mu) * mean[c] + mu * batch[l].mean[c];
        var[c] = (T{1} - mu) * var[c] + mu * batch[l].var[c];
      }
    }
  }

  // Inference helper on a private tape; returns head 0 logits.
  Tensor<T> predict_logits(const Tensor<T>& batch) const {
    Tape<T> tape;
    const auto params = bind(tape, false);
    const Var x = tape.constant(batch);
    return tape.value(forward_logits(tape, params, x));
  }

  // Replaces parameters and buffers from a state() snapshot; names and
  // shapes must match exactly.
  void load_state(const std::vector<NamedTensor<T>>& values) {
    auto current = state();
    if (values.size() != current.size()) throw DataError("checkpoint: record count does not match model");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i].name != current[i].name || values[i].tensor.shape() != current[i].tensor.shape()) {
        throw DataError("checkpoint: record '" + values[i].name + "' " + to_string(values[i].tensor.shape()) +
                        " does not match '" + current[i].name + "' " + to_string(current[i].tensor.shape()));
      }
    }
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].tensor = values[i].tensor;
    for (std::size_t i = 0; i < buffers_.size(); ++i) buffers_[i].tensor = values[params_.size() + i].tensor;
  }

  template <class U>
  Model<U> cast() const {
    Model<U> out(*this, typename Model<U>::CastTag{});
    return out;
  }

  // Used by cast(); not part of the public surface.
  struct CastTag {};
  template <class V>
  Model(const Model<V>& src, CastTag) : cfg_(src.config()) {
    for (std::size_t k = 0; k < src.head_count(); ++k) head_widths_.push_back(src.head_width(k));
    for (const auto& p : src.parameters()) params_.push_back({p.name, p.tensor.template cast<T>()});
    for (const auto& b : src.buffers()) buffers_.push_back({b.name, b.tensor.template cast<T>()});
  }

 private:
  static void validate(const ModelConfig& cfg) {
    if (cfg.channels == 0 || cfg.height == 0 || cfg.width == 0) throw ConfigError("model: empty input shape");
    if (cfg.num_classes < 2) throw ConfigError("model: K must be at least 2");
    for (std::size_t w : cfg.hidden)
      if (w == 0) throw ConfigError("model: zero hidden width");
    if (cfg.arch == Arch::small_cnn) {
      if (cfg.hidden.empty()) throw ConfigError("model: small_cnn needs at least one conv stage");
      const std::size_t div = std::size_t{1} << cfg.hidden.size();
      if (cfg.height % div != 0 || cfg.width % div != 0) {
        throw ConfigError("model: input extent not divisible by pooling factor " + std::to_string(div));
      }
    }
  }

  void add_param(std::string name, Shape shape, std::size_t fan_in, Rng& rng, bool zero) {
    Tensor<T> t(std::move(shape));
    if (!zero) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    params_.push_back({std::move(name), std::move(t)});
  }

  void build(std::vector<std::size_t> heads, std::vector<std::string> head_names) {
    head_widths_ = std::move(heads);
    Rng rng(cfg_.init_seed);
    std::size_t features = 0;
    if (cfg_.arch == Arch::small_cnn) {
      std::size_t in_ch = cfg_.channels;
      for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
        const std::size_t out_ch = cfg_.hidden[l];
        const std::string id = std::to_string(l);
        add_param("conv" + id + ".weight", {out_ch, in_ch, 3, 3}, in_ch * 9, rng, false);
        if (cfg_.batch_norm) {
          // the normalization cancels a conv bias, so the stage has none
          params_.push_back({"bn" + id + ".weight", Tensor<T>({out_ch}, T{1})});
          params_.push_back({"bn" + id + ".bias", Tensor<T>({out_ch})});
          buffers_.push_back({"bn" + id + ".running_mean", Tensor<T>({out_ch})});
          buffers_.push_back({"bn" + id + ".running_var", Tensor<T>({out_ch}, T{1})});
        } else {
          add_param("conv" + id + ".bias", {out_ch}, 0, rng, true);
        }
        in_ch = out_ch;
      }
      features = in_ch;
    } else {
      std::size_t in = cfg_.channels * cfg_.height * cfg_.width;
      for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
        add_param("fc" + std::to_string(l) + ".weight", {in, cfg_.hidden[l]}, in, rng, false);
        add_param("fc" + std::to_string(l) + ".bias", {cfg_.hidden[l]}, 0, rng, true);
        in = cfg_.hidden[l];
      }
      features = in;
    }
    for (std::size_t k = 0; k < head_widths_.size(); ++k) {
      add_param(head_names[k] + ".weight", {features, head_widths_[k]}, features, rng, false);
      add_param(head_names[k] + ".bias", {head_widths_[k]}, 0, rng, true);
    }
  }

  template <class>
  friend class Model;

  ModelConfig cfg_;
  std::vector<std::size_t> head_widths_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
};

template <class T>
Model<T> build_model(const ModelConfig& cfg) {
  return Model<T>(cfg);
}

template <class T>
struct MaskedPrediction {
  std::vector<std::size_t> pred;
  Tensor<T> probs;  // [N x K]
};

// Softmax over the first K logits only; the trailing augmentation logits are
// dropped before normalization.
template <class T>
MaskedPrediction<T> masked_class_prediction(const Tensor<T>& logits, std::size_t k) {
  if (logits.rank() != 2) throw ShapeError("masked_class_prediction: logits must be a matrix");
  const std::size_t rows = logits.dim(0), width = logits.dim(1);
  if (k > width) {
    throw ShapeError("masked_class_prediction: K = " + std::to_string(k) + " exceeds logit width " +
                     std::to_string(width));
  }
  if (k == 0) throw ShapeError("masked_class_prediction: K must be positive");
  MaskedPrediction<T> out{std::vector<std::size_t>(rows), Tensor<T>({rows, k})};
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    T mx = logits.at(r, 0);
    for (std::size_t c = 1; c < k; ++c)
      if (logits.at(r, c) > mx) {
        mx = logits.at(r, c);
        best = c;
      }
    T denom{0};
    for (std::size_t c = 0; c < k; ++c) denom += std::exp(logits.at(r, c) - mx);
    for (std::size_t c = 0; c < k; ++c) out.probs.at(r, c) = std::exp(logits.at(r, c) - mx) / denom;
    out.pred[r] = best;
  }
  return out;
}

}  // namespace lakit
