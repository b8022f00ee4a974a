#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lakit/detail/gemm.hpp"
#include "lakit/errors.hpp"
#include "lakit/tensor.hpp"

namespace lakit {

// Handle to a value recorded on a Tape. Only valid for the tape (and the
// recording session) that produced it.
struct Var {
  std::uint64_t tape_serial = 0;
  std::size_t index = 0;
};

enum class KernelKind { relu, exp, log, neg, scale, power, sign };

struct Kernel {
  KernelKind kind;
  double param = 0.0;

  static Kernel relu() { return {KernelKind::relu}; }
  static Kernel exp() { return {KernelKind::exp}; }
  static Kernel log() { return {KernelKind::log}; }
  static Kernel neg() { return {KernelKind::neg}; }
  static Kernel scale(double c) { return {KernelKind::scale, c}; }
  static Kernel power(double gamma) { return {KernelKind::power, gamma}; }
  static Kernel sign() { return {KernelKind::sign}; }
};

inline const char* kernel_name(KernelKind k) {
  switch (k) {
    case KernelKind::relu: return "relu";
    case KernelKind::exp: return "exp";
    case KernelKind::log: return "log";
    case KernelKind::neg: return "neg";
    case KernelKind::scale: return "scale";
    case KernelKind::power: return "power";
    case KernelKind::sign: return "sign";
  }
  return "?";
}

// Per-channel mean and (biased) variance used by Tape::batch_norm.
template <class T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
};

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// Reverse-mode gradient tape. Nodes are appended in evaluation order, so the
// node list is always topologically sorted; backward walks it once in reverse.
//
// Usage:
//   Tape<double> tape;
//   auto x = tape.leaf(input, true);
//   auto loss = tape.sum(tape.map(x, Kernel::relu()));
//   auto grads = tape.backward(loss, {x});
template <class T>
class Tape {
 public:
  Tape() : serial_(next_serial()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  // Drops every node; previously issued Vars become invalid.
  void reset() {
    nodes_.clear();
    backward_done_ = false;
    serial_ = next_serial();
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  bool owns(const Var& v) const noexcept { return v.tape_serial == serial_ && v.index < nodes_.size(); }

  Var leaf(Tensor<T> value, bool requires_grad) {
    return push(std::move(value), requires_grad, {}, nullptr);
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value(const Var& v) const { return node(v).value; }
  const Shape& shape(const Var& v) const { return node(v).value.shape(); }

  bool requires_grad(const Var& v) const { return node(v).requires_grad; }

  // Gradient of the last backward() loss with respect to v. Nodes that did not
  // receive any gradient report zeros.
  Tensor<T> grad(const Var& v) const {
    const Node& n = node(v);
    if (!backward_done_) throw TapeError("grad requested before backward");
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return Tensor<T>(n.value.shape(), n.grad);
  }

  // ---- elementwise --------------------------------------------------------

  Var map(Var x, Kernel k) {
    const Tensor<T>& in = value(x);
    const auto src = in.data();
    const T p = static_cast<T>(k.param);
    const bool integral_power = k.kind == KernelKind::power && std::floor(k.param) == k.param;
    for (std::size_t i = 0; i < src.size(); ++i) {
      const bool bad = (k.kind == KernelKind::log && !(src[i] > T{0})) ||
                       (k.kind == KernelKind::power && !integral_power && src[i] < T{0}) ||
                       ((k.kind == KernelKind::log || k.kind == KernelKind::power) && !std::isfinite(src[i]));
      if (bad) {
        throw DomainError(std::string(kernel_name(k.kind)) + ": input out of domain at index " + std::to_string(i));
      }
    }
    Tensor<T> out(in.shape());
    auto dst = out.data();
    switch (k.kind) {
      case KernelKind::relu:
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T{0} ? src[i] : T{0};
        break;
      case KernelKind::exp:
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::exp(src[i]);
        break;
      case KernelKind::log:
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::log(src[i]);
        break;
      case KernelKind::neg:
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = -src[i];
        break;
      case KernelKind::scale:
        if (k.param == 1.0) {
          std::copy(src.begin(), src.end(), dst.begin());
        } else {
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] = p * src[i];
        }
        break;
      case KernelKind::power:
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::pow(src[i], p);
        break;
      case KernelKind::sign:
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>((src[i] > T{0}) - (src[i] < T{0}));
        break;
    }
    return push(std::move(out), requires_grad(x), {x.index}, [k](Tape& t, std::size_t self) {
      Node& n = t.nodes_[self];
      const std::size_t parent = n.parents[0];
      if (!t.nodes_[parent].requires_grad) return;
      auto& pg = t.grad_buffer(parent);
      const auto in = t.nodes_[parent].value.data();
      const auto out = n.value.data();
      const auto& g = n.grad;
      const T p = static_cast<T>(k.param);
      switch (k.kind) {
        case KernelKind::relu:
          for (std::size_t i = 0; i < g.size(); ++i)
            if (in[i] > T{0}) pg[i] += g[i];
          break;
        case KernelKind::exp:
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * out[i];
          break;
        case KernelKind::log:
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] / in[i];
          break;
        case KernelKind::neg:
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] -= g[i];
          break;
        case KernelKind::scale:
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] += p * g[i];
          break;
        case KernelKind::power:
          for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * p * std::pow(in[i], p - T{1});
          break;
        case KernelKind::sign:
          break;
      }
    });
  }

  Var relu(Var x) { return map(x, Kernel::relu()); }

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    const auto& va = value(a);
    const auto& vb = value(b);
    Tensor<T> out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
    return push(std::move(out), requires_grad(a) || requires_grad(b), {a.index, b.index},
                [](Tape& t, std::size_t self) {
                  for (std::size_t which = 0; which < 2; ++which) {
                    const std::size_t parent = t.nodes_[self].parents[which];
                    if (!t.nodes_[parent].requires_grad) continue;
                    auto& pg = t.grad_buffer(parent);
                    const auto& g = t.nodes_[self].grad;
                    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
                  }
                });
  }

  Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    const auto& va = value(a);
    const auto& vb = value(b);
    Tensor<T> out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
    return push(std::move(out), requires_grad(a) || requires_grad(b), {a.index, b.index},
                [](Tape& t, std::size_t self) {
                  const std::size_t pa = t.nodes_[self].parents[0];
                  const std::size_t pb = t.nodes_[self].parents[1];
                  for (std::size_t which = 0; which < 2; ++which) {
                    const std::size_t parent = which == 0 ? pa : pb;
                    const std::size_t other = which == 0 ? pb : pa;
                    if (!t.nodes_[parent].requires_grad) continue;
                    auto& pg = t.grad_buffer(parent);
                    const auto& g = t.nodes_[self].grad;
                    const auto ov = t.nodes_[other].value.data();
                    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * ov[i];
                  }
                });
  }

  // Bias-add, the only broadcast supported: x [N x D] + b [D], or
  // x [N x C x H x W] + b [C].
  Var add_bias(Var x, Var b) {
    const Shape& xs = shape(x);
    const Shape& bs = shape(b);
    if (bs.size() != 1 || (xs.size() != 2 && xs.size() != 4) || xs[1] != bs[0]) {
      throw ShapeError("add_bias: cannot add bias " + to_string(bs) + " to " + to_string(xs));
    }
    const std::size_t n = xs[0];
    const std::size_t ch = xs[1];
    const std::size_t inner = xs.size() == 4 ? xs[2] * xs[3] : 1;
    Tensor<T> out = value(x);
    const auto bv = value(b).data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < ch; ++c) {
        T* row = out.data().data() + (i * ch + c) * inner;
        for (std::size_t j = 0; j < inner; ++j) row[j] += bv[c];
      }
    return push(std::move(out), requires_grad(x) || requires_grad(b), {x.index, b.index},
                [n, ch, inner](Tape& t, std::size_t self) {
                  const std::size_t px = t.nodes_[self].parents[0];
                  const std::size_t pb = t.nodes_[self].parents[1];
                  const auto& g = t.nodes_[self].grad;
                  if (t.nodes_[px].requires_grad) {
                    auto& pg = t.grad_buffer(px);
                    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
                  }
                  if (t.nodes_[pb].requires_grad) {
                    auto& pg = t.grad_buffer(pb);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t c = 0; c < ch; ++c) {
                        const T* row = g.data() + (i * ch + c) * inner;
                        T acc{0};
                        for (std::size_t j = 0; j < inner; ++j) acc += row[j];
                        pg[c] += acc;
                      }
                  }
                });
  }

  // Reduces to a scalar (shape [1]).
  Var sum(Var x) {
    T acc{0};
    for (T v : value(x).data()) acc += v;
    return push(Tensor<T>({1}, {acc}), requires_grad(x), {x.index}, [](Tape& t, std::size_t self) {
      const std::size_t parent = t.nodes_[self].parents[0];
      if (!t.nodes_[parent].requires_grad) return;
      auto& pg = t.grad_buffer(parent);
      const T g = t.nodes_[self].grad[0];
      for (auto& v : pg) v += g;
    });
  }

  Var reshape(Var x, Shape new_shape) {
    Tensor<T> out = value(x).reshaped(std::move(new_shape));
    return push(std::move(out), requires_grad(x), {x.index}, [](Tape& t, std::size_t self) {
      const std::size_t parent = t.nodes_[self].parents[0];
      if (!t.nodes_[parent].requires_grad) return;
      auto& pg = t.grad_buffer(parent);
      const auto& g = t.nodes_[self].grad;
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    });
  }

  // [N x ...] -> [N x prod(...)]
  Var flatten(Var x) {
    const Shape& s = shape(x);
    if (s.empty()) throw ShapeError("flatten: scalar input");
    return reshape(x, {s[0], numel(s) / std::max<std::size_t>(s[0], 1)});
  }

  // Columns [begin, end) of a matrix.
  Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    const Shape& s = shape(x);
    if (s.size() != 2 || begin >= end || end > s[1]) {
      throw ShapeError("slice_cols: invalid range [" + std::to_string(begin) + ", " + std::to_string(end) +
                       ") for " + to_string(s));
    }
    const std::size_t rows = s[0];
    const std::size_t cols = s[1];
    const std::size_t width = end - begin;
    Tensor<T> out({rows, width});
    const auto& in = value(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < width; ++c) out.at(r, c) = in.at(r, begin + c);
    return push(std::move(out), requires_grad(x), {x.index},
                [rows, cols, begin, width](Tape& t, std::size_t self) {
                  const std::size_t parent = t.nodes_[self].parents[0];
                  if (!t.nodes_[parent].requires_grad) return;
                  auto& pg = t.grad_buffer(parent);
                  const auto& g = t.nodes_[self].grad;
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < width; ++c) pg[r * cols + begin + c] += g[r * width + c];
                });
  }

  // ---- linear algebra -----------------------------------------------------

  Var matmul(Var a, Var b) {
    const Shape& as = shape(a);
    const Shape& bs = shape(b);
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
      throw ShapeError("matmul: incompatible shapes " + to_string(as) + " and " + to_string(bs));
    }
    const std::size_t m = as[0], k = as[1], n = bs[1];
    Tensor<T> out({m, n});
    detail::gemm_nn(m, k, n, value(a).data().data(), value(b).data().data(), out.data().data(), false);
    return push(std::move(out), requires_grad(a) || requires_grad(b), {a.index, b.index},
                [m, k, n](Tape& t, std::size_t self) {
                  const std::size_t pa = t.nodes_[self].parents[0];
                  const std::size_t pb = t.nodes_[self].parents[1];
                  const T* g = t.nodes_[self].grad.data();
                  if (t.nodes_[pa].requires_grad) {
                    // dA = G * B^T
                    auto& ga = t.grad_buffer(pa);
                    detail::gemm_nt(m, n, k, g, t.nodes_[pb].value.data().data(), ga.data(), true, t.scratch_);
                  }
                  if (t.nodes_[pb].requires_grad) {
                    // dB = A^T * G
                    auto& gb = t.grad_buffer(pb);
                    detail::gemm_tn(k, m, n, t.nodes_[pa].value.data().data(), g, gb.data(), true);
                  }
                });
  }

  // x [N x C x H x W], w [F x C x kh x kw] -> [N x F x H' x W'].
  Var conv2d(Var x, Var w, Conv2dParams p = {}) {
    const Shape& xs = shape(x);
    const Shape& ws = shape(w);
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1]) {
      throw ShapeError("conv2d: incompatible input " + to_string(xs) + " and weight " + to_string(ws));
    }
    const ConvGeom geo = conv_geometry(xs, ws, p);
    Tensor<T> out({geo.n, geo.f, geo.oh, geo.ow});
    const bool grad = requires_grad(x) || requires_grad(w);
    // the unfolded input is kept for the weight gradient when one is needed
    const bool keep = grad && requires_grad(w);
    auto cols = std::make_shared<std::vector<T>>(geo.ckk * geo.ohw * (keep ? geo.n : 1));
    const T* xd = value(x).data().data();
    const T* wd = value(w).data().data();
    for (std::size_t i = 0; i < geo.n; ++i) {
      T* ci = cols->data() + (keep ? i * geo.ckk * geo.ohw : 0);
      im2col(geo, xd + i * geo.c * geo.h * geo.w, ci);
      detail::gemm_nn(geo.f, geo.ckk, geo.ohw, wd, ci, out.data().data() + i * geo.f * geo.ohw, false);
    }
    if (!keep) cols.reset();
    return push(std::move(out), grad, {x.index, w.index},
                [geo, cols](Tape& t, std::size_t self) {
                  const std::size_t px = t.nodes_[self].parents[0];
                  const std::size_t pw = t.nodes_[self].parents[1];
                  const bool need_x = t.nodes_[px].requires_grad;
                  const bool need_w = t.nodes_[pw].requires_grad;
                  const T* g = t.nodes_[self].grad.data();
                  const T* wd = t.nodes_[pw].value.data().data();
                  T* gx = need_x ? t.grad_buffer(px).data() : nullptr;
                  if (need_w) {
                    // dW^T [ckk x f] += cols_i [ckk x ohw] * G_i^T [ohw x f], images in order;
                    // per element this is the same ascending sum as dW += G_i cols_i^T.
                    auto& gwt = t.grad_buffer(pw);
                    std::vector<T> acc(geo.ckk * geo.f);
                    detail::transpose(geo.f, geo.ckk, gwt.data(), acc.data());
                    std::vector<T> gt(geo.ohw * geo.f);
                    for (std::size_t i = 0; i < geo.n; ++i) {
                      detail::transpose(geo.f, geo.ohw, g + i * geo.f * geo.ohw, gt.data());
                      detail::gemm_nn(geo.ckk, geo.ohw, geo.f, cols->data() + i * geo.ckk * geo.ohw, gt.data(),
                                      acc.data(), true);
                    }
                    detail::transpose(geo.ckk, geo.f, acc.data(), gwt.data());
                  }
                  if (need_x) {
                    std::vector<T> dcols(geo.ckk * geo.ohw);
                    for (std::size_t i = 0; i < geo.n; ++i) {
                      // dcols = W^T * G_i
                      detail::gemm_tn(geo.ckk, geo.f, geo.ohw, wd, g + i * geo.f * geo.ohw, dcols.data(), false);
                      col2im_add(geo, dcols.data(), gx + i * geo.c * geo.h * geo.w);
                    }
                  }
                });
  }

  // Non-overlapping k x k max pooling; H and W must be multiples of k. Ties
  // route the gradient to the first maximal element in row-major order.
  Var max_pool2d(Var x, std::size_t k) {
    const Shape& s = shape(x);
    if (s.size() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0) {
      throw ShapeError("max_pool2d: extent of " + to_string(s) + " not divisible by " + std::to_string(k));
    }
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / k, ow = w / k;
    Tensor<T> out({s[0], s[1], oh, ow});
    std::vector<std::size_t> argmax(out.size());
    const T* in = value(x).data().data();
    for (std::size_t pl = 0; pl < planes; ++pl)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = pl * h * w + (oy * k) * w + ox * k;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) {
              const std::size_t idx = pl * h * w + (oy * k + dy) * w + ox * k + dx;
              if (in[idx] > in[best]) best = idx;
            }
          const std::size_t o = (pl * oh + oy) * ow + ox;
          out[o] = in[best];
          argmax[o] = best;
        }
    return push(std::move(out), requires_grad(x), {x.index},
                [argmax = std::move(argmax)](Tape& t, std::size_t self) {
                  const std::size_t parent = t.nodes_[self].parents[0];
                  if (!t.nodes_[parent].requires_grad) return;
                  auto& pg = t.grad_buffer(parent);
                  const auto& g = t.nodes_[self].grad;
                  for (std::size_t i = 0; i < g.size(); ++i) pg[argmax[i]] += g[i];
                });
  }

  // Per-channel normalization of x [N x C x H x W] or [N x C], then
  // y = gamma * xhat + beta. With `running` set, xhat uses those statistics
  // (inference); otherwise it uses the biased batch statistics over N x H x W,
  // which are written to `batch` when non-null.
  Var batch_norm(Var x, Var gamma, Var beta, double eps, const BatchNormStats<T>* running = nullptr,
                 BatchNormStats<T>* batch = nullptr) {
    const Shape& xs = shape(x);
    if ((xs.size() != 2 && xs.size() != 4) || shape(gamma) != Shape{xs[1]} || shape(beta) != Shape{xs[1]}) {
      throw ShapeError("batch_norm: cannot normalize " + to_string(xs) + " with affine " + to_string(shape(gamma)));
    }
    const std::size_t n = xs[0], ch = xs[1], inner = xs.size() == 4 ? xs[2] * xs[3] : 1;
    const std::size_t count = n * inner;
    if (!running && count < 2) throw ShapeError("batch_norm: batch statistics need at least 2 values per channel");
    if (running && (running->mean.shape() != Shape{ch} || running->var.shape() != Shape{ch})) {
      throw ShapeError("batch_norm: running statistics do not match " + std::to_string(ch) + " channels");
    }
    const T* xd = value(x).data().data();
    BatchNormStats<T> stats{Tensor<T>({ch}), Tensor<T>({ch})};
    if (running) {
      stats = *running;
    } else {
      for (std::size_t c = 0; c < ch; ++c) {
        T mean{0};
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < inner; ++j) mean += xd[(i * ch + c) * inner + j];
        mean /= static_cast<T>(count);
        T var{0};
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < inner; ++j) {
            const T d = xd[(i * ch + c) * inner + j] - mean;
            var += d * d;
          }
        stats.mean[c] = mean;
        stats.var[c] = var / static_cast<T>(count);
      }
      if (batch) *batch = stats;
    }
    Tensor<T> xhat(xs);
    Tensor<T> out(xs);
    std::vector<T> inv_std(ch);
    const auto gv = value(gamma).data();
    const auto bv = value(beta).data();
    for (std::size_t c = 0; c < ch; ++c) {
      inv_std[c] = T{1} / std::sqrt(stats.var[c] + static_cast<T>(eps));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < inner; ++j) {
          const std::size_t o = (i * ch + c) * inner + j;
          xhat[o] = (xd[o] - stats.mean[c]) * inv_std[c];
          out[o] = gv[c] * xhat[o] + bv[c];
        }
    }
    const bool use_batch = running == nullptr;
    return push(std::move(out), requires_grad(x) || requires_grad(gamma) || requires_grad(beta),
                {x.index, gamma.index, beta.index},
                [xhat = std::move(xhat), inv_std = std::move(inv_std), n, ch, inner, count, use_batch](
                    Tape& t, std::size_t self) {
                  const auto& g = t.nodes_[self].grad;
                  const std::size_t px = t.nodes_[self].parents[0];
                  const std::size_t pg = t.nodes_[self].parents[1];
                  const std::size_t pb = t.nodes_[self].parents[2];
                  const auto gamma_v = t.nodes_[pg].value.data();
                  for (std::size_t c = 0; c < ch; ++c) {
                    T sum_g{0}, sum_gx{0};
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < inner; ++j) {
                        const std::size_t o = (i * ch + c) * inner + j;
                        sum_g += g[o];
                        sum_gx += g[o] * xhat[o];
                      }
                    if (t.nodes_[pb].requires_grad) t.grad_buffer(pb)[c] += sum_g;
                    if (t.nodes_[pg].requires_grad) t.grad_buffer(pg)[c] += sum_gx;
                    if (!t.nodes_[px].requires_grad) continue;
                    auto& gx = t.grad_buffer(px);
                    const T scale = gamma_v[c] * inv_std[c];
                    const T mean_g = sum_g / static_cast<T>(count);
                    const T mean_gx = sum_gx / static_cast<T>(count);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < inner; ++j) {
                        const std::size_t o = (i * ch + c) * inner + j;
                        gx[o] += use_batch ? scale * (g[o] - mean_g - xhat[o] * mean_gx) : scale * g[o];
                      }
                  }
                });
  }

  // [N x C x H x W] -> [N x C], mean over each plane.
  Var global_avg_pool(Var x) {
    const Shape& s = shape(x);
    if (s.size() != 4 || s[2] * s[3] == 0) throw ShapeError("global_avg_pool: expected N x C x H x W, got " + to_string(s));
    const std::size_t planes = s[0] * s[1], area = s[2] * s[3];
    Tensor<T> out({s[0], s[1]});
    const T* in = value(x).data().data();
    for (std::size_t p = 0; p < planes; ++p) {
      T acc{0};
      for (std::size_t j = 0; j < area; ++j) acc += in[p * area + j];
      out[p] = acc / static_cast<T>(area);
    }
    return push(std::move(out), requires_grad(x), {x.index}, [planes, area](Tape& t, std::size_t self) {
      const std::size_t parent = t.nodes_[self].parents[0];
      if (!t.nodes_[parent].requires_grad) return;
      auto& pg = t.grad_buffer(parent);
      const auto& g = t.nodes_[self].grad;
      for (std::size_t p = 0; p < planes; ++p) {
        const T share = g[p] / static_cast<T>(area);
        for (std::size_t j = 0; j < area; ++j) pg[p * area + j] += share;
      }
    });
  }

  // ---- losses -------------------------------------------------------------

  // Mean over rows of -sum_k t_k log softmax(z)_k. Targets must be
  // probability rows (sum to 1 within 1e-6).
  Var softmax_cross_entropy(Var logits, const Tensor<T>& targets) {
    return weighted_softmax_cross_entropy(logits, targets, {});
  }

  // Mean over rows of w_n * CE_n. An empty weight span means all ones.
  Var weighted_softmax_cross_entropy(Var logits, const Tensor<T>& targets, std::span<const T> row_weights) {
    const Shape& s = shape(logits);
    if (s.size() != 2 || targets.shape() != s) {
      throw ShapeError("softmax_cross_entropy: logits " + to_string(s) + " vs targets " + to_string(targets.shape()));
    }
    const std::size_t rows = s[0], d = s[1];
    if (d < 2) throw ShapeError("softmax_cross_entropy: needs at least 2 classes");
    if (rows == 0) throw ShapeError("softmax_cross_entropy: empty batch");
    if (!row_weights.empty() && row_weights.size() != rows) {
      throw ShapeError("softmax_cross_entropy: weight count does not match batch");
    }
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < d; ++c) total += static_cast<double>(targets.at(r, c));
      if (std::abs(total - 1.0) > 1e-6) {
        throw ValidationError("softmax_cross_entropy: target row " + std::to_string(r) + " sums to " +
                              std::to_string(total));
      }
    }
    const Tensor<T>& z = value(logits);
    Tensor<T> probs({rows, d});
    T loss{0};
    for (std::size_t r = 0; r < rows; ++r) {
      T mx = z.at(r, 0);
      for (std::size_t c = 1; c < d; ++c) mx = std::max(mx, z.at(r, c));
      T denom{0};
      for (std::size_t c = 0; c < d; ++c) denom += std::exp(z.at(r, c) - mx);
      const T log_denom = std::log(denom);
      T row_loss{0};
      for (std::size_t c = 0; c < d; ++c) {
        const T shifted = z.at(r, c) - mx;
        probs.at(r, c) = std::exp(shifted) / denom;
        const T tv = targets.at(r, c);
        if (tv != T{0}) row_loss -= tv * (shifted - log_denom);
      }
      loss += (row_weights.empty() ? T{1} : row_weights[r]) * row_loss;
    }
    loss /= static_cast<T>(rows);
    std::vector<T> weights(row_weights.begin(), row_weights.end());
    return push(Tensor<T>({1}, {loss}), requires_grad(logits), {logits.index},
                [probs = std::move(probs), targets, weights = std::move(weights), rows, d](Tape& t, std::size_t self) {
                  const std::size_t parent = t.nodes_[self].parents[0];
                  if (!t.nodes_[parent].requires_grad) return;
                  auto& pg = t.grad_buffer(parent);
                  const T g = t.nodes_[self].grad[0] / static_cast<T>(rows);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const T gr = weights.empty() ? g : g * weights[r];
                    for (std::size_t c = 0; c < d; ++c) pg[r * d + c] += gr * (probs.at(r, c) - targets.at(r, c));
                  }
                });
  }

  // ---- backward -----------------------------------------------------------

  // Populates gradients of `loss` for every node that requires them and
  // returns the gradients of `wrt` in order. A second call without reset()
  // is rejected.
  std::vector<Tensor<T>> backward(Var loss, std::span<const Var> wrt = {}) {
    if (!owns(loss)) throw TapeError("backward: loss is not on this tape");
    for (const Var& v : wrt)
      if (!owns(v)) throw TapeError("backward: requested tensor is not on this tape");
    if (backward_done_) throw TapeError("backward: already called; reset the tape first");
    if (value(loss).size() != 1) {
      throw TapeError("backward: loss must be scalar, got shape " + to_string(shape(loss)));
    }
    backward_done_ = true;
    if (nodes_[loss.index].requires_grad) {
      grad_buffer(loss.index)[0] = T{1};
      for (std::size_t i = loss.index + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
        n.backward(*this, i);
      }
    }
    std::vector<Tensor<T>> out;
    out.reserve(wrt.size());
    for (const Var& v : wrt) out.push_back(grad(v));
    return out;
  }

  std::vector<Tensor<T>> backward(Var loss, std::initializer_list<Var> wrt) {
    return backward(loss, std::span<const Var>(wrt.begin(), wrt.size()));
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    std::function<void(Tape&, std::size_t)> backward;
  };

  struct ConvGeom {
    std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow, ohw, ckk;
  };

  static std::uint64_t next_serial() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  static ConvGeom conv_geometry(const Shape& xs, const Shape& ws, Conv2dParams p) {
    ConvGeom g{};
    g.n = xs[0];
    g.c = xs[1];
    g.h = xs[2];
    g.w = xs[3];
    g.f = ws[0];
    g.kh = ws[2];
    g.kw = ws[3];
    g.stride = p.stride;
    g.pad = p.pad;
    if (g.stride == 0) throw ConfigError("conv2d: stride must be positive");
    const std::size_t ph = g.h + 2 * g.pad, pw = g.w + 2 * g.pad;
    if (g.kh == 0 || g.kw == 0 || g.kh > ph || g.kw > pw) {
      throw ConfigError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                        " larger than padded input " + std::to_string(ph) + "x" + std::to_string(pw));
    }
    if ((ph - g.kh) % g.stride != 0 || (pw - g.kw) % g.stride != 0) {
      throw ConfigError("conv2d: output extent is not exact for stride " + std::to_string(g.stride));
    }
    g.oh = (ph - g.kh) / g.stride + 1;
    g.ow = (pw - g.kw) / g.stride + 1;
    g.ohw = g.oh * g.ow;
    g.ckk = g.c * g.kh * g.kw;
    return g;
  }

  // Output columns [lo, hi) of kernel tap kx read inside the image.
  static std::pair<std::size_t, std::size_t> valid_columns(const ConvGeom& g, std::size_t kx) {
    std::size_t lo = 0, hi = 0;
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      const std::size_t ix = ox * g.stride + kx;
      if (ix < g.pad) lo = ox + 1;
      else if (ix - g.pad < g.w) hi = ox + 1;
    }
    return {lo, std::max(lo, hi)};
  }

  static void im2col(const ConvGeom& g, const T* img, T* cols) {
    for (std::size_t c = 0; c < g.c; ++c)
      for (std::size_t ky = 0; ky < g.kh; ++ky)
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          T* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.ohw;
          const auto [lo, hi] = valid_columns(g, kx);
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            T* dst = row + oy * g.ow;
            const std::size_t iy = oy * g.stride + ky;
            if (iy < g.pad || iy - g.pad >= g.h) {
              std::fill(dst, dst + g.ow, T{0});
              continue;
            }
            const T* src = img + (c * g.h + (iy - g.pad)) * g.w;
            std::fill(dst, dst + lo, T{0});
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + kx - g.pad];
            std::fill(dst + hi, dst + g.ow, T{0});
          }
        }
  }

  static void col2im_add(const ConvGeom& g, const T* cols, T* img) {
    for (std::size_t c = 0; c < g.c; ++c)
      for (std::size_t ky = 0; ky < g.kh; ++ky)
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.ohw;
          const auto [lo, hi] = valid_columns(g, kx);
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::size_t iy = oy * g.stride + ky;
            if (iy < g.pad || iy - g.pad >= g.h) continue;
            T* dst = img + (c * g.h + (iy - g.pad)) * g.w;
            const T* src = row + oy * g.ow;
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + kx - g.pad] += src[ox];
          }
        }
  }

  const Node& node(const Var& v) const {
    if (!owns(v)) throw TapeError("variable does not belong to this tape");
    return nodes_[v.index];
  }

  std::vector<T>& grad_buffer(std::size_t i) {
    Node& n = nodes_[i];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }

  void check_same_shape(const Var& a, const Var& b, const char* op) const {
    if (shape(a) != shape(b)) {
      throw ShapeError(std::string(op) + ": shape mismatch " + to_string(shape(a)) + " vs " + to_string(shape(b)));
    }
  }

  Var push(Tensor<T> value, bool requires_grad, std::vector<std::size_t> parents,
           std::function<void(Tape&, std::size_t)> backward) {
    if (backward_done_) throw TapeError("cannot record onto a tape after backward; reset it first");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(parents),
                          requires_grad ? std::move(backward) : nullptr});
    return Var{serial_, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<T> scratch_;
  std::uint64_t serial_;
  bool backward_done_ = false;
};

}  // namespace lakit
