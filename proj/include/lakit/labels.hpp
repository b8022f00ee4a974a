#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lakit/errors.hpp"
#include "lakit/random.hpp"

// Training targets for the four regimes: standard one-hot, label
// augmentation (class one-hot scaled by 1 - delta concatenated with the
// operation one-hot scaled by delta), label smoothing and multi-task.
namespace lakit {

struct DeltaRange {
  double lo = 0.05;
  double hi = 0.1;
};

// Length K + M probability vector. Identity samples carry delta = 0.
struct AugmentedLabel {
  std::vector<double> values;
  std::size_t class_index = 0;
  std::optional<std::size_t> op_index;
  double delta = 0.0;
};

struct SmoothedLabel {
  std::vector<double> values;
  double delta = 0.0;
};

// Class and operation one-hots with task weights (1 - delta, delta). The
// operation one-hot has M + 1 slots; slot M is the "no-op" class used for
// identity samples.
struct MtlTarget {
  std::vector<double> class_onehot;
  std::vector<double> op_onehot;
  double class_weight = 1.0;
  double op_weight = 0.0;
};

inline std::vector<double> make_onehot(std::size_t width, std::size_t index) {
  if (index >= width) {
    throw ValidationError("one-hot index " + std::to_string(index) + " out of range " + std::to_string(width));
  }
  std::vector<double> v(width, 0.0);
  v[index] = 1.0;
  return v;
}

// `range` bounds the admissible delta for transformed samples.
inline AugmentedLabel make_la_label(std::size_t k, std::size_t m, std::size_t class_index,
                                    std::optional<std::size_t> op_index, double delta,
                                    DeltaRange range = {}) {
  if (class_index >= k) {
    throw ValidationError("make_la_label: class index " + std::to_string(class_index) + " >= K = " +
                          std::to_string(k));
  }
  AugmentedLabel out;
  out.values.assign(k + m, 0.0);
  out.class_index = class_index;
  if (!op_index) {
    if (delta != 0.0) throw ValidationError("make_la_label: identity samples require delta = 0");
    out.values[class_index] = 1.0;
    return out;
  }
  if (*op_index >= m) {
    throw ValidationError("make_la_label: op index " + std::to_string(*op_index) + " >= M = " + std::to_string(m));
  }
  if (!(delta >= range.lo && delta <= range.hi)) {
    throw ValidationError("make_la_label: delta " + std::to_string(delta) + " outside [" + std::to_string(range.lo) +
                          ", " + std::to_string(range.hi) + "]");
  }
  out.op_index = op_index;
  out.delta = delta;
  out.values[class_index] = 1.0 - delta;
  out.values[k + *op_index] = delta;
  return out;
}

// Recovers (class, op, delta) from a label vector laid out as above.
struct DecodedLabel {
  std::size_t class_index = 0;
  std::optional<std::size_t> op_index;
  double delta = 0.0;
};

inline DecodedLabel decode_la_label(const std::vector<double>& values, std::size_t k) {
  if (k == 0 || values.size() < k) throw ValidationError("decode_la_label: K exceeds label width");
  DecodedLabel d;
  for (std::size_t i = 1; i < k; ++i)
    if (values[i] > values[d.class_index]) d.class_index = i;
  if (values.size() == k) return d;
  std::size_t best = k;
  for (std::size_t i = k + 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  if (values[best] > 0.0) {
    d.op_index = best - k;
    d.delta = values[best];
  }
  return d;
}

// delta ~ U(range.lo, range.hi).
inline double sample_delta(Rng& rng, DeltaRange range = {}) { return rng.uniform(range.lo, range.hi); }

inline SmoothedLabel make_ls_label(std::size_t k, std::size_t class_index, double delta) {
  if (class_index >= k) {
    throw ValidationError("make_ls_label: class index " + std::to_string(class_index) + " >= K = " +
                          std::to_string(k));
  }
  if (!(delta >= 0.0 && delta <= 1.0)) throw ValidationError("make_ls_label: delta outside [0, 1]");
  SmoothedLabel out{std::vector<double>(k, delta / static_cast<double>(k)), delta};
  out.values[class_index] = 1.0 - delta + delta / static_cast<double>(k);
  return out;
}

inline MtlTarget make_mtl_target(std::size_t k, std::size_t m, std::size_t class_index,
                                 std::optional<std::size_t> op_index, double delta) {
  if (op_index && *op_index >= m) {
    throw ValidationError("make_mtl_target: op index " + std::to_string(*op_index) + " >= M = " + std::to_string(m));
  }
  if (!(delta >= 0.0 && delta <= 1.0)) throw ValidationError("make_mtl_target: delta outside [0, 1]");
  MtlTarget t;
  t.class_onehot = make_onehot(k, class_index);
  t.op_onehot = make_onehot(m + 1, op_index ? *op_index : m);
  t.class_weight = 1.0 - delta;
  t.op_weight = delta;
  return t;
}

}  // namespace lakit
