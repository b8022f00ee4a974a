#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lakit/errors.hpp"

namespace lakit {

// One classified example: winning softmax score, predicted and true class.
struct PredictionRecord {
  double confidence = 1.0;
  std::size_t predicted = 0;
  std::size_t truth = 0;
};

// Classification error in percent.
inline double error_rate(std::span<const std::size_t> preds, std::span<const std::size_t> truths) {
  if (preds.size() != truths.size()) throw ValidationError("error_rate: length mismatch");
  if (preds.empty()) throw ValidationError("error_rate: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == truths[i];
  return 100.0 * (1.0 - static_cast<double>(correct) / static_cast<double>(preds.size()));
}

inline double error_rate(std::span<const PredictionRecord> records) {
  if (records.empty()) throw ValidationError("error_rate: empty input");
  std::size_t correct = 0;
  for (const auto& r : records) correct += r.predicted == r.truth;
  return 100.0 * (1.0 - static_cast<double>(correct) / static_cast<double>(records.size()));
}

struct CorruptionSummary {
  std::map<std::string, double> ce;  // CE_c = mean of E_{c,1..5}
  double mce = 0.0;                  // mean of CE_c over corruptions
};

// Per-corruption severity errors E_{c,s} (exactly five each) -> CE_c and mCE.
inline CorruptionSummary corruption_errors(const std::map<std::string, std::vector<double>>& per_severity) {
  if (per_severity.empty()) throw ValidationError("corruption_errors: no corruptions");
  CorruptionSummary out;
  double total = 0.0;
  for (const auto& [name, errs] : per_severity) {
    if (errs.size() != 5) {
      throw ValidationError("corruption_errors: '" + name + "' has " + std::to_string(errs.size()) +
                            " severities, expected 5");
    }
    double s = 0.0;
    for (double e : errs) s += e;
    const double ce = s / 5.0;
    out.ce[name] = ce;
    total += ce;
  }
  out.mce = total / static_cast<double>(per_severity.size());
  return out;
}

enum class BinningMode { equal_count, equal_width };

inline const char* binning_name(BinningMode m) { return m == BinningMode::equal_count ? "equal_count" : "equal_width"; }

struct CalibrationResult {
  double ece = 0.0;  // fractions, not percent
  double rms = 0.0;
};

// ECE = sum_m |B_m|/n |acc(B_m) - conf(B_m)|, RMS = sqrt(sum_m |B_m|/n (acc - conf)^2).
//
// equal_count: records sorted by (confidence, original index) and split into
// M contiguous groups, the first n mod M of size floor(n/M) + 1, the rest
// floor(n/M). equal_width: bin m covers (m/M, (m+1)/M]; confidence 0 goes to
// the first bin; empty bins contribute nothing.
inline CalibrationResult calibration_errors(std::span<const PredictionRecord> records, std::size_t bins,
                                            BinningMode mode = BinningMode::equal_count) {
  if (bins == 0) throw ValidationError("calibration_errors: need at least one bin");
  if (records.empty()) throw ValidationError("calibration_errors: no records");
  const std::size_t n = records.size();
  std::vector<std::size_t> bin_of(n);
  if (mode == BinningMode::equal_count) {
    if (bins > n) {
      throw ValidationError("calibration_errors: " + std::to_string(bins) + " bins for " + std::to_string(n) +
                            " records");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return records[a].confidence < records[b].confidence;
    });
    const std::size_t base = n / bins, extra = n % bins;
    std::size_t pos = 0;
    for (std::size_t m = 0; m < bins; ++m) {
      const std::size_t count = base + (m < extra ? 1 : 0);
      for (std::size_t j = 0; j < count; ++j) bin_of[order[pos++]] = m;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const double c = records[i].confidence;
      const double scaled = std::ceil(c * static_cast<double>(bins)) - 1.0;
      bin_of[i] = static_cast<std::size_t>(std::clamp(scaled, 0.0, static_cast<double>(bins - 1)));
    }
  }
  std::vector<double> conf_sum(bins, 0.0), correct(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t m = bin_of[i];
    conf_sum[m] += records[i].confidence;
    correct[m] += records[i].predicted == records[i].truth ? 1.0 : 0.0;
    ++count[m];
  }
  CalibrationResult out;
  double sq = 0.0;
  for (std::size_t m = 0; m < bins; ++m) {
    if (count[m] == 0) continue;
    const double sz = static_cast<double>(count[m]);
    const double gap = correct[m] / sz - conf_sum[m] / sz;
    const double w = sz / static_cast<double>(n);
    out.ece += w * std::abs(gap);
    sq += w * gap * gap;
  }
  out.rms = std::sqrt(sq);
  return out;
}

// Percent change against a baseline; negative means the metric went down
// (an improvement for error-type metrics).
inline double percent_change(double baseline, double value) { return 100.0 * (value - baseline) / baseline; }

}  // namespace lakit
