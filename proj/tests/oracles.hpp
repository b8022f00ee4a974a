#pragma once

// Independently coded reference implementations used to cross-check the
// library. Deliberately naive: no shared helpers with the code under test.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lakit/metrics.hpp"

namespace oracle {

// Equal-count binning by explicit rank lists; equal-width binning by scanning
// bin edges. Accumulates in long double.
inline std::pair<double, double> calibration(const std::vector<lakit::PredictionRecord>& recs, std::size_t bins,
                                             bool equal_count) {
  const std::size_t n = recs.size();
  std::vector<std::vector<std::size_t>> members(bins);
  if (equal_count) {
    std::vector<std::pair<double, std::size_t>> keyed;
    for (std::size_t i = 0; i < n; ++i) keyed.emplace_back(recs[i].confidence, i);
    std::sort(keyed.begin(), keyed.end());  // (confidence, index) lexicographic
    std::vector<std::size_t> sizes(bins, n / bins);
    for (std::size_t m = 0; m < n % bins; ++m) sizes[m] += 1;
    std::size_t cursor = 0;
    for (std::size_t m = 0; m < bins; ++m)
      for (std::size_t j = 0; j < sizes[m]; ++j) members[m].push_back(keyed[cursor++].second);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const double c = recs[i].confidence;
      std::size_t chosen = 0;
      for (std::size_t m = 0; m < bins; ++m) {
        const double lo = static_cast<double>(m) / static_cast<double>(bins);
        const double hi = static_cast<double>(m + 1) / static_cast<double>(bins);
        if (c > lo && c <= hi) chosen = m;
      }
      members[chosen].push_back(i);
    }
  }
  long double ece = 0, sq = 0;
  for (const auto& b : members) {
    if (b.empty()) continue;
    long double acc = 0, conf = 0;
    for (std::size_t i : b) {
      acc += recs[i].predicted == recs[i].truth ? 1 : 0;
      conf += recs[i].confidence;
    }
    acc /= b.size();
    conf /= b.size();
    const long double w = static_cast<long double>(b.size()) / n;
    ece += w * std::fabs(acc - conf);
    sq += w * (acc - conf) * (acc - conf);
  }
  return {static_cast<double>(ece), static_cast<double>(std::sqrt(sq))};
}

inline std::pair<std::map<std::string, double>, double> corruption_means(
    const std::map<std::string, std::vector<double>>& table) {
  std::map<std::string, double> ce;
  long double total = 0;
  for (const auto& [k, v] : table) {
    long double s = 0;
    for (double e : v) s += e;
    ce[k] = static_cast<double>(s / 5);
    total += s / 5;
  }
  return {ce, static_cast<double>(total / table.size())};
}

inline double percent_change(double base, double x) { return (x - base) / base * 100.0; }

}  // namespace oracle
