#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lakit/errors.hpp"
#include "lakit/metrics.hpp"

namespace lakit {

inline constexpr int kReportSchemaVersion = 1;

struct CorruptionEntry {
  std::array<double, 5> severity_errors{};  // E_{c,1..5}, percent
  double ce = 0.0;
};

struct AttackEntry {
  std::string family;
  double epsilon = 0.0;
  std::size_t steps = 1;
  double step_size = 0.0;
  bool random_start = false;
  std::string logit_mode;
  double error = 0.0;  // percent misclassified after the attack

  // "fgsm@0.03"
  std::string key() const {
    std::ostringstream os;
    os << family << '@' << epsilon;
    return os.str();
  }
};

// All rates are percentages; ece / rms are fractions.
struct EvalReport {
  int schema_version = kReportSchemaVersion;
  std::string run_id;
  std::string run_name;
  std::string regime;
  std::size_t test_samples = 0;
  std::size_t num_classes = 0;
  double clean_error = 0.0;
  std::map<std::string, CorruptionEntry> corruptions;
  double mce = 0.0;
  int severity_table_version = 0;
  double ece = 0.0;
  double rms = 0.0;
  std::size_t calibration_bins = 15;
  std::string binning = "equal_count";
  std::size_t attack_samples = 0;  // test images fed to each attack
  std::vector<AttackEntry> attacks;

  const AttackEntry* find_attack(const std::string& family, double epsilon) const {
    for (const auto& a : attacks)
      if (a.family == family && a.epsilon == epsilon) return &a;
    return nullptr;
  }
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["schema_version"] = r.schema_version;
  j["run_id"] = r.run_id;
  j["run_name"] = r.run_name;
  j["regime"] = r.regime;
  j["test_samples"] = r.test_samples;
  j["num_classes"] = r.num_classes;
  j["clean_error"] = r.clean_error;
  j["mce"] = r.mce;
  j["severity_table_version"] = r.severity_table_version;
  j["corruptions"] = nlohmann::json::object();
  for (const auto& [name, e] : r.corruptions) {
    j["corruptions"][name] = {{"severity_errors", e.severity_errors}, {"ce", e.ce}};
  }
  j["calibration"] = {{"ece", r.ece}, {"rms", r.rms}, {"bins", r.calibration_bins}, {"binning", r.binning}};
  j["attack_samples"] = r.attack_samples;
  j["attacks"] = nlohmann::json::array();
  for (const auto& a : r.attacks) {
    j["attacks"].push_back({{"family", a.family},
                            {"epsilon", a.epsilon},
                            {"steps", a.steps},
                            {"step_size", a.step_size},
                            {"random_start", a.random_start},
                            {"logit_mode", a.logit_mode},
                            {"error", a.error}});
  }
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion) {
      throw DataError("report: unsupported schema version " + std::to_string(r.schema_version));
    }
    r.run_id = j.at("run_id").get<std::string>();
    r.run_name = j.at("run_name").get<std::string>();
    r.regime = j.at("regime").get<std::string>();
    r.test_samples = j.at("test_samples").get<std::size_t>();
    r.num_classes = j.at("num_classes").get<std::size_t>();
    r.clean_error = j.at("clean_error").get<double>();
    r.mce = j.at("mce").get<double>();
    r.severity_table_version = j.at("severity_table_version").get<int>();
    for (const auto& [name, e] : j.at("corruptions").items()) {
      r.corruptions[name] = {e.at("severity_errors").get<std::array<double, 5>>(), e.at("ce").get<double>()};
    }
    const auto& cal = j.at("calibration");
    r.ece = cal.at("ece").get<double>();
    r.rms = cal.at("rms").get<double>();
    r.calibration_bins = cal.at("bins").get<std::size_t>();
    r.binning = cal.at("binning").get<std::string>();
    r.attack_samples = j.at("attack_samples").get<std::size_t>();
    for (const auto& a : j.at("attacks")) {
      r.attacks.push_back({a.at("family").get<std::string>(), a.at("epsilon").get<double>(),
                           a.at("steps").get<std::size_t>(), a.at("step_size").get<double>(),
                           a.at("random_start").get<bool>(), a.at("logit_mode").get<std::string>(),
                           a.at("error").get<double>()});
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report: malformed JSON: ") + e.what());
  }
}

// Keys sorted (nlohmann objects are ordered maps), two-space indent, doubles
// in shortest round-trip form, trailing newline.
inline std::string canonical_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline std::string report_json(const EvalReport& r) { return canonical_json(to_json(r)); }

// Shortest decimal that round-trips, matching the JSON number format.
inline std::string format_number(double v) {
  return nlohmann::json(v).dump();
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// Header line and one data line, LF terminated. Columns: identity fields,
// clean / mce / ece / rms, ce_<corruption> sorted by name, then
// <family>@<eps> in report order.
inline std::string report_csv(const EvalReport& r) {
  std::vector<std::string> head{"schema_version", "run_id",  "run_name", "regime", "test_samples",
                                "clean_error",    "mce",     "ece",      "rms",    "calibration_bins",
                                "binning"};
  std::vector<std::string> row{std::to_string(r.schema_version),
                               csv_escape(r.run_id),
                               csv_escape(r.run_name),
                               csv_escape(r.regime),
                               std::to_string(r.test_samples),
                               format_number(r.clean_error),
                               format_number(r.mce),
                               format_number(r.ece),
                               format_number(r.rms),
                               std::to_string(r.calibration_bins),
                               r.binning};
  for (const auto& [name, e] : r.corruptions) {
    head.push_back("ce_" + name);
    row.push_back(format_number(e.ce));
  }
  for (const auto& a : r.attacks) {
    head.push_back(a.key());
    row.push_back(format_number(a.error));
  }
  std::string out;
  for (std::size_t i = 0; i < head.size(); ++i) out += (i ? "," : "") + head[i];
  out += "\n";
  for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + row[i];
  return out + "\n";
}

// ---- run comparison ----------------------------------------------------------

struct ComparisonRow {
  std::string metric;
  std::vector<double> values;          // one per run
  std::vector<double> percent_change;  // vs the first run; first entry is 0
};

// Rows Clean, mCE, ECE, RMS, then FGSM@eps / PGD@eps for every attack of the
// first report. All reports must share test size, corruption set,
// calibration setup and attack list.
inline std::vector<ComparisonRow> compare_reports(const std::vector<EvalReport>& reports) {
  if (reports.size() < 2) throw ValidationError("compare: need at least two runs");
  const auto& base = reports.front();
  for (const auto& r : reports) {
    const auto where = "run '" + r.run_name + "' (" + r.run_id + ")";
    if (r.test_samples != base.test_samples) throw ValidationError("compare: " + where + " has a different test size");
    if (r.calibration_bins != base.calibration_bins || r.binning != base.binning) {
      throw ValidationError("compare: " + where + " uses different calibration binning");
    }
    if (r.corruptions.size() != base.corruptions.size()) {
      throw ValidationError("compare: " + where + " has a different corruption set");
    }
    for (const auto& [name, e] : base.corruptions)
      if (!r.corruptions.count(name)) throw ValidationError("compare: " + where + " lacks corruption " + name);
    if (r.attack_samples != base.attack_samples) {
      throw ValidationError("compare: " + where + " attacks a different number of test images");
    }
    if (r.attacks.size() != base.attacks.size()) throw ValidationError("compare: " + where + " has a different attack list");
    for (std::size_t i = 0; i < base.attacks.size(); ++i) {
      const auto& a = base.attacks[i];
      const auto& b = r.attacks[i];
      if (a.family != b.family || a.epsilon != b.epsilon || a.steps != b.steps || a.step_size != b.step_size ||
          a.random_start != b.random_start || a.logit_mode != b.logit_mode) {
        throw ValidationError("compare: " + where + " attack " + b.key() + " differs from " + a.key());
      }
    }
  }
  std::vector<ComparisonRow> rows;
  auto add = [&](const std::string& metric, auto get) {
    ComparisonRow row{metric, {}, {}};
    for (const auto& r : reports) row.values.push_back(get(r));
    for (double v : row.values) row.percent_change.push_back(percent_change(row.values.front(), v));
    rows.push_back(std::move(row));
  };
  add("Clean", [](const EvalReport& r) { return r.clean_error; });
  if (!base.corruptions.empty()) add("mCE", [](const EvalReport& r) { return r.mce; });
  add("ECE", [](const EvalReport& r) { return r.ece; });
  add("RMS", [](const EvalReport& r) { return r.rms; });
  for (std::size_t i = 0; i < base.attacks.size(); ++i) {
    std::string family = base.attacks[i].family;
    for (auto& ch : family) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    std::ostringstream name;
    name << family << '@' << base.attacks[i].epsilon;
    add(name.str(), [i](const EvalReport& r) { return r.attacks[i].error; });
  }
  return rows;
}

// metric,<run>...,pct_<run>... ; the first run is the baseline.
inline std::string comparison_csv(const std::vector<EvalReport>& reports, const std::vector<ComparisonRow>& rows) {
  std::string out = "metric";
  for (const auto& r : reports) out += "," + csv_escape(r.run_name + ":" + r.run_id);
  for (std::size_t i = 1; i < reports.size(); ++i) out += "," + csv_escape("pct_change:" + reports[i].run_name + ":" + reports[i].run_id);
  out += "\n";
  for (const auto& row : rows) {
    out += row.metric;
    for (double v : row.values) out += "," + format_number(v);
    for (std::size_t i = 1; i < row.percent_change.size(); ++i) out += "," + format_number(row.percent_change[i]);
    out += "\n";
  }
  return out;
}

}  // namespace lakit
