#pragma once

#include <charconv>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lakit/checkpoint.hpp"
#include "lakit/data.hpp"
#include "lakit/evaluate.hpp"
#include "lakit/model.hpp"
#include "lakit/report.hpp"
#include "lakit/trainer.hpp"

#ifndef LAKIT_VERSION
#define LAKIT_VERSION "0.0.0"
#endif

namespace lakit {

inline constexpr const char* kToolkitVersion = LAKIT_VERSION;
inline constexpr int kManifestSchemaVersion = 1;

enum class DataSource { synthetic, cifar10, cifar100 };

inline const char* data_source_name(DataSource s) {
  switch (s) {
    case DataSource::synthetic: return "synthetic";
    case DataSource::cifar10: return "cifar10";
    case DataSource::cifar100: return "cifar100";
  }
  return "?";
}

inline DataSource parse_data_source(std::string_view s) {
  for (DataSource d : {DataSource::synthetic, DataSource::cifar10, DataSource::cifar100})
    if (s == data_source_name(d)) return d;
  throw ConfigError("unknown dataset source '" + std::string(s) + "'");
}

struct DatasetSection {
  DataSource source = DataSource::synthetic;
  std::string path;                // directory holding the CIFAR .bin files
  std::size_t train_samples = 5000;  // 0 = everything
  std::size_t test_samples = 2000;
  std::size_t classes = 4;  // synthetic only
  std::uint64_t data_seed = 0;
};

// Settings shared by every pgd entry of the evaluation attack list.
struct PgdEvalSettings {
  std::size_t steps = 40;
  double step_size = 0.0;  // <= 0: epsilon / 4
  bool random_start = true;
};

// Everything that determines an experiment's results. output_dir only says
// where results go and is left out of the run id.
struct ExperimentConfig {
  std::string run_name = "run";
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  DatasetSection dataset;
  ModelConfig model;
  TrainConfig train;
  std::size_t checkpoint_every = 0;  // epochs; 0 = final checkpoint only
  EvalConfig eval;  // attack entries take their pgd / logit settings from below
  PgdEvalSettings eval_pgd;
  LogitMode eval_logit_mode = LogitMode::masked_k;
  std::string severity_table_path;  // empty = builtin table

  // Propagates the top-level seed and the shared attack settings into the
  // sections that consume them.
  void resolve() {
    train.seed = seed;
    model.init_seed = seed;
    eval.seed = seed;
    for (auto& a : eval.attacks) {
      a.logit_mode = eval_logit_mode;
      if (a.family == AttackFamily::pgd) {
        a.steps = eval_pgd.steps;
        a.step_size = eval_pgd.step_size;
        a.random_start = eval_pgd.random_start;
      } else {
        a.steps = 1;
        a.step_size = 0.0;
        a.random_start = false;
      }
    }
  }

  void validate() const {
    if (run_name.empty()) throw ConfigError("config: run_name must not be empty");
    if (run_name.find_first_of("/\\") != std::string::npos) throw ConfigError("config: run_name must not contain '/'");
    if (dataset.source != DataSource::synthetic && dataset.path.empty()) {
      throw ConfigError("config: [dataset] path is required for " + std::string(data_source_name(dataset.source)));
    }
    if (dataset.source == DataSource::synthetic && (dataset.train_samples == 0 || dataset.test_samples == 0)) {
      throw ConfigError("config: synthetic data needs explicit train_samples and test_samples");
    }
    if (model.hidden.empty() && model.arch == Arch::small_cnn) {
      throw ConfigError("config: small_cnn needs at least one stage in [model] hidden");
    }
    train.validate();
    eval.validate();
  }
};

// ---- config text ----------------------------------------------------------

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> words(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : v) {
    if (c == ' ' || c == '\t' || c == ',') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) throw ConfigError("expected a non-negative integer");
  return out;
}

inline std::size_t to_size(const std::string& v) { return static_cast<std::size_t>(to_u64(v)); }

inline double to_double(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
    throw ConfigError("expected a number");
  }
  return out;
}

inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  throw ConfigError("expected true or false");
}

// "fgsm@0.03" / "pgd@0.3"
inline std::pair<AttackFamily, double> to_attack_key(const std::string& w) {
  const auto at = w.find('@');
  if (at == std::string::npos) throw ConfigError("attack '" + w + "' must look like family@epsilon");
  return {parse_attack_family(w.substr(0, at)), to_double(w.substr(at + 1))};
}

inline nlohmann::json word_list(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& w : v) s += (s.empty() ? "" : " ") + w;
  return s;
}

// Scalar JSON value back to config text.
inline std::string json_text(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.dump();
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<nlohmann::json(const ExperimentConfig&)> get;
};

inline const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  using J = nlohmann::json;
  static const std::vector<Field> table = {
      {"", "run_name", [](C& c, const std::string& v) { c.run_name = v; }, [](const C& c) { return J(c.run_name); }},
      {"", "seed", [](C& c, const std::string& v) { c.seed = to_u64(v); }, [](const C& c) { return J(c.seed); }},
      {"", "output_dir", [](C& c, const std::string& v) { c.output_dir = v; },
       [](const C& c) { return J(c.output_dir); }},

      {"dataset", "source", [](C& c, const std::string& v) { c.dataset.source = parse_data_source(v); },
       [](const C& c) { return J(data_source_name(c.dataset.source)); }},
      {"dataset", "path", [](C& c, const std::string& v) { c.dataset.path = v; },
       [](const C& c) { return J(c.dataset.path); }},
      {"dataset", "train_samples", [](C& c, const std::string& v) { c.dataset.train_samples = to_size(v); },
       [](const C& c) { return J(c.dataset.train_samples); }},
      {"dataset", "test_samples", [](C& c, const std::string& v) { c.dataset.test_samples = to_size(v); },
       [](const C& c) { return J(c.dataset.test_samples); }},
      {"dataset", "classes", [](C& c, const std::string& v) { c.dataset.classes = to_size(v); },
       [](const C& c) { return J(c.dataset.classes); }},
      {"dataset", "data_seed", [](C& c, const std::string& v) { c.dataset.data_seed = to_u64(v); },
       [](const C& c) { return J(c.dataset.data_seed); }},

      {"model", "arch",
       [](C& c, const std::string& v) {
         if (v == "mlp") c.model.arch = Arch::mlp;
         else if (v == "small_cnn") c.model.arch = Arch::small_cnn;
         else throw ConfigError("unknown arch '" + v + "'");
       },
       [](const C& c) { return J(arch_name(c.model.arch)); }},
      {"model", "hidden",
       [](C& c, const std::string& v) {
         c.model.hidden.clear();
         for (const auto& w : words(v)) {
           const auto n = to_size(w);
           if (n == 0) throw ConfigError("hidden widths must be positive");
           c.model.hidden.push_back(n);
         }
       },
       [](const C& c) {
         std::vector<std::string> w;
         for (auto h : c.model.hidden) w.push_back(std::to_string(h));
         return word_list(w);
       }},
      {"model", "batch_norm", [](C& c, const std::string& v) { c.model.batch_norm = to_bool(v); },
       [](const C& c) { return J(c.model.batch_norm); }},

      {"train", "regime", [](C& c, const std::string& v) { c.train.regime = parse_regime(v); },
       [](const C& c) { return J(regime_name(c.train.regime)); }},
      {"train", "epochs", [](C& c, const std::string& v) { c.train.epochs = to_size(v); },
       [](const C& c) { return J(c.train.epochs); }},
      {"train", "lr0", [](C& c, const std::string& v) { c.train.lr0 = to_double(v); },
       [](const C& c) { return J(c.train.lr0); }},
      {"train", "eta_min_factor", [](C& c, const std::string& v) { c.train.eta_min_factor = to_double(v); },
       [](const C& c) { return J(c.train.eta_min_factor); }},
      {"train", "momentum", [](C& c, const std::string& v) { c.train.momentum = to_double(v); },
       [](const C& c) { return J(c.train.momentum); }},
      {"train", "batch_size", [](C& c, const std::string& v) { c.train.batch_size = to_size(v); },
       [](const C& c) { return J(c.train.batch_size); }},
      {"train", "delta_min", [](C& c, const std::string& v) { c.train.delta.lo = to_double(v); },
       [](const C& c) { return J(c.train.delta.lo); }},
      {"train", "delta_max", [](C& c, const std::string& v) { c.train.delta.hi = to_double(v); },
       [](const C& c) { return J(c.train.delta.hi); }},
      {"train", "delta_mode", [](C& c, const std::string& v) { c.train.delta_mode = parse_delta_mode(v); },
       [](const C& c) { return J(delta_mode_name(c.train.delta_mode)); }},
      {"train", "ops",
       [](C& c, const std::string& v) {
         c.train.ops.clear();
         if (v == "none") return;
         for (const auto& w : words(v)) c.train.ops.push_back(parse_aug_op(w));
       },
       [](const C& c) {
         std::vector<std::string> w;
         for (auto op : c.train.ops) w.push_back(aug_op_name(op));
         return w.empty() ? J("none") : word_list(w);
       }},
      {"train", "identity_probability",
       [](C& c, const std::string& v) { c.train.identity_probability = to_double(v); },
       [](const C& c) { return J(c.train.identity_probability); }},
      {"train", "preprocess", [](C& c, const std::string& v) { c.train.preprocess = to_bool(v); },
       [](const C& c) { return J(c.train.preprocess); }},
      {"train", "pad", [](C& c, const std::string& v) { c.train.flip_crop.pad = to_size(v); },
       [](const C& c) { return J(c.train.flip_crop.pad); }},
      {"train", "flip_probability",
       [](C& c, const std::string& v) { c.train.flip_crop.flip_probability = to_double(v); },
       [](const C& c) { return J(c.train.flip_crop.flip_probability); }},
      {"train", "gamma_min", [](C& c, const std::string& v) { c.train.op_ranges.gamma_lo = to_double(v); },
       [](const C& c) { return J(c.train.op_ranges.gamma_lo); }},
      {"train", "gamma_max", [](C& c, const std::string& v) { c.train.op_ranges.gamma_hi = to_double(v); },
       [](const C& c) { return J(c.train.op_ranges.gamma_hi); }},
      {"train", "kelvin_min", [](C& c, const std::string& v) { c.train.op_ranges.kelvin_lo = to_double(v); },
       [](const C& c) { return J(c.train.op_ranges.kelvin_lo); }},
      {"train", "kelvin_max", [](C& c, const std::string& v) { c.train.op_ranges.kelvin_hi = to_double(v); },
       [](const C& c) { return J(c.train.op_ranges.kelvin_hi); }},
      {"train", "roughness_min", [](C& c, const std::string& v) { c.train.op_ranges.roughness_lo = to_double(v); },
       [](const C& c) { return J(c.train.op_ranges.roughness_lo); }},
      {"train", "roughness_max", [](C& c, const std::string& v) { c.train.op_ranges.roughness_hi = to_double(v); },
       [](const C& c) { return J(c.train.op_ranges.roughness_hi); }},
      {"train", "alpha_min", [](C& c, const std::string& v) { c.train.op_ranges.alpha_lo = to_double(v); },
       [](const C& c) { return J(c.train.op_ranges.alpha_lo); }},
      {"train", "alpha_max", [](C& c, const std::string& v) { c.train.op_ranges.alpha_hi = to_double(v); },
       [](const C& c) { return J(c.train.op_ranges.alpha_hi); }},
      {"train", "attack_epsilon", [](C& c, const std::string& v) { c.train.attack.epsilon = to_double(v); },
       [](const C& c) { return J(c.train.attack.epsilon); }},
      {"train", "attack_steps", [](C& c, const std::string& v) { c.train.attack.steps = to_size(v); },
       [](const C& c) { return J(c.train.attack.steps); }},
      {"train", "attack_step_size", [](C& c, const std::string& v) { c.train.attack.step_size = to_double(v); },
       [](const C& c) { return J(c.train.attack.step_size); }},
      {"train", "attack_random_start",
       [](C& c, const std::string& v) { c.train.attack.random_start = to_bool(v); },
       [](const C& c) { return J(c.train.attack.random_start); }},
      {"train", "attack_logit_mode",
       [](C& c, const std::string& v) { c.train.attack.logit_mode = parse_logit_mode(v); },
       [](const C& c) { return J(logit_mode_name(c.train.attack.logit_mode)); }},
      {"train", "checkpoint_every", [](C& c, const std::string& v) { c.checkpoint_every = to_size(v); },
       [](const C& c) { return J(c.checkpoint_every); }},

      {"eval", "corruptions",
       [](C& c, const std::string& v) {
         c.eval.corruptions.clear();
         if (v == "none") return;
         if (v == "all") {
           c.eval.corruptions.assign(kAllCorruptions.begin(), kAllCorruptions.end());
           return;
         }
         for (const auto& w : words(v)) c.eval.corruptions.push_back(parse_corruption(w));
       },
       [](const C& c) {
         std::vector<std::string> w;
         for (auto x : c.eval.corruptions) w.push_back(corruption_name(x));
         return w.empty() ? J("none") : word_list(w);
       }},
      {"eval", "severity_table", [](C& c, const std::string& v) { c.severity_table_path = v; },
       [](const C& c) { return J(c.severity_table_path); }},
      {"eval", "attacks",
       [](C& c, const std::string& v) {
         c.eval.attacks.clear();
         if (v == "none") return;
         for (const auto& w : words(v)) {
           const auto [family, eps] = to_attack_key(w);
           c.eval.attacks.push_back({family, eps, 1, 0.0, false, LogitMode::masked_k});
         }
       },
       [](const C& c) {
         std::vector<std::string> w;
         for (const auto& a : c.eval.attacks) {
           AttackEntry e;
           e.family = attack_family_name(a.family);
           e.epsilon = a.epsilon;
           w.push_back(e.key());
         }
         return w.empty() ? J("none") : word_list(w);
       }},
      {"eval", "pgd_steps",
       [](C& c, const std::string& v) { c.eval_pgd.steps = to_size(v); },
       [](const C& c) { return J(c.eval_pgd.steps); }},
      {"eval", "pgd_step_size",
       [](C& c, const std::string& v) { c.eval_pgd.step_size = to_double(v); },
       [](const C& c) { return J(c.eval_pgd.step_size); }},
      {"eval", "pgd_random_start",
       [](C& c, const std::string& v) { c.eval_pgd.random_start = to_bool(v); },
       [](const C& c) { return J(c.eval_pgd.random_start); }},
      {"eval", "logit_mode",
       [](C& c, const std::string& v) { c.eval_logit_mode = parse_logit_mode(v); },
       [](const C& c) { return J(logit_mode_name(c.eval_logit_mode)); }},
      {"eval", "calibration_bins", [](C& c, const std::string& v) { c.eval.calibration_bins = to_size(v); },
       [](const C& c) { return J(c.eval.calibration_bins); }},
      {"eval", "binning",
       [](C& c, const std::string& v) {
         if (v == "equal_count") c.eval.binning = BinningMode::equal_count;
         else if (v == "equal_width") c.eval.binning = BinningMode::equal_width;
         else throw ConfigError("unknown binning '" + v + "'");
       },
       [](const C& c) { return J(binning_name(c.eval.binning)); }},
      {"eval", "batch_size", [](C& c, const std::string& v) { c.eval.batch_size = to_size(v); },
       [](const C& c) { return J(c.eval.batch_size); }},
      {"eval", "attack_samples", [](C& c, const std::string& v) { c.eval.attack_samples = to_size(v); },
       [](const C& c) { return J(c.eval.attack_samples); }},
  };
  return table;
}

inline const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

inline std::string field_label(const std::string& section, const std::string& key) {
  return section.empty() ? key : "[" + section + "] " + key;
}

}  // namespace detail

// INI-style text: "key = value" lines, "[section]" headers, '#' or ';'
// comments. Keys before the first header are top-level. Unknown sections or
// keys, duplicates and bad values raise ConfigError naming line and field.
inline ExperimentConfig parse_experiment_config(const std::string& text, const std::string& origin = "config") {
  ExperimentConfig cfg;
  std::set<std::pair<std::string, std::string>> seen;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int lineno = 0;
  static const std::set<std::string> sections{"dataset", "model", "train", "eval"};
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string where = origin + " line " + std::to_string(lineno);
    std::string line = raw;
    if (const auto c = line.find_first_of("#;"); c != std::string::npos) line.erase(c);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (!sections.count(section)) throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto label = detail::field_label(section, key);
    const auto* field = detail::find_field(section, key);
    if (!field) throw ConfigError(where + ": unknown field " + label);
    if (!seen.insert({section, key}).second) throw ConfigError(where + ": duplicate field " + label);
    try {
      field->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": field " + label + ": " + e.what() + " (got '" + value + "')");
    }
  }
  cfg.resolve();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_experiment_config(ss.str(), path);
}

// Every field, fully resolved, as {section: {key: value}}; top-level keys sit
// at the root. Object keys are sorted.
inline nlohmann::json config_to_json(const ExperimentConfig& cfg, bool include_output_dir = true) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : detail::fields()) {
    if (!include_output_dir && f.section.empty() && f.key == "output_dir") continue;
    if (f.section.empty()) j[f.key] = f.get(cfg);
    else j[f.section][f.key] = f.get(cfg);
  }
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  std::string text;
  for (const auto& [k, v] : j.items())
    if (!v.is_object()) text += k + " = " + detail::json_text(v) + "\n";
  for (const auto& [k, v] : j.items()) {
    if (!v.is_object()) continue;
    text += "[" + k + "]\n";
    for (const auto& [kk, vv] : v.items()) text += kk + " = " + detail::json_text(vv) + "\n";
  }
  return parse_experiment_config(text, "manifest config");
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// 16 hex digits of FNV-1a over the canonical config without output_dir.
inline std::string run_id(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(config_to_json(cfg, false).dump());
  return os.str();
}

inline std::filesystem::path run_directory(const ExperimentConfig& cfg) {
  return std::filesystem::path(cfg.output_dir) / (cfg.run_name + "-" + run_id(cfg));
}

// ---- data -----------------------------------------------------------------

struct ExperimentData {
  Dataset train;
  Dataset test;
};

inline ExperimentData load_experiment_data(const DatasetSection& d) {
  namespace fs = std::filesystem;
  ExperimentData out;
  if (d.source == DataSource::synthetic) {
    out.train = synthesize_shapes(d.train_samples, d.classes, derive_seed({d.data_seed, 0x747261696e}));
    out.test = synthesize_shapes(d.test_samples, d.classes, derive_seed({d.data_seed, 0x74657374}));
    out.train.split = "train";
    out.test.split = "test";
    return out;
  }
  const fs::path dir(d.path);
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + d.path);
  std::vector<std::string> train_files, test_files;
  CifarVariant variant = CifarVariant::cifar10;
  if (d.source == DataSource::cifar10) {
    for (int i = 1; i <= 5; ++i) train_files.push_back((dir / ("data_batch_" + std::to_string(i) + ".bin")).string());
    test_files.push_back((dir / "test_batch.bin").string());
  } else {
    variant = CifarVariant::cifar100_fine;
    train_files.push_back((dir / "train.bin").string());
    test_files.push_back((dir / "test.bin").string());
  }
  for (const auto& f : train_files)
    if (!fs::exists(f)) throw DataError("missing dataset file " + f);
  for (const auto& f : test_files)
    if (!fs::exists(f)) throw DataError("missing dataset file " + f);
  out.train = load_cifar_binary(train_files, variant, "train");
  out.test = load_cifar_binary(test_files, variant, "test");
  if (d.train_samples > 0 && d.train_samples < out.train.size()) out.train = subset(out.train, d.train_samples, d.data_seed);
  if (d.test_samples > 0 && d.test_samples < out.test.size()) out.test = subset(out.test, d.test_samples, d.data_seed);
  return out;
}

inline ModelConfig model_config_for(const ExperimentConfig& cfg, const Dataset& ds) {
  ModelConfig mc = cfg.model;
  mc.channels = ds.channels;
  mc.height = ds.height;
  mc.width = ds.width;
  mc.num_classes = ds.num_classes;
  return mc;
}

inline EvalConfig eval_config_for(const ExperimentConfig& cfg) {
  EvalConfig ec = cfg.eval;
  if (!cfg.severity_table_path.empty()) ec.severity = SeverityTable::load(cfg.severity_table_path);
  return ec;
}

// ---- run directory --------------------------------------------------------

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kCheckpointFile = "checkpoint.lakt";
inline constexpr const char* kEpochLogFile = "epochs.csv";
inline constexpr const char* kReportJsonFile = "report.json";
inline constexpr const char* kReportCsvFile = "report.csv";

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + p.string());
  os << text;
  if (!os) throw Error("write failed: " + p.string());
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  try {
    return nlohmann::json::parse(read_text_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

struct RunManifest {
  std::string run_id;
  std::string run_name;
  std::string status = "running";  // running | complete | failed
  std::string error;
  nlohmann::json config;
  std::vector<std::string> artifacts;  // paths relative to the run directory
  std::map<std::string, double> timings;  // seconds

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema_version"] = kManifestSchemaVersion;
    j["run_id"] = run_id;
    j["run_name"] = run_name;
    j["toolkit_version"] = kToolkitVersion;
    j["status"] = status;
    if (!error.empty()) j["error"] = error;
    j["config"] = config;
    j["artifacts"] = artifacts;
    j["timings"] = timings;
    return j;
  }

  static RunManifest from_json(const nlohmann::json& j) {
    try {
      RunManifest m;
      m.run_id = j.at("run_id").get<std::string>();
      m.run_name = j.at("run_name").get<std::string>();
      m.status = j.at("status").get<std::string>();
      if (j.contains("error")) m.error = j.at("error").get<std::string>();
      m.config = j.at("config");
      m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
      m.timings = j.at("timings").get<std::map<std::string, double>>();
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed manifest: ") + e.what());
    }
  }

  void write(const std::filesystem::path& dir) const {
    write_text_file(dir / kManifestFile, canonical_json(to_json()));
  }

  static RunManifest read(const std::filesystem::path& dir) { return from_json(read_json_file(dir / kManifestFile)); }

  void add_artifact(const std::string& name) {
    if (std::find(artifacts.begin(), artifacts.end(), name) == artifacts.end()) artifacts.push_back(name);
  }
};

class RunExistsError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

struct RunOptions {
  bool force = false;
  bool evaluate = true;  // false: train and checkpoint only
  std::function<void(const std::string&)> log;  // progress lines
};

struct RunResult {
  std::filesystem::path dir;
  std::string run_id;
  std::vector<EpochLog> epochs;
  std::optional<EvalReport> report;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::string epoch_csv_row(const EpochLog& e) {
  return std::to_string(e.epoch) + "," + format_number(e.mean_loss) + "," + format_number(e.train_accuracy) + "," +
         format_number(e.lr) + "\n";
}

inline void append_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::app);
  if (!os) throw Error("cannot append to " + p.string());
  os << text;
}

inline void write_report_files(const std::filesystem::path& dir, const EvalReport& r) {
  write_text_file(dir / kReportJsonFile, report_json(r));
  write_text_file(dir / kReportCsvFile, report_csv(r));
}

}  // namespace detail

inline Model<float> load_run_model(const std::filesystem::path& dir, const ExperimentConfig& cfg, const Dataset& like) {
  Model<float> model = make_model_for<float>(model_config_for(cfg, like), cfg.train);
  model.load_state(load_tensors<float>((dir / kCheckpointFile).string()));
  return model;
}

// Evaluates the checkpoint of a finished run and writes report.json / .csv.
inline EvalReport evaluate_run(const std::filesystem::path& dir, const RunOptions& opt = {}) {
  auto manifest = RunManifest::read(dir);
  const auto cfg = config_from_json(manifest.config);
  const auto data = load_experiment_data(cfg.dataset);
  const auto model = load_run_model(dir, cfg, data.train);
  const auto t0 = std::chrono::steady_clock::now();
  auto report = evaluate(model, data.test, eval_config_for(cfg), opt.log);
  report.run_id = manifest.run_id;
  report.run_name = manifest.run_name;
  report.regime = regime_name(cfg.train.regime);
  detail::write_report_files(dir, report);
  manifest.add_artifact(kReportJsonFile);
  manifest.add_artifact(kReportCsvFile);
  manifest.timings["eval_seconds"] = detail::seconds_since(t0);
  manifest.status = "complete";
  manifest.write(dir);
  return report;
}

// Train, checkpoint and (optionally) evaluate. The data is loaded and the
// config checked before anything is written; the manifest is the first file
// in the run directory and lists every artifact the run will produce.
inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  namespace fs = std::filesystem;
  const auto t_start = std::chrono::steady_clock::now();
  cfg.validate();
  auto log = [&](const std::string& s) {
    if (opt.log) opt.log(s);
  };
  const auto data = load_experiment_data(cfg.dataset);
  const auto eval_cfg = eval_config_for(cfg);
  const ModelConfig mc = model_config_for(cfg, data.train);
  Model<float> model = make_model_for<float>(mc, cfg.train);

  RunResult out;
  out.run_id = run_id(cfg);
  out.dir = run_directory(cfg);
  if (fs::exists(out.dir)) {
    if (!opt.force) throw RunExistsError("run directory " + out.dir.string() + " exists; pass --force to overwrite");
    fs::remove_all(out.dir);
  }
  fs::create_directories(out.dir);

  RunManifest manifest;
  manifest.run_id = out.run_id;
  manifest.run_name = cfg.run_name;
  manifest.config = config_to_json(cfg);
  manifest.artifacts = {kManifestFile, kCheckpointFile, kEpochLogFile};
  if (opt.evaluate) {
    manifest.add_artifact(kReportJsonFile);
    manifest.add_artifact(kReportCsvFile);
  }
  manifest.write(out.dir);

  try {
    log("run " + out.run_id + " -> " + out.dir.string());
    const auto epochs_path = out.dir / kEpochLogFile;
    write_text_file(epochs_path, "epoch,mean_loss,train_accuracy,lr\n");
    const auto t_train = std::chrono::steady_clock::now();
    out.epochs = train<float>(cfg.train, model, data.train, {}, [&](const EpochLog& e) {
      detail::append_text(epochs_path, detail::epoch_csv_row(e));
      log("epoch " + std::to_string(e.epoch) + " loss " + format_number(e.mean_loss) + " acc " +
          format_number(e.train_accuracy));
      if (cfg.checkpoint_every > 0 && e.epoch % cfg.checkpoint_every == 0 && e.epoch < cfg.train.epochs) {
        const std::string name = "checkpoint_epoch" + std::to_string(e.epoch) + ".lakt";
        save_tensors((out.dir / name).string(), model.state());
        manifest.add_artifact(name);
        manifest.write(out.dir);
      }
    });
    manifest.timings["train_seconds"] = detail::seconds_since(t_train);
    save_tensors((out.dir / kCheckpointFile).string(), model.state());

    if (opt.evaluate) {
      const auto t_eval = std::chrono::steady_clock::now();
      EvalReport report = evaluate(model, data.test, eval_cfg, [&](const std::string& s) { log("eval " + s); });
      report.run_id = out.run_id;
      report.run_name = cfg.run_name;
      report.regime = regime_name(cfg.train.regime);
      detail::write_report_files(out.dir, report);
      manifest.timings["eval_seconds"] = detail::seconds_since(t_eval);
      out.report = std::move(report);
    }
    manifest.status = opt.evaluate ? "complete" : "trained";
    manifest.timings["total_seconds"] = detail::seconds_since(t_start);
    manifest.write(out.dir);
  } catch (const std::exception& e) {
    manifest.status = "failed";
    manifest.error = e.what();
    manifest.write(out.dir);
    throw;
  }
  return out;
}

// A run given either as a directory or as a run id under output_dir.
inline std::filesystem::path resolve_run(const std::string& ref, const std::string& output_dir) {
  namespace fs = std::filesystem;
  if (fs::is_directory(ref) && fs::exists(fs::path(ref) / kManifestFile)) return ref;
  if (fs::is_directory(output_dir)) {
    for (const auto& entry : fs::directory_iterator(output_dir)) {
      const auto name = entry.path().filename().string();
      if (entry.is_directory() && name.size() > ref.size() && name.ends_with("-" + ref)) return entry.path();
    }
  }
  throw DataError("no run found for '" + ref + "'");
}

inline EvalReport load_run_report(const std::filesystem::path& dir) {
  return report_from_json(read_json_file(dir / kReportJsonFile));
}

// Comparison CSV over finished runs; the first is the baseline.
inline std::string compare_runs(const std::vector<std::filesystem::path>& dirs) {
  std::vector<EvalReport> reports;
  for (const auto& d : dirs) reports.push_back(load_run_report(d));
  return comparison_csv(reports, compare_reports(reports));
}

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitRuntime = 4;

// Maps an in-flight exception to an exit code.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e)) return kExitData;
  return kExitRuntime;
}

}  // namespace lakit
