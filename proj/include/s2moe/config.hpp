#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "s2moe/model.hpp"
#include "s2moe/report.hpp"

namespace s2moe {

/// Thrown for malformed configuration text or out-of-range settings.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class Precision { f32, f64 };

/// Split fractions in parts per million of the byte stream.
struct SplitFractions {
  std::uint64_t train_ppm = 900000;
  std::uint64_t val_ppm = 50000;
  std::uint64_t test_ppm = 50000;

  void validate() const {
    if (train_ppm + val_ppm + test_ppm != 1000000) throw ConfigError("split fractions must sum to 1");
    if (train_ppm == 0) throw ConfigError("train split must be non-empty");
  }
};

struct RunConfig {
  ModelConfig model;
  std::string preset = "desk";
  std::string corpus;
  std::string out_dir = "run";
  SplitFractions splits;
  std::size_t batch = 8;
  std::size_t steps = 2000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.25;
  std::size_t eval_interval = 100;
  std::size_t checkpoint_interval = 500;
  Precision precision = Precision::f32;
  bool log_wall_ms = false;

  void validate() const {
    model.validate();
    splits.validate();
    if (model.seq_len < 2) throw ConfigError("seq_len must be at least 2");
    if (batch == 0) throw ConfigError("batch must be positive");
    if (steps == 0) throw ConfigError("steps must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
    if (eval_interval == 0 || checkpoint_interval == 0) throw ConfigError("intervals must be positive");
  }
};

/// Full-scale settings: 4 layers, d=256, 16 experts, k=2, input length 512,
/// Adam at 2.5e-4 for 100k iterations.
inline RunConfig paper_base_preset() {
  RunConfig c;
  c.preset = "paper-base";
  c.model = ModelConfig{};
  c.batch = 48;
  c.steps = 100000;
  c.lr = 2.5e-4;
  c.eval_interval = 1000;
  c.checkpoint_interval = 5000;
  return c;
}

/// Small settings that train on one CPU core in minutes.
inline RunConfig desk_preset() {
  RunConfig c;
  c.preset = "desk";
  c.corpus = "builtin:1000000";
  c.model.n_layers = 2;
  c.model.d_model = 128;
  c.model.n_heads = 4;
  c.model.d_exp = 256;
  c.model.experts = 8;
  c.model.k_train = 2;
  c.model.k_eval = 2;
  c.model.seq_len = 128;
  c.model.dropout = 0.0;
  c.batch = 8;
  c.steps = 2000;
  c.lr = 1e-3;
  c.eval_interval = 100;
  c.checkpoint_interval = 500;
  return c;
}

inline RunConfig preset(std::string_view name) {
  if (name == "desk") return desk_preset();
  if (name == "paper-base") return paper_base_preset();
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected desk or paper-base)");
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class U>
U parse_unsigned(const std::string& key, const std::string& v) {
  U out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::uint64_t parse_fraction_ppm(const std::string& key, const std::string& v) {
  const double f = parse_real(key, v);
  if (f < 0.0 || f > 1.0) throw ConfigError("config key '" + key + "': fraction outside [0, 1]");
  return static_cast<std::uint64_t>(std::llround(f * 1e6));
}

inline std::string ppm_text(std::uint64_t ppm) { return format_double(static_cast<double>(ppm) / 1e6); }

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define S2MOE_SIZE_KEY(NAME, FIELD)                                                                   \
  ConfigKey {                                                                                         \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = parse_unsigned<std::size_t>(NAME, v); }, \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                                    \
  }
#define S2MOE_REAL_KEY(NAME, FIELD)                                                        \
  ConfigKey {                                                                              \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = parse_real(NAME, v); },       \
        [](const RunConfig& c) { return format_double(c.FIELD); }                          \
  }
#define S2MOE_BOOL_KEY(NAME, FIELD)                                                        \
  ConfigKey {                                                                              \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = parse_bool(NAME, v); },       \
        [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }         \
  }
#define S2MOE_TEXT_KEY(NAME, FIELD)                                               \
  ConfigKey {                                                                     \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = v; },                \
        [](const RunConfig& c) { return c.FIELD; }                                \
  }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      S2MOE_TEXT_KEY("preset", preset),
      S2MOE_TEXT_KEY("corpus", corpus),
      S2MOE_TEXT_KEY("out_dir", out_dir),
      {"variant", [](RunConfig& c, const std::string& v) { c.model.variant = parse_variant(v); },
       [](const RunConfig& c) { return std::string(to_string(c.model.variant)); }},
      {"precision",
       [](RunConfig& c, const std::string& v) {
         if (v == "f32") c.precision = Precision::f32;
         else if (v == "f64") c.precision = Precision::f64;
         else throw ConfigError("config key 'precision': expected f32 or f64, got '" + v + "'");
       },
       [](const RunConfig& c) { return std::string(c.precision == Precision::f32 ? "f32" : "f64"); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.model.seed = parse_unsigned<std::uint64_t>("seed", v); },
       [](const RunConfig& c) { return std::to_string(c.model.seed); }},
      S2MOE_SIZE_KEY("n_layers", model.n_layers),
      S2MOE_SIZE_KEY("d_model", model.d_model),
      S2MOE_SIZE_KEY("n_heads", model.n_heads),
      S2MOE_SIZE_KEY("d_exp", model.d_exp),
      S2MOE_SIZE_KEY("experts", model.experts),
      S2MOE_SIZE_KEY("k_train", model.k_train),
      S2MOE_SIZE_KEY("k_eval", model.k_eval),
      S2MOE_SIZE_KEY("vocab", model.vocab),
      S2MOE_SIZE_KEY("seq_len", model.seq_len),
      S2MOE_SIZE_KEY("d_low", model.d_low),
      S2MOE_SIZE_KEY("stage_boundary", model.stage_boundary),
      S2MOE_REAL_KEY("dropout", model.dropout),
      S2MOE_REAL_KEY("alpha", model.alpha),
      S2MOE_REAL_KEY("beta", model.beta),
      S2MOE_REAL_KEY("tau_u", model.tau_u),
      S2MOE_REAL_KEY("tau_r", model.tau_r),
      S2MOE_REAL_KEY("init_std", model.init_std),
      S2MOE_REAL_KEY("blend_bias_init", model.blend_bias_init),
      S2MOE_BOOL_KEY("noise_enabled", model.noise_enabled),
      S2MOE_SIZE_KEY("batch", batch),
      S2MOE_SIZE_KEY("steps", steps),
      S2MOE_REAL_KEY("lr", lr),
      S2MOE_REAL_KEY("beta1", beta1),
      S2MOE_REAL_KEY("beta2", beta2),
      S2MOE_REAL_KEY("adam_eps", adam_eps),
      S2MOE_REAL_KEY("grad_clip", grad_clip),
      S2MOE_SIZE_KEY("eval_interval", eval_interval),
      S2MOE_SIZE_KEY("checkpoint_interval", checkpoint_interval),
      S2MOE_BOOL_KEY("log_wall_ms", log_wall_ms),
      {"train_fraction", [](RunConfig& c, const std::string& v) { c.splits.train_ppm = parse_fraction_ppm("train_fraction", v); },
       [](const RunConfig& c) { return ppm_text(c.splits.train_ppm); }},
      {"val_fraction", [](RunConfig& c, const std::string& v) { c.splits.val_ppm = parse_fraction_ppm("val_fraction", v); },
       [](const RunConfig& c) { return ppm_text(c.splits.val_ppm); }},
      {"test_fraction", [](RunConfig& c, const std::string& v) { c.splits.test_ppm = parse_fraction_ppm("test_fraction", v); },
       [](const RunConfig& c) { return ppm_text(c.splits.test_ppm); }},
  };
  return keys;
}

#undef S2MOE_SIZE_KEY
#undef S2MOE_REAL_KEY
#undef S2MOE_BOOL_KEY
#undef S2MOE_TEXT_KEY

}  // namespace detail

/// Applies `key=value` lines on top of `base`. Blank lines and `#` comments
/// are ignored; unknown or repeated keys are rejected. A `preset` key, if
/// present, must come first and resets every other setting to that preset.
inline RunConfig parse_config(std::string_view text, RunConfig base = desk_preset()) {
  std::map<std::string, const detail::ConfigKey*> by_name;
  for (const auto& k : detail::config_keys()) by_name[k.name] = &k;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const auto key = detail::trim(std::string_view(body).substr(0, eq));
    const auto value = detail::trim(std::string_view(body).substr(eq + 1));
    auto it = by_name.find(key);
    if (it == by_name.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (seen.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": key '" + key + "' repeated");
    if (key == "preset") {
      if (!seen.empty()) throw ConfigError("config: 'preset' must be the first key");
      base = preset(value);
    } else {
      it->second->set(base, value);
    }
    seen.insert(key);
  }
  return base;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = desk_preset()) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Canonical text form; parse_config(config_text(c)) reproduces c.
inline std::string config_text(const RunConfig& c) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + "=" + k.get(c) + "\n";
  return out;
}

inline std::vector<std::string> config_key_names() {
  std::vector<std::string> names;
  for (const auto& k : detail::config_keys()) names.push_back(k.name);
  return names;
}

}  // namespace s2moe
