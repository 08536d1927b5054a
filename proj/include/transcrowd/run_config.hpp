// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat JSON object validated against a closed schema.
// Precedence: built-in defaults (full scale), then the selected profile,
// then the config file, then command-line overrides.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "transcrowd/config.hpp"
#include "transcrowd/optim.hpp"
#include "transcrowd/synth.hpp"

namespace transcrowd {

struct RunConfig {
  std::string profile = "full";
  TrainConfig train;
  std::optional<std::uint64_t> seed;

  std::string data, eval_data, out, checkpoint, resume, log, image_path;

  // synth
  std::size_t n = 64;
  int count_min = 0;
  int count_max = 30;
  double radius = 2.0;
  double noise = 0.2;
  std::size_t canvas = 0;  // 0: use the model image side
  std::string quadrant;    // "", tl, tr, bl, br

  // gradcheck
  float gc_step = 1e-3f;
  std::size_t gc_coords = 32;
  double gc_threshold = 5e-3;
  std::string gc_heads = "both";

  const ModelConfig& model() const { return train.model; }
};

enum class FieldKind { Unsigned, Integer, Number, Bool, String };

struct ConfigField {
  const char* key;
  FieldKind kind;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
  std::function<nlohmann::json(const RunConfig&)> get;
};

namespace detail {

inline std::uint64_t as_unsigned(const nlohmann::json& v, const char* key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  throw ConfigError(key, "expected a non-negative integer, got " + v.dump());
}

inline std::int64_t as_integer(const nlohmann::json& v, const char* key) {
  if (v.is_number_integer()) return v.get<std::int64_t>();
  throw ConfigError(key, "expected an integer, got " + v.dump());
}

inline double as_number(const nlohmann::json& v, const char* key) {
  if (v.is_number()) return v.get<double>();
  throw ConfigError(key, "expected a number, got " + v.dump());
}

inline bool as_bool(const nlohmann::json& v, const char* key) {
  if (v.is_boolean()) return v.get<bool>();
  throw ConfigError(key, "expected true or false, got " + v.dump());
}

inline std::string as_string(const nlohmann::json& v, const char* key) {
  if (v.is_string()) return v.get<std::string>();
  throw ConfigError(key, "expected a string, got " + v.dump());
}

#define TC_UNSIGNED(KEY, LVALUE)                                                                                  \
  ConfigField {                                                                                                   \
    KEY, FieldKind::Unsigned,                                                                                     \
        [](RunConfig& c, const nlohmann::json& v) { LVALUE = static_cast<decltype(LVALUE)>(as_unsigned(v, KEY)); }, \
        [](const RunConfig& c) { return nlohmann::json(LVALUE); }                                                \
  }
#define TC_NUMBER(KEY, LVALUE)                                                                                  \
  ConfigField {                                                                                                 \
    KEY, FieldKind::Number,                                                                                     \
        [](RunConfig& c, const nlohmann::json& v) { LVALUE = static_cast<decltype(LVALUE)>(as_number(v, KEY)); }, \
        [](const RunConfig& c) { return nlohmann::json(LVALUE); }                                              \
  }
#define TC_BOOL(KEY, LVALUE)                                                                   \
  ConfigField {                                                                                \
    KEY, FieldKind::Bool, [](RunConfig& c, const nlohmann::json& v) { LVALUE = as_bool(v, KEY); }, \
        [](const RunConfig& c) { return nlohmann::json(LVALUE); }                             \
  }
#define TC_STRING(KEY, LVALUE)                                                                     \
  ConfigField {                                                                                    \
    KEY, FieldKind::String, [](RunConfig& c, const nlohmann::json& v) { LVALUE = as_string(v, KEY); }, \
        [](const RunConfig& c) { return nlohmann::json(LVALUE); }                                 \
  }

}  // namespace detail

inline const std::vector<ConfigField>& config_schema() {
  using namespace detail;
  static const std::vector<ConfigField> schema = {
      TC_STRING("profile", c.profile),
      // model
      TC_UNSIGNED("image", c.train.model.image),
      TC_UNSIGNED("patch", c.train.model.patch),
      TC_UNSIGNED("dim", c.train.model.dim),
      TC_UNSIGNED("heads", c.train.model.heads),
      TC_UNSIGNED("layers", c.train.model.layers),
      ConfigField{"head", FieldKind::String,
                  [](RunConfig& c, const nlohmann::json& v) {
                    try {
                      c.train.model.head = parse_head_variant(as_string(v, "head"));
                    } catch (const ConfigError&) {
                      throw;
                    } catch (const std::invalid_argument& e) {
                      throw ConfigError("head", e.what());
                    }
                  },
                  [](const RunConfig& c) { return nlohmann::json(to_string(c.train.model.head)); }},
      TC_UNSIGNED("head_hidden", c.train.model.head_hidden),
      ConfigField{"attention_scale", FieldKind::String,
                  [](RunConfig& c, const nlohmann::json& v) {
                    try {
                      c.train.model.attention_scale = parse_attention_scale(as_string(v, "attention_scale"));
                    } catch (const ConfigError&) {
                      throw;
                    } catch (const std::invalid_argument& e) {
                      throw ConfigError("attention_scale", e.what());
                    }
                  },
                  [](const RunConfig& c) { return nlohmann::json(to_string(c.train.model.attention_scale)); }},
      TC_BOOL("final_norm", c.train.model.final_norm),
      // training
      TC_UNSIGNED("batch", c.train.batch),
      TC_UNSIGNED("epochs", c.train.epochs),
      ConfigField{"seed", FieldKind::Unsigned,
                  [](RunConfig& c, const nlohmann::json& v) { c.seed = as_unsigned(v, "seed"); },
                  [](const RunConfig& c) { return c.seed ? nlohmann::json(*c.seed) : nlohmann::json(); }},
      TC_NUMBER("lr", c.train.adam.lr),
      TC_NUMBER("weight_decay", c.train.adam.weight_decay),
      TC_NUMBER("beta1", c.train.adam.beta1),
      TC_NUMBER("beta2", c.train.adam.beta2),
      TC_NUMBER("adam_eps", c.train.adam.eps),
      TC_BOOL("augment", c.train.augment),
      TC_NUMBER("p_flip", c.train.augment_options.p_flip),
      TC_NUMBER("p_gray", c.train.augment_options.p_gray),
      TC_BOOL("normalize", c.train.normalization.enabled),
      TC_UNSIGNED("checkpoint_every", c.train.checkpoint_every),
      // paths
      TC_STRING("data", c.data),
      TC_STRING("eval_data", c.eval_data),
      TC_STRING("out", c.out),
      TC_STRING("checkpoint", c.checkpoint),
      TC_STRING("resume", c.resume),
      TC_STRING("log", c.log),
      TC_STRING("image_path", c.image_path),
      // synth
      TC_UNSIGNED("n", c.n),
      ConfigField{"count_min", FieldKind::Integer,
                  [](RunConfig& c, const nlohmann::json& v) { c.count_min = static_cast<int>(as_integer(v, "count_min")); },
                  [](const RunConfig& c) { return nlohmann::json(c.count_min); }},
      ConfigField{"count_max", FieldKind::Integer,
                  [](RunConfig& c, const nlohmann::json& v) { c.count_max = static_cast<int>(as_integer(v, "count_max")); },
                  [](const RunConfig& c) { return nlohmann::json(c.count_max); }},
      TC_NUMBER("radius", c.radius),
      TC_NUMBER("noise", c.noise),
      TC_UNSIGNED("canvas", c.canvas),
      TC_STRING("quadrant", c.quadrant),
      // gradcheck
      TC_NUMBER("gc_step", c.gc_step),
      TC_UNSIGNED("gc_coords", c.gc_coords),
      TC_NUMBER("gc_threshold", c.gc_threshold),
      TC_STRING("gc_heads", c.gc_heads),
  };
  return schema;
}

#undef TC_UNSIGNED
#undef TC_NUMBER
#undef TC_BOOL
#undef TC_STRING

inline const ConfigField* find_field(const std::string& key) {
  for (const auto& f : config_schema())
    if (key == f.key) return &f;
  return nullptr;
}

// Desk-scale defaults: toy model, M = 8, lr = 1e-3.
inline void apply_profile(RunConfig& c, const std::string& profile) {
  if (profile == "full") {
    c.train = RunConfig{}.train;
  } else if (profile == "toy") {
    c.train = TrainConfig::toy(c.train.model.head);
  } else {
    throw ConfigError("profile", "unknown profile '" + profile + "' (expected full|toy)");
  }
  c.profile = profile;
}

inline void apply_object(RunConfig& c, const nlohmann::json& obj) {
  if (!obj.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (key == "profile") continue;
    const ConfigField* f = find_field(key);
    if (!f) throw ConfigError(key, "unknown key");
    f->set(c, value);
  }
}

inline void validate(const RunConfig& c) {
  c.train.model.validate();
  if (c.train.batch == 0) throw ConfigError("batch", "must be >= 1");
  if (!(c.train.adam.lr >= 0.0f)) throw ConfigError("lr", "must be >= 0");
  if (!(c.train.adam.weight_decay >= 0.0f)) throw ConfigError("weight_decay", "must be >= 0");
  if (!(c.train.adam.beta1 >= 0.0f && c.train.adam.beta1 < 1.0f)) throw ConfigError("beta1", "must lie in [0, 1)");
  if (!(c.train.adam.beta2 >= 0.0f && c.train.adam.beta2 < 1.0f)) throw ConfigError("beta2", "must lie in [0, 1)");
  if (!(c.train.adam.eps > 0.0f)) throw ConfigError("adam_eps", "must be positive");
  for (const auto& [key, p] : {std::pair{"p_flip", c.train.augment_options.p_flip}, {"p_gray", c.train.augment_options.p_gray}}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(key, "must lie in [0, 1]");
  }
  if (c.count_min < 0 || c.count_min > c.count_max) throw ConfigError("count_min", "need 0 <= count_min <= count_max");
  if (!(c.radius >= 1.0)) throw ConfigError("radius", "must be >= 1");
  if (!(c.noise >= 0.0 && c.noise <= 1.0)) throw ConfigError("noise", "must lie in [0, 1]");
  if (!c.quadrant.empty() && c.quadrant != "tl" && c.quadrant != "tr" && c.quadrant != "bl" && c.quadrant != "br") {
    throw ConfigError("quadrant", "expected tl|tr|bl|br");
  }
  if (!(c.gc_step > 0.0f)) throw ConfigError("gc_step", "must be positive");
  if (c.gc_heads != "both" && c.gc_heads != "token" && c.gc_heads != "gap") {
    throw ConfigError("gc_heads", "expected both|token|gap");
  }
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : config_schema()) j[f.key] = f.get(c);
  return j;
}

// Defaults, then the profile named by overrides or file, then file keys, then
// override keys.
inline RunConfig parse_config(const nlohmann::json& file, const nlohmann::json& overrides = nlohmann::json::object()) {
  RunConfig c;
  std::string profile = "full";
  if (file.is_object() && file.contains("profile")) profile = detail::as_string(file["profile"], "profile");
  if (overrides.is_object() && overrides.contains("profile")) profile = detail::as_string(overrides["profile"], "profile");
  apply_profile(c, profile);
  apply_object(c, file);
  apply_object(c, overrides);
  // Head width follows D unless given explicitly.
  const bool hidden_set = (file.is_object() && file.contains("head_hidden")) ||
                          (overrides.is_object() && overrides.contains("head_hidden"));
  if (!hidden_set) c.train.model.head_hidden = c.train.model.dim;
  validate(c);
  return c;
}

inline RunConfig parse_config(const std::filesystem::path& file, const nlohmann::json& overrides) {
  std::ifstream in(file);
  if (!in) throw ConfigError("config", "cannot open " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(j, overrides);
}

// Command-line text for a key, typed per the schema.
inline nlohmann::json override_value(const std::string& key, const std::string& text) {
  const ConfigField* f = find_field(key);
  if (!f) throw ConfigError(key, "unknown key");
  if (f->kind == FieldKind::String) return text;
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    throw ConfigError(key, "cannot parse '" + text + "'");
  }
}

}  // namespace transcrowd
