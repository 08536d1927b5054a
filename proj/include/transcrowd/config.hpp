// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace transcrowd {

enum class HeadVariant { Token, Gap };

// Divisor inside the attention softmax: sqrt(D) or sqrt(D / m).
enum class AttentionScale { ModelDim, HeadDim };

inline const char* to_string(HeadVariant v) { return v == HeadVariant::Token ? "token" : "gap"; }
inline const char* to_string(AttentionScale s) { return s == AttentionScale::ModelDim ? "model_dim" : "head_dim"; }

inline HeadVariant parse_head_variant(const std::string& s) {
  if (s == "token") return HeadVariant::Token;
  if (s == "gap") return HeadVariant::Gap;
  throw std::invalid_argument("unknown head variant '" + s + "' (expected token|gap)");
}

inline AttentionScale parse_attention_scale(const std::string& s) {
  if (s == "model_dim") return AttentionScale::ModelDim;
  if (s == "head_dim") return AttentionScale::HeadDim;
  throw std::invalid_argument("unknown attention scale '" + s + "' (expected model_dim|head_dim)");
}

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& key, const std::string& what) : std::invalid_argument(key + ": " + what), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct ModelConfig {
  std::size_t image = 384;  // tile side, H = W
  std::size_t patch = 16;   // K
  std::size_t dim = 768;    // D
  std::size_t heads = 12;   // m
  std::size_t layers = 12;  // L
  HeadVariant head = HeadVariant::Gap;
  std::size_t head_hidden = 768;
  AttentionScale attention_scale = AttentionScale::ModelDim;
  bool final_norm = false;
  float ln_eps = 1e-6f;

  std::size_t grid() const { return image / patch; }
  std::size_t seq_len() const { return grid() * grid(); }
  std::size_t tokens() const { return seq_len() + (head == HeadVariant::Token ? 1 : 0); }
  std::size_t patch_dim() const { return patch * patch * 3; }
  std::size_t head_dim() const { return dim / heads; }

  void validate() const {
    if (patch == 0) throw ConfigError("patch", "must be positive");
    if (image == 0 || image % patch != 0) throw ConfigError("image", "must be a positive multiple of patch");
    if (heads == 0) throw ConfigError("heads", "must be positive");
    if (dim == 0 || dim % heads != 0) throw ConfigError("dim", "must be divisible by heads");
    if (head_hidden == 0) throw ConfigError("head_hidden", "must be positive");
    if (!(ln_eps > 0.0f)) throw ConfigError("ln_eps", "must be positive");
  }

  static ModelConfig full_scale() { return {}; }

  // 64×64 tiles, K = 8 (N = 64), D = 64, m = 4, L = 2.
  static ModelConfig toy(HeadVariant head = HeadVariant::Gap) {
    ModelConfig c;
    c.image = 64;
    c.patch = 8;
    c.dim = 64;
    c.heads = 4;
    c.layers = 2;
    c.head = head;
    c.head_hidden = 64;
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image", c.image},
                     {"patch", c.patch},
                     {"dim", c.dim},
                     {"heads", c.heads},
                     {"layers", c.layers},
                     {"head", to_string(c.head)},
                     {"head_hidden", c.head_hidden},
                     {"attention_scale", to_string(c.attention_scale)},
                     {"final_norm", c.final_norm},
                     {"ln_eps", c.ln_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("image").get_to(c.image);
  j.at("patch").get_to(c.patch);
  j.at("dim").get_to(c.dim);
  j.at("heads").get_to(c.heads);
  j.at("layers").get_to(c.layers);
  c.head = parse_head_variant(j.at("head").get<std::string>());
  j.at("head_hidden").get_to(c.head_hidden);
  c.attention_scale = parse_attention_scale(j.at("attention_scale").get<std::string>());
  j.at("final_norm").get_to(c.final_norm);
  j.at("ln_eps").get_to(c.ln_eps);
}

}  // namespace transcrowd
