// SPDX-License-Identifier: Apache-2.0
//
// The full count regressor: embed -> encode -> (final LN) -> head.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "transcrowd/config.hpp"
#include "transcrowd/embedder.hpp"
#include "transcrowd/encoder.hpp"
#include "transcrowd/heads.hpp"
#include "transcrowd/image.hpp"
#include "transcrowd/rng.hpp"
#include "transcrowd/tensor.hpp"

namespace transcrowd {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Model {
  ModelConfig config;
  EmbedParams embed;
  std::vector<LayerParams> layers;
  Tensor final_gamma, final_beta;  // defined only with config.final_norm
  HeadParams head;

  AttentionSettings attention() const { return {config.heads, config.attention_scale}; }

  // Every learnable tensor, in a fixed order with stable names. The returned
  // handles alias the model's storage.
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out{{"embed.projection", embed.projection}, {"embed.position", embed.position}};
    if (embed.has_reg_token()) out.push_back({"embed.reg_token", embed.reg_token});
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      const LayerParams& L = layers[l];
      out.insert(out.end(), {{p + "ln1.gamma", L.ln1_gamma},
                             {p + "ln1.beta", L.ln1_beta},
                             {p + "attn.w_q", L.w_q},
                             {p + "attn.w_k", L.w_k},
                             {p + "attn.w_v", L.w_v},
                             {p + "attn.w_o", L.w_o},
                             {p + "ln2.gamma", L.ln2_gamma},
                             {p + "ln2.beta", L.ln2_beta},
                             {p + "mlp.w1", L.mlp_w1},
                             {p + "mlp.b1", L.mlp_b1},
                             {p + "mlp.w2", L.mlp_w2},
                             {p + "mlp.b2", L.mlp_b2}});
    }
    if (config.final_norm) {
      out.push_back({"final_norm.gamma", final_gamma});
      out.push_back({"final_norm.beta", final_beta});
    }
    out.insert(out.end(), {{"head.w1", head.w1}, {"head.b1", head.b1}, {"head.w2", head.w2}, {"head.b2", head.b2}});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  Model clone() const {
    Model copy = *this;
    copy.rebind([](const Tensor& t) { return t.detach().set_requires_grad(); });
    return copy;
  }

 private:
  template <typename F>
  void rebind(F&& f) {
    auto fix = [&](Tensor& t) {
      if (t.defined()) t = f(t);
    };
    fix(embed.projection), fix(embed.position), fix(embed.reg_token);
    for (auto& L : layers) {
      for (Tensor* t : {&L.ln1_gamma, &L.ln1_beta, &L.w_q, &L.w_k, &L.w_v, &L.w_o, &L.ln2_gamma, &L.ln2_beta,
                        &L.mlp_w1, &L.mlp_b1, &L.mlp_w2, &L.mlp_b2})
        fix(*t);
    }
    fix(final_gamma), fix(final_beta);
    fix(head.w1), fix(head.b1), fix(head.w2), fix(head.b2);
  }
};

namespace detail {

inline Tensor param(Shape shape, float fill = 0.0f) { return Tensor(std::move(shape), fill).set_requires_grad(); }

inline Tensor trunc_normal_param(Shape shape, Rng& rng, double stddev = 0.02) {
  Tensor t = param(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.truncated_normal(0.0, stddev));
  return t;
}

inline Tensor normal_param(Shape shape, Rng& rng, double stddev = 0.02) {
  Tensor t = param(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace detail

// Weights truncated-normal(0, 0.02); positions normal(0, 0.02); regression
// token, biases and LN beta zero; LN gamma one.
inline Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, 0x1417));
  const std::size_t d = config.dim;
  Model m;
  m.config = config;
  m.embed.projection = detail::trunc_normal_param({config.patch_dim(), d}, rng);
  m.embed.position = detail::normal_param({config.tokens(), d}, rng);
  if (config.head == HeadVariant::Token) m.embed.reg_token = detail::param({1, d});
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerParams L;
    L.ln1_gamma = detail::param({d}, 1.0f);
    L.ln1_beta = detail::param({d});
    L.w_q = detail::trunc_normal_param({d, d}, rng);
    L.w_k = detail::trunc_normal_param({d, d}, rng);
    L.w_v = detail::trunc_normal_param({d, d}, rng);
    L.w_o = detail::trunc_normal_param({d, d}, rng);
    L.ln2_gamma = detail::param({d}, 1.0f);
    L.ln2_beta = detail::param({d});
    L.mlp_w1 = detail::trunc_normal_param({d, 4 * d}, rng);
    L.mlp_b1 = detail::param({4 * d});
    L.mlp_w2 = detail::trunc_normal_param({4 * d, d}, rng);
    L.mlp_b2 = detail::param({d});
    m.layers.push_back(std::move(L));
  }
  if (config.final_norm) {
    m.final_gamma = detail::param({d}, 1.0f);
    m.final_beta = detail::param({d});
  }
  m.head.variant = config.head;
  m.head.w1 = detail::trunc_normal_param({d, config.head_hidden}, rng);
  m.head.b1 = detail::param({config.head_hidden});
  m.head.w2 = detail::trunc_normal_param({config.head_hidden, 1}, rng);
  m.head.b2 = detail::param({1});
  return m;
}

struct ForwardResult {
  Tensor predictions;  // [B] raw per-sequence counts
  std::vector<AttentionRecord> records;
  std::vector<float> layer_max_abs;
};

// patches: [B, N, K*K*3].
inline ForwardResult forward(const Model& model, const Tensor& patches, bool record_attention = false) {
  const ModelConfig& c = model.config;
  if (patches.rank() != 3 || patches.dim(1) != c.seq_len() || patches.dim(2) != c.patch_dim()) {
    throw ShapeError("forward: patches " + shape_str(patches.shape()) + " do not match config [B, " +
                     std::to_string(c.seq_len()) + ", " + std::to_string(c.patch_dim()) + "]");
  }
  EncoderOutput enc = encode(embed(patches, model.embed), model.layers, model.attention(), c.ln_eps, record_attention);
  Tensor z = enc.z;
  if (c.final_norm) z = layer_norm(z, model.final_gamma, model.final_beta, c.ln_eps);
  return {regress(head_input(z, c.head), model.head), std::move(enc.records), std::move(enc.layer_max_abs)};
}

// Sums consecutive tile predictions into per-image counts.
inline Tensor sum_tiles(const Tensor& tile_predictions, const std::vector<std::size_t>& tiles_per_image) {
  std::size_t total = 0;
  for (std::size_t t : tiles_per_image) total += t;
  if (tile_predictions.shape() != Shape{total}) {
    throw ShapeError("sum_tiles: " + shape_str(tile_predictions.shape()) + " for " + std::to_string(total) + " tiles");
  }
  if (total == tiles_per_image.size()) return tile_predictions;
  const std::size_t images = tiles_per_image.size();
  Tensor indicator({images, total}, 0.0f);
  auto ind = indicator.mutable_data();
  std::size_t col = 0;
  for (std::size_t i = 0; i < images; ++i)
    for (std::size_t t = 0; t < tiles_per_image[i]; ++t) ind[i * total + col++] = 1.0f;
  return reshape(matmul(indicator, reshape(tile_predictions, {total, 1})), {images});
}

// Tiles fed to the model for one image: a direct side×side grid when the
// image already divides evenly, otherwise a resize to 2×3 tiles (768×1152 at
// side 384) first.
inline std::vector<Image> to_tiles(const Image& img, std::size_t side) {
  if (img.height % side == 0 && img.width % side == 0) return tile_grid(img, side);
  return tile_grid(resize_bilinear(img, 2 * side, 3 * side), side);
}

}  // namespace transcrowd
