// SPDX-License-Identifier: Apache-2.0
//
// Pre-LN transformer encoder:
//   Z'_l = MSA(LN(Z_{l-1})) + Z_{l-1}
//   Z_l  = MLP(LN(Z'_l)) + Z'_l

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "transcrowd/config.hpp"
#include "transcrowd/tensor.hpp"

namespace transcrowd {

// Each of w_q / w_k / w_v stacks the m per-head [D, D/m] matrices side by
// side into one [D, D] block; head h owns columns [h*D/m, (h+1)*D/m).
struct LayerParams {
  Tensor ln1_gamma, ln1_beta;  // [D]
  Tensor w_q, w_k, w_v;        // [D, D]
  Tensor w_o;                  // [D, D]
  Tensor ln2_gamma, ln2_beta;  // [D]
  Tensor mlp_w1, mlp_b1;       // [D, 4D], [4D]
  Tensor mlp_w2, mlp_b2;       // [4D, D], [D]
};

struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  Tensor weights;  // [B, S, S], rows sum to 1
};

struct AttentionSettings {
  std::size_t heads = 1;
  AttentionScale scale = AttentionScale::ModelDim;
};

inline float attention_denominator(std::size_t dim, const AttentionSettings& s) {
  const std::size_t d = s.scale == AttentionScale::ModelDim ? dim : dim / s.heads;
  return std::sqrt(static_cast<float>(d));
}

// softmax(Q K^T / denominator) V for one head; q, k, v are [B, S, d].
// When `weights` is non-null it receives a detached copy of the attention matrix.
inline Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v, float denominator,
                               Tensor* weights = nullptr) {
  Tensor scores = scale(matmul(q, transpose(k)), 1.0f / denominator);
  Tensor attn = softmax_rows(scores);
  if (weights) *weights = attn.detach();
  return matmul(attn, v);
}

inline Tensor msa(const Tensor& z, const LayerParams& p, const AttentionSettings& settings,
                  std::vector<AttentionRecord>* records = nullptr, std::size_t layer = 0) {
  const std::size_t dim = z.dim(-1);
  if (settings.heads == 0 || dim % settings.heads != 0) {
    throw ShapeError("msa: dim " + std::to_string(dim) + " not divisible by " + std::to_string(settings.heads) + " heads");
  }
  const std::size_t hd = dim / settings.heads;
  const float denom = attention_denominator(dim, settings);
  const Tensor q = matmul(z, p.w_q);
  const Tensor k = matmul(z, p.w_k);
  const Tensor v = matmul(z, p.w_v);
  std::vector<Tensor> outputs;
  outputs.reserve(settings.heads);
  for (std::size_t h = 0; h < settings.heads; ++h) {
    const std::size_t lo = h * hd, hi = lo + hd;
    Tensor w;
    outputs.push_back(scaled_attention(slice(q, -1, lo, hi), slice(k, -1, lo, hi), slice(v, -1, lo, hi), denom,
                                       records ? &w : nullptr));
    if (records) records->push_back({layer, h, std::move(w)});
  }
  Tensor joined = settings.heads == 1 ? outputs.front() : concat(outputs, -1);
  return matmul(joined, p.w_o);
}

// D -> 4D, GELU, 4D -> D.
inline Tensor mlp_block(const Tensor& z, const LayerParams& p) {
  Tensor hidden = gelu(add(matmul(z, p.mlp_w1), p.mlp_b1));
  return add(matmul(hidden, p.mlp_w2), p.mlp_b2);
}

inline Tensor encoder_layer(const Tensor& z, const LayerParams& p, const AttentionSettings& settings, float ln_eps,
                            std::vector<AttentionRecord>* records = nullptr, std::size_t layer = 0) {
  Tensor mid = add(msa(layer_norm(z, p.ln1_gamma, p.ln1_beta, ln_eps), p, settings, records, layer), z);
  return add(mlp_block(layer_norm(mid, p.ln2_gamma, p.ln2_beta, ln_eps), p), mid);
}

struct EncoderOutput {
  Tensor z;
  std::vector<AttentionRecord> records;  // layer-major, then head
  std::vector<float> layer_max_abs;      // max |Z_l| per layer, for diagnostics
};

inline float max_abs(const Tensor& t) {
  float m = 0.0f;
  for (float v : t.data()) m = std::isfinite(v) ? std::max(m, std::fabs(v)) : v;
  return m;
}

inline EncoderOutput encode(const Tensor& z0, const std::vector<LayerParams>& layers, const AttentionSettings& settings,
                            float ln_eps, bool record_attention = false) {
  EncoderOutput out;
  out.z = z0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    out.z = encoder_layer(out.z, layers[l], settings, ln_eps, record_attention ? &out.records : nullptr, l);
    out.layer_max_abs.push_back(max_abs(out.z));
  }
  return out;
}

}  // namespace transcrowd
