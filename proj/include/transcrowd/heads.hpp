// SPDX-License-Identifier: Apache-2.0
//
// Count regression heads and the L1 training loss.

#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "transcrowd/config.hpp"
#include "transcrowd/tensor.hpp"

namespace transcrowd {

struct HeadParams {
  HeadVariant variant = HeadVariant::Gap;
  Tensor w1, b1;  // [D, D_hid], [D_hid]
  Tensor w2, b2;  // [D_hid, 1], [1]
};

// Mean over the token axis: [B, N, D] -> [B, D].
inline Tensor gap_pool(const Tensor& z) {
  if (z.rank() != 3) throw ShapeError("gap_pool: expected [B, N, D], got " + shape_str(z.shape()));
  return mean(z, 1);
}

// Final state of the regression token: [B, N + 1, D] -> [B, D].
inline Tensor token_state(const Tensor& z) {
  if (z.rank() != 3) throw ShapeError("token_state: expected [B, S, D], got " + shape_str(z.shape()));
  return reshape(slice(z, 1, 0, 1), {z.dim(0), z.dim(2)});
}

inline Tensor head_input(const Tensor& z, HeadVariant variant) {
  return variant == HeadVariant::Gap ? gap_pool(z) : token_state(z);
}

// [B, D] -> [B] raw counts (may be negative; clamp only when reporting).
inline Tensor regress(const Tensor& features, const HeadParams& head) {
  if (features.rank() != 2) throw ShapeError("regress: expected [B, D], got " + shape_str(features.shape()));
  Tensor hidden = gelu(add(matmul(features, head.w1), head.b1));
  Tensor out = add(matmul(hidden, head.w2), head.b2);
  return reshape(out, {features.dim(0)});
}

// (1/M) Σ |P_i − G_i|
inline Tensor l1_loss(const Tensor& predictions, const Tensor& targets) {
  if (predictions.rank() != 1 || predictions.shape() != targets.shape()) {
    throw ShapeError("l1_loss: predictions " + shape_str(predictions.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  return mean(abs(sub(predictions, targets)), 0);
}

inline Tensor l1_loss(const Tensor& predictions, std::span<const float> targets) {
  if (targets.empty()) throw std::invalid_argument("l1_loss: empty batch");
  return l1_loss(predictions, Tensor({targets.size()}, std::vector<float>(targets.begin(), targets.end())));
}

}  // namespace transcrowd
