// SPDX-License-Identifier: Apache-2.0
//
// Patch sequences -> token sequences: bias-free linear projection, optional
// regression token at index 0, learned 1-D position embeddings.

#pragma once

#include <vector>

#include "transcrowd/tensor.hpp"

namespace transcrowd {

struct EmbedParams {
  Tensor projection;  // [K*K*3, D]
  Tensor position;    // [S, D], S = N or N + 1
  Tensor reg_token;   // [1, D]; undefined for the GAP variant

  bool has_reg_token() const { return reg_token.defined(); }
};

// [B, N, K*K*3] x [K*K*3, D] -> [B, N, D]
inline Tensor linear_embed(const Tensor& patches, const Tensor& projection) {
  if (patches.rank() != 3 || projection.rank() != 2 || patches.dim(-1) != projection.dim(0)) {
    throw ShapeError("linear_embed: patches " + shape_str(patches.shape()) + " vs projection " +
                     shape_str(projection.shape()));
  }
  return matmul(patches, projection);
}

inline Tensor add_position(const Tensor& tokens, const Tensor& position) {
  if (tokens.rank() != 3 || position.shape() != Shape{tokens.dim(1), tokens.dim(2)}) {
    throw ShapeError("add_position: tokens " + shape_str(tokens.shape()) + " vs position " + shape_str(position.shape()));
  }
  return add(tokens, position);
}

// [B, N, D] -> [B, N + 1, D] with the regression token in front.
inline Tensor prepend_reg_token(const Tensor& tokens, const EmbedParams& params) {
  if (!params.has_reg_token()) throw std::logic_error("prepend_reg_token: GAP variant has no regression token");
  const Tensor& reg = params.reg_token;
  if (tokens.rank() != 3 || reg.shape() != Shape{1, tokens.dim(2)}) {
    throw ShapeError("prepend_reg_token: tokens " + shape_str(tokens.shape()) + " vs token " + shape_str(reg.shape()));
  }
  const std::size_t batch = tokens.dim(0);
  Tensor front = reshape(reg, {1, 1, tokens.dim(2)});
  if (batch > 1) front = concat(std::vector<Tensor>(batch, front), 0);
  return concat({front, tokens}, 1);
}

// Z_0 for a batch of patch sequences.
inline Tensor embed(const Tensor& patches, const EmbedParams& params) {
  Tensor tokens = linear_embed(patches, params.projection);
  if (params.has_reg_token()) tokens = prepend_reg_token(tokens, params);
  return add_position(tokens, params.position);
}

}  // namespace transcrowd
