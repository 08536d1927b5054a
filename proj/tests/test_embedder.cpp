// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "transcrowd/config.hpp"
#include "transcrowd/embedder.hpp"
#include "transcrowd/model.hpp"
#include "transcrowd/rng.hpp"

using namespace transcrowd;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(shape);
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

}  // namespace

TEST(LinearEmbed, ZeroProjection) {
  const Tensor out = linear_embed(random_tensor({2, 3, 12}, 1), Tensor({12, 4}, 0.0f));
  for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(LinearEmbed, OneHotSelectsARow) {
  const Tensor e = random_tensor({6, 4}, 2);
  Tensor patch({1, 1, 6}, 0.0f);
  patch.mutable_data()[3] = 1.0f;
  const Tensor out = linear_embed(patch, e);
  for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(out.at({0, 0, d}), e.at({3, d}));
}

TEST(LinearEmbed, ShapeContract) {
  EXPECT_EQ(linear_embed(Tensor({2, 5, 768}), Tensor({768, 64})).shape(), (Shape{2, 5, 64}));
  EXPECT_THROW(linear_embed(Tensor({2, 5, 767}), Tensor({768, 64})), ShapeError);
}

TEST(LinearEmbed, IsLinear) {
  const Tensor x = random_tensor({1, 4, 6}, 3);
  const Tensor e = random_tensor({6, 5}, 4);
  const Tensor a = linear_embed(scale(x, 2.0f), e);
  const Tensor b = scale(linear_embed(x, e), 2.0f);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_FLOAT_EQ(a.data()[i], b.data()[i]);
}

TEST(AddPosition, ZeroPositionIsIdentity) {
  const Tensor e = random_tensor({2, 3, 4}, 5);
  const Tensor z = add_position(e, Tensor({3, 4}, 0.0f));
  EXPECT_TRUE(std::equal(z.data().begin(), z.data().end(), e.data().begin()));
}

TEST(AddPosition, ZeroTokensReplicatePositions) {
  const Tensor pos = random_tensor({3, 4}, 6);
  const Tensor z = add_position(Tensor({2, 3, 4}, 0.0f), pos);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(z.at({b, s, d}), pos.at({s, d}));
}

TEST(AddPosition, DifferencesDecompose) {
  const Tensor e = random_tensor({1, 3, 4}, 7);
  const Tensor pos = random_tensor({3, 4}, 8);
  const Tensor z = add_position(e, pos);
  for (std::size_t d = 0; d < 4; ++d) {
    const float lhs = z.at({0, 0, d}) - z.at({0, 2, d});
    const float rhs = (e.at({0, 0, d}) - e.at({0, 2, d})) + (pos.at({0, d}) - pos.at({2, d}));
    EXPECT_NEAR(lhs, rhs, 1e-6);
  }
}

TEST(AddPosition, LengthMismatch) { EXPECT_THROW(add_position(Tensor({1, 3, 4}), Tensor({4, 4})), ShapeError); }

TEST(RegToken, PrependedAndInputPreserved) {
  EmbedParams p;
  p.reg_token = random_tensor({1, 4}, 9);
  const Tensor e = random_tensor({3, 2, 4}, 10);
  const Tensor out = prepend_reg_token(e, p);
  ASSERT_EQ(out.shape(), (Shape{3, 3, 4}));
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t d = 0; d < 4; ++d) {
      EXPECT_EQ(out.at({b, 0, d}), p.reg_token.at({0, d}));
      for (std::size_t s = 0; s < 2; ++s) EXPECT_EQ(out.at({b, s + 1, d}), e.at({b, s, d}));
    }
}

TEST(RegToken, GapVariantHasNone) {
  EmbedParams p;
  EXPECT_THROW(prepend_reg_token(Tensor({1, 2, 4}), p), std::logic_error);
}

TEST(RegToken, EmptySequenceIsUnrepresentable) { EXPECT_THROW(Tensor({1, 0, 4}), ShapeError); }

TEST(Embed, SequenceLengthPerVariant) {
  for (HeadVariant h : {HeadVariant::Gap, HeadVariant::Token}) {
    const Model m = init_model(ModelConfig::toy(h), 1);
    const Tensor z = embed(Tensor({2, 64, 192}, 0.1f), m.embed);
    EXPECT_EQ(z.shape(), (Shape{2, h == HeadVariant::Gap ? 64u : 65u, 64}));
  }
  ModelConfig c = ModelConfig::full_scale();
  EXPECT_EQ(c.seq_len(), 576u);
  c.head = HeadVariant::Token;
  EXPECT_EQ(c.tokens(), 577u);
}

TEST(Embed, RegTokenGetsItsOwnPositionRow) {
  const Model m = init_model(ModelConfig::toy(HeadVariant::Token), 2);
  const Tensor z = embed(Tensor({1, 64, 192}, 0.0f), m.embed);
  for (std::size_t d = 0; d < 64; ++d) EXPECT_EQ(z.at({0, 0, d}), m.embed.position.at({0, d}));
}

TEST(Init, ParameterShapesAndStatistics) {
  const Model m = init_model(ModelConfig::toy(HeadVariant::Token), 3);
  EXPECT_EQ(m.embed.projection.shape(), (Shape{192, 64}));
  EXPECT_EQ(m.embed.position.shape(), (Shape{65, 64}));
  for (float v : m.embed.reg_token.data()) EXPECT_EQ(v, 0.0f);
  for (float v : m.embed.projection.data()) EXPECT_LE(std::fabs(v), 0.04f);
  for (float v : m.layers[0].ln1_gamma.data()) EXPECT_EQ(v, 1.0f);
  EXPECT_EQ(m.layers[1].mlp_w1.shape(), (Shape{64, 256}));
}

TEST(Init, SeedDeterminesWeights) {
  const Model a = init_model(ModelConfig::toy(), 5), b = init_model(ModelConfig::toy(), 5),
              c = init_model(ModelConfig::toy(), 6);
  EXPECT_TRUE(std::equal(a.embed.projection.data().begin(), a.embed.projection.data().end(),
                         b.embed.projection.data().begin()));
  EXPECT_FALSE(std::equal(a.embed.projection.data().begin(), a.embed.projection.data().end(),
                          c.embed.projection.data().begin()));
}
