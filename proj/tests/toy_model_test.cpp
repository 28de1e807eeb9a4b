#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "residual_lens/error.hpp"
#include "residual_lens/spectral.hpp"
#include "residual_lens/toy_model.hpp"

using namespace residual_lens;

namespace {

void expect_kind(ErrorKind kind, const auto& fn) {
  try {
    fn();
    FAIL() << "expected " << to_string(kind);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

ToyModelConfig small_config() {
  ToyModelConfig c;
  c.layers = 3;
  c.hidden_dim = 16;
  c.heads = 2;
  c.ff_dim = 32;
  c.vocab = 20;
  c.seed = 5;
  return c;
}

const std::vector<std::size_t> kPrompt{1, 7, 3, 3, 12, 0, 19, 4};

}  // namespace

TEST(ToyConfig, ParseAndValidate) {
  const auto c = parse_config(
      R"({"layers": 4, "hidden_dim": 32, "heads": 4, "ff_dim": 64, "vocab": 64, "positional": "none", "seed": 9})");
  EXPECT_EQ(c.layers, 4u);
  EXPECT_EQ(c.positional, Positional::None);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(parse_config(config_json(c)).hidden_dim, 32u);

  expect_kind(ErrorKind::BadConfig, [] { parse_config(R"({"hidden_dim": 8, "heads": 3})"); });
  expect_kind(ErrorKind::BadConfig, [] { parse_config(R"({"positional": "alibi"})"); });
  expect_kind(ErrorKind::BadConfig, [] { parse_config("not json"); });
  ToyModelConfig bad = small_config();
  bad.vocab = 1;
  expect_kind(ErrorKind::BadConfig, [&] { validate_config(bad); });
  bad = small_config();
  bad.hidden_dim = 6;
  bad.heads = 2;  // head dim 3 cannot be rotated
  expect_kind(ErrorKind::BadConfig, [&] { validate_config(bad); });
  bad.positional = Positional::None;
  EXPECT_NO_THROW(validate_config(bad));
}

TEST(ToyModel, DeterministicWeightsAndForward) {
  const ToyModel a(small_config()), b(small_config());
  EXPECT_EQ(a.weight_checksum(), b.weight_checksum());
  auto other = small_config();
  other.seed = 6;
  EXPECT_NE(a.weight_checksum(), ToyModel(other).weight_checksum());
  const Trace t1 = a.forward(kPrompt), t2 = a.forward(kPrompt);
  EXPECT_EQ(t1.hidden, t2.hidden);
  EXPECT_EQ(t1.attention, t2.attention);
}

TEST(ToyModel, TraceShape) {
  const Trace t = ToyModel(small_config()).forward(kPrompt);
  EXPECT_EQ(t.meta.layers, 3u);
  EXPECT_EQ(t.meta.tokens, kPrompt.size());
  EXPECT_EQ(t.meta.dim, 16u);
  EXPECT_EQ(t.meta.heads, 2u);
  EXPECT_TRUE(t.meta.has_attention);
  EXPECT_EQ(t.hidden.size(), 4u);
  EXPECT_EQ(t.attention.size(), 3u);
  EXPECT_NO_THROW(validate_trace(t));
}

TEST(ToyModel, AttentionIsCausalAndRowStochastic) {
  ToyModelConfig c;  // L=4, d=32, H=4, ff=64, vocab=64, seed=1
  const Trace t = ToyModel(c).forward(std::vector<std::size_t>{5, 9, 63, 0, 17, 17, 2, 40, 33, 1});
  const std::size_t T = t.meta.tokens;
  for (const auto& layer : t.attention) {
    for (std::size_t h = 0; h < t.meta.heads; ++h) {
      for (std::size_t i = 0; i < T; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          const float v = layer[(h * T + i) * T + j];
          if (j > i) EXPECT_EQ(v, 0.0f);
          sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-5);
      }
    }
  }
}

TEST(ToyModel, Causality) {
  const ToyModel m(small_config());
  auto changed = kPrompt;
  changed[5] = 11;
  const Trace a = m.forward(kPrompt), b = m.forward(changed);
  const std::size_t d = a.meta.dim;
  for (std::size_t l = 0; l < a.hidden.size(); ++l) {
    for (std::size_t k = 0; k < 5 * d; ++k) EXPECT_EQ(a.hidden[l][k], b.hidden[l][k]) << "layer " << l;
    bool later_differs = false;
    for (std::size_t k = 5 * d; k < a.hidden[l].size(); ++k) later_differs |= a.hidden[l][k] != b.hidden[l][k];
    EXPECT_TRUE(later_differs);
  }
}

TEST(ToyModel, MlpAblateIsLocalAtItsLayer) {
  const ToyModel m(small_config());
  const Trace base = m.forward(kPrompt);
  const std::vector<Intervention> iv{Intervention::mlp_ablate({1}, 2)};
  const Trace abl = m.forward(kPrompt, iv);
  const std::size_t d = base.meta.dim, T = base.meta.tokens;
  // Block 1 writes hidden layer 2.
  for (std::size_t l = 0; l <= 1; ++l) EXPECT_EQ(base.hidden[l], abl.hidden[l]);
  for (std::size_t t = 0; t < T; ++t) {
    bool differs = false;
    for (std::size_t j = 0; j < d; ++j) differs |= base.hidden[2][t * d + j] != abl.hidden[2][t * d + j];
    EXPECT_EQ(differs, t == 2) << "token " << t;
  }
}

TEST(ToyModel, InjectionEstablishesMassiveReference) {
  const ToyModel m(small_config());
  const Trace base = m.forward(kPrompt);
  const double mag = 500.0;
  const std::vector<Intervention> iv{Intervention::inject_massive(1, mag)};
  const Trace inj = m.forward(kPrompt, iv);
  const std::size_t d = base.meta.dim;
  double pre = 0.0, post = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    pre += static_cast<double>(base.hidden[2][j]) * base.hidden[2][j];
    post += static_cast<double>(inj.hidden[2][j]) * inj.hidden[2][j];
  }
  EXPECT_GE(post, mag * mag - 2.0 * mag * std::sqrt(pre));
  EXPECT_EQ(base.hidden[1], inj.hidden[1]);
  const auto s = alignment_stats(inj.hidden_matrix(2));
  EXPECT_GT(s.c, 100.0);
}

TEST(ToyModel, InjectionDirectionIsUnitAndSeeded) {
  const auto u = injection_direction(3, 16), v = injection_direction(3, 16), w = injection_direction(4, 16);
  EXPECT_EQ(u, v);
  EXPECT_NE(u, w);
  EXPECT_NEAR(std::inner_product(u.begin(), u.end(), u.begin(), 0.0), 1.0, 1e-12);
}

TEST(ToyModel, ForwardErrors) {
  const ToyModel m(small_config());
  expect_kind(ErrorKind::TokenOutOfRange, [&] { m.forward(std::vector<std::size_t>{1, 20}); });
  expect_kind(ErrorKind::InvalidArgument, [&] { m.forward(std::vector<std::size_t>{}); });
  const std::vector<Intervention> late{Intervention::inject_massive(3, 10.0)};
  expect_kind(ErrorKind::LayerOutOfRange, [&] { m.forward(kPrompt, late); });
  const std::vector<Intervention> neg{Intervention::inject_massive(0, -1.0)};
  expect_kind(ErrorKind::InvalidArgument, [&] { m.forward(kPrompt, neg); });
}

TEST(ToyModel, NoPositionalVariantRuns) {
  auto c = small_config();
  c.positional = Positional::None;
  const Trace t = ToyModel(c).forward(kPrompt);
  EXPECT_NO_THROW(validate_trace(t));
}
