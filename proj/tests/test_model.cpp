#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <numeric>

#include "atsg/model.hpp"
#include "atsg/model_check.hpp"
#include "atsg/rng.hpp"

using namespace atsg;

namespace {

Tensor random_block(const Hyperparams& hp, std::uint64_t seed) {
  Rng rng(seed);
  Tensor b(Shape{hp.W, hp.W, hp.W, hp.c});
  for (auto& x : b.data()) x = rng.normal();
  return b;
}

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t(Shape{r, c});
  for (auto& x : t.data()) x = rng.normal();
  return t;
}

}  // namespace

TEST(Partition, VoxelGoesToItsPatchAndOffset) {
  Hyperparams hp = Hyperparams::tiny();  // W=6, n=3, w=2
  hp.c = 2;
  Tensor block(Shape{6, 6, 6, 2});
  for (std::size_t i = 0; i < block.size(); ++i) block[i] = static_cast<double>(i);
  auto patches = partition_block(block, hp);
  ASSERT_EQ(patches.size(), 27u);
  for (const auto& p : patches) ASSERT_EQ(p.size(), 16u);
  // voxel (x,y,z,ch) lives in patch (x/w,y/w,z/w) at offset ((x%w, y%w, z%w), ch)
  for (std::size_t x = 0; x < 6; ++x)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t z = 0; z < 6; ++z)
        for (std::size_t ch = 0; ch < 2; ++ch) {
          const std::size_t j = ((x / 2) * 3 + y / 2) * 3 + z / 2;
          const std::size_t off = (((x % 2) * 2 + y % 2) * 2 + z % 2) * 2 + ch;
          EXPECT_EQ(patches[j][off], block[((x * 6 + y) * 6 + z) * 2 + ch]);
        }
}

TEST(Partition, RoundTripIsIdentityProperty) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Hyperparams hp = Hyperparams::tiny();
    hp.W = (s % 2) ? 15 : 6;
    hp.n = (s % 2) ? 5 : 3;
    hp.c = 1 + s % 3;
    Tensor b = random_block(hp, s);
    Tensor back = unpartition_block(partition_block(b, hp), hp);
    EXPECT_EQ(std::vector<double>(b.data().begin(), b.data().end()),
              std::vector<double>(back.data().begin(), back.data().end()));
  }
}

TEST(Partition, IndivisibleBlockIsConfigError) {
  Hyperparams hp;
  hp.W = 25;
  hp.n = 3;
  EXPECT_THROW(hp.validate(), ConfigError);
  EXPECT_THROW(init_weights(hp, 0), ConfigError);
  hp.W = 24;
  hp.n = 4;
  EXPECT_THROW(hp.validate(), ConfigError);
}

TEST(Partition, WrongBlockShapeIsDimensionError) {
  Hyperparams hp = Hyperparams::tiny();
  EXPECT_THROW(partition_block(Tensor(Shape{6, 6, 5, 1}), hp), DimensionError);
}

TEST(Embedding, WrongPatchLengthIsConfigError) {
  Hyperparams hp = Hyperparams::tiny();
  auto m = init_weights(hp, 0);
  std::vector<std::vector<double>> patches(27, std::vector<double>(7));
  Tape off(false);
  EXPECT_THROW(embed_sequence(off, patches, m), ConfigError);
}

// Counts produced by tests/oracles/param_count.py, which enumerates every
// tensor shape independently of the library.
TEST(ParameterCount, MatchesIndependentEnumeration) {
  struct Case {
    const char* name;
    Hyperparams hp;
    std::size_t expected;
  };
  const Hyperparams tiny = Hyperparams::tiny();
  auto with = [&](auto f) {
    Hyperparams h = tiny;
    f(h);
    return h;
  };
  std::vector<Case> cases = {
      {"tiny", tiny, 4616},
      {"tiny_patch", with([](Hyperparams& h) { h.head_mode = HeadMode::patch; }), 1162},
      {"tiny_nopos", with([](Hyperparams& h) { h.pos_mode = PosMode::none; }), 4400},
      {"tiny_fixedpos", with([](Hyperparams& h) { h.pos_mode = PosMode::fixed_sinusoidal; }), 4400},
      {"tiny_normoff", with([](Hyperparams& h) { h.norm = NormMode::off; }), 4552},
      {"tiny_dff", with([](Hyperparams& h) {
         h.D_ff = 20;
         h.n_class = 3;
         h.c = 2;
       }),
       6824},
  };
  for (const auto& c : cases) {
    EXPECT_EQ(expected_parameter_count(c.hp), c.expected) << c.name;
    EXPECT_EQ(init_weights(c.hp, 1).parameter_count(), c.expected) << c.name;
  }
  Hyperparams full = Hyperparams::paper_defaults();
  EXPECT_EQ(expected_parameter_count(full), 72947712u);
  full.n = 5;
  full.W = 40;
  EXPECT_EQ(expected_parameter_count(full), 175808512u);
}

TEST(ParameterCount, FullScaleAllocationMatchesClosedForm) {
  auto m = init_weights(Hyperparams::paper_defaults(), 0);
  EXPECT_EQ(m.parameter_count(), 72947712u);
}

TEST(Init, SameSeedSameWeightsDifferentSeedDiffers) {
  Hyperparams hp = Hyperparams::tiny();
  auto a = init_weights(hp, 5), b = init_weights(hp, 5), c = init_weights(hp, 6);
  auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    for (std::size_t j = 0; j < pa[i].second.size(); ++j) {
      EXPECT_EQ(pa[i].second[j], pb[i].second[j]);
      any_diff |= pa[i].second[j] != pc[i].second[j];
    }
  }
  EXPECT_TRUE(any_diff);
}

TEST(Init, GlorotBoundsAndZeroBiases) {
  Hyperparams hp = Hyperparams::tiny();
  auto m = init_weights(hp, 3);
  const double lim = std::sqrt(6.0 / (hp.D_h + hp.D));
  for (double v : m.stages[0].heads[0].E_Q.data()) EXPECT_LE(std::abs(v), lim);
  for (double v : m.stages[1].b_1.data()) EXPECT_EQ(v, 0.0);
  for (double v : m.E_pos.data()) EXPECT_EQ(v, 0.0);
  for (double v : m.stages[0].msa_gamma.data()) EXPECT_EQ(v, 1.0);
}

TEST(Heads, ZeroOutputWeightsGiveUniformProbabilities) {
  Hyperparams hp = Hyperparams::tiny();
  auto m = init_weights(hp, 0);
  for (auto& v : m.seg_head->weight.data()) v = 0.0;
  Tape off(false);
  Tensor p = forward(off, random_block(hp, 1), m).output;
  EXPECT_EQ(p.shape(), (Shape{2, 2, 2, 2}));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Heads, ZeroPretrainingWeightsReturnTheBias) {
  Hyperparams hp = Hyperparams::tiny();
  auto m = init_weights(hp, 0);
  attach_pretraining_head(m, 1);
  for (auto& v : m.pre_head->weight.data()) v = 0.0;
  for (std::size_t i = 0; i < m.pre_head->bias.size(); ++i) m.pre_head->bias[i] = 0.25 * static_cast<double>(i);
  Tape off(false);
  Tensor r = forward(off, random_block(hp, 1), m, false, OutputKind::pretraining).output;
  EXPECT_EQ(r.shape(), (Shape{2, 2, 2, 1}));
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_DOUBLE_EQ(r[i], 0.25 * static_cast<double>(i));
  EXPECT_EQ(m.pre_head->weight.shape(), (Shape{8, 8 * 27}));
}

TEST(Heads, PatchModeGivesOneDistributionPerPatch) {
  Hyperparams hp = Hyperparams::tiny();
  hp.head_mode = HeadMode::patch;
  hp.n_class = 3;
  auto m = init_weights(hp, 2);
  Tape off(false);
  Tensor p = forward(off, random_block(hp, 3), m).output;
  ASSERT_EQ(p.shape(), (Shape{3, 3, 3, 3}));
  for (std::size_t j = 0; j < 27; ++j) EXPECT_NEAR(p[3 * j] + p[3 * j + 1] + p[3 * j + 2], 1.0, 1e-12);
}

TEST(Heads, MissingHeadIsContractError) {
  Hyperparams hp = Hyperparams::tiny();
  auto m = init_weights(hp, 0);
  Tape off(false);
  EXPECT_THROW(forward(off, random_block(hp, 0), m, false, OutputKind::pretraining), ContractError);
  m.seg_head.reset();
  EXPECT_THROW(forward(off, random_block(hp, 0), m), ContractError);
}

TEST(Ffn, ZeroWeightsAreIdentityWithoutNorm) {
  Hyperparams hp = Hyperparams::tiny();
  hp.norm = NormMode::off;
  auto m = init_weights(hp, 0);
  auto& s = m.stages[0];
  for (Tensor* t : {&s.E_1, &s.E_2}) std::fill(t->data().begin(), t->data().end(), 0.0);
  Rng rng(1);
  Tensor X = random_matrix(rng, hp.D, 27);
  Tape off(false);
  Tensor Y = ffn(off, X, s, hp);
  for (std::size_t i = 0; i < X.size(); ++i) EXPECT_EQ(Y[i], X[i]);
}

TEST(Ffn, HandComputedSingleColumn) {
  Hyperparams hp = Hyperparams::tiny();
  hp.D = 2;
  hp.norm = NormMode::off;
  auto m = init_weights(hp, 0);
  auto& s = m.stages[0];
  s.E_1 = Tensor(Shape{2, 2}, {1, 0, 0, 1});
  s.b_1 = Tensor(Shape{2}, {0, -10});
  s.E_2 = Tensor(Shape{2, 2}, {2, 0, 0, 3});
  s.b_2 = Tensor(Shape{2}, {0.5, 0.5});
  Tensor X(Shape{2, 1}, {1.0, 2.0});
  Tape off(false);
  Tensor Y = ffn(off, X, s, hp);
  // hidden = relu([1, 2-10]) = [1, 0]; out = X + [2, 0] + 0.5
  EXPECT_DOUBLE_EQ(Y[0], 3.5);
  EXPECT_DOUBLE_EQ(Y[1], 2.5);
}

TEST(Attention, SingleTokenAttendsToItself) {
  Hyperparams hp = Hyperparams::tiny();
  hp.W = 2;
  hp.n = 1;
  auto m = init_weights(hp, 0);
  Tape off(false);
  auto r = forward(off, random_block(hp, 1), m, true);
  ASSERT_TRUE(r.attention);
  for (const auto& stage : r.attention->A)
    for (const auto& A : stage) {
      ASSERT_EQ(A.shape(), (Shape{1, 1}));
      EXPECT_EQ(A[0], 1.0);
    }
}

TEST(Attention, IdenticalTokensGiveUniformRows) {
  Hyperparams hp = Hyperparams::tiny();
  hp.pos_mode = PosMode::none;
  auto m = init_weights(hp, 4);
  Tensor block(Shape{6, 6, 6, 1});
  for (std::size_t i = 0; i < block.size(); ++i) block[i] = static_cast<double>(i % 2);  // every patch alike
  Tape off(false);
  auto r = forward(off, block, m, true);
  for (const auto& stage : r.attention->A)
    for (const auto& A : stage)
      for (double v : A.data()) EXPECT_NEAR(v, 1.0 / 27.0, 1e-12);
}

TEST(Attention, HandComputedTwoTokens) {
  // D=D_h=1, one head, E_Q=E_K=E_V=1, X=[0, ln 2]: logits QᵀK = [[0,0],[0,ln²2]]
  Hyperparams hp = Hyperparams::tiny();
  hp.D = 1;
  hp.D_h = 1;
  hp.n_h = 1;
  hp.norm = NormMode::off;
  auto m = init_weights(hp, 0);
  auto& s = m.stages[0];
  for (Tensor* t : {&s.heads[0].E_Q, &s.heads[0].E_K, &s.heads[0].E_V, &s.E_reproj}) t->data()[0] = 1.0;
  const double l = std::log(2.0);
  Tensor X(Shape{1, 2}, {0.0, l});
  std::vector<Tensor> att;
  Tape off(false);
  Tensor Y = msa(off, X, s, hp, &att);
  ASSERT_EQ(att.size(), 1u);
  const double e = std::exp(l * l);
  EXPECT_NEAR(att[0].at(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(att[0].at(1, 1), e / (1 + e), 1e-15);
  EXPECT_NEAR(Y[0], 0.0 + 0.5 * l, 1e-15);
  EXPECT_NEAR(Y[1], l + l * e / (1 + e), 1e-15);
}

// Without positional encoding the encoder commutes with any reordering of the
// tokens.
TEST(Attention, PermutationEquivarianceProperty) {
  Hyperparams hp = Hyperparams::tiny();
  hp.pos_mode = PosMode::none;
  auto m = init_weights(hp, 9);
  Rng rng(10);
  const std::size_t N = hp.N();
  Tensor X = random_matrix(rng, hp.D, N);
  Tape off(false);
  Tensor Y = encode(off, X, m);
  std::vector<std::size_t> perm(N);
  std::iota(perm.begin(), perm.end(), 0);
  for (int t = 0; t < 20; ++t) {
    for (std::size_t i = N - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
    Tensor Xp(Shape{hp.D, N});
    for (std::size_t r = 0; r < hp.D; ++r)
      for (std::size_t j = 0; j < N; ++j) Xp.at(r, j) = X.at(r, perm[j]);
    Tensor Yp = encode(off, Xp, m);
    for (std::size_t r = 0; r < hp.D; ++r)
      for (std::size_t j = 0; j < N; ++j) EXPECT_NEAR(Yp.at(r, j), Y.at(r, perm[j]), 1e-10);
  }
}

TEST(Attention, LearnedPositionsBreakEquivariance) {
  Hyperparams hp = Hyperparams::tiny();
  auto m = init_weights(hp, 9);
  Rng rng(11);
  for (auto& v : m.E_pos.data()) v = rng.normal();
  Tensor block = random_block(hp, 12);
  auto patches = partition_block(block, hp);
  auto swapped = patches;
  std::swap(swapped[0], swapped[26]);
  Tape off(false);
  Tensor a = encode(off, embed_sequence(off, patches, m).tokens, m);
  Tensor b = encode(off, embed_sequence(off, swapped, m).tokens, m);
  double diff = 0.0;
  for (std::size_t r = 0; r < hp.D; ++r) diff += std::abs(a.at(r, 0) - b.at(r, 26));
  EXPECT_GT(diff, 1e-6);
}

TEST(Forward, DeterministicForFixedWeightsAndInput) {
  Hyperparams hp = Hyperparams::tiny();
  auto m = init_weights(hp, 1);
  Tensor block = random_block(hp, 2);
  Tape off(false);
  Tensor a = forward(off, block, m).output, b = forward(off, block, m).output;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Forward, SinusoidalEncodingRows) {
  Tensor P = sinusoidal_encoding(4, 3);
  EXPECT_DOUBLE_EQ(P.at(0, 2), std::sin(2.0));
  EXPECT_DOUBLE_EQ(P.at(1, 2), std::cos(2.0));
  EXPECT_DOUBLE_EQ(P.at(2, 1), std::sin(1.0 / 100.0));
  EXPECT_DOUBLE_EQ(P.at(3, 0), 1.0);
}

TEST(Forward, FullScaleShapesAndAttention) {
  const Hyperparams hp = Hyperparams::paper_defaults();
  auto m = init_weights(hp, 0);
  Tape off(false);
  const auto t0 = std::chrono::steady_clock::now();
  auto r = forward(off, random_block(hp, 1), m, true);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 60.0);
  ASSERT_EQ(r.output.shape(), (Shape{8, 8, 8, 2}));
  for (std::size_t v = 0; v < 512; ++v) EXPECT_NEAR(r.output[2 * v] + r.output[2 * v + 1], 1.0, 1e-6);
  ASSERT_EQ(r.attention->A.size(), 7u);
  for (const auto& stage : r.attention->A) {
    ASSERT_EQ(stage.size(), 4u);
    for (const auto& A : stage) {
      ASSERT_EQ(A.shape(), (Shape{27, 27}));
      for (std::size_t i = 0; i < 27; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 27; ++j) s += A.at(i, j);
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(Config, JsonRoundTripAndUnknownKey) {
  Hyperparams hp = Hyperparams::tiny();
  hp.pos_mode = PosMode::fixed_sinusoidal;
  hp.norm = NormMode::pre;
  nlohmann::json j = hp;
  EXPECT_EQ(j.get<Hyperparams>(), hp);
  EXPECT_EQ(j["pos_mode"], "fixed-sinusoidal");
  EXPECT_THROW(nlohmann::json({{"Kk", 3}}).get<Hyperparams>(), ConfigError);
}

// Full-model gradients for each head and norm placement. h=1e-5 keeps the
// central difference away from ReLU and argmax kinks.
TEST(ModelGradients, MatchFiniteDifferences) {
  for (NormMode norm : {NormMode::post, NormMode::pre, NormMode::off}) {
    Hyperparams hp = Hyperparams::tiny();
    hp.norm = norm;
    auto r = model_grad_check(hp, 0, 1e-5);
    EXPECT_LT(r.segmentation.max_rel_error, 1e-4) << nlohmann::json(norm);
    EXPECT_LT(r.pretraining.max_rel_error, 1e-4) << nlohmann::json(norm);
    EXPECT_EQ(r.segmentation.coordinates, init_weights(hp, 0).parameter_count());
  }
  Hyperparams hp = Hyperparams::tiny();
  hp.head_mode = HeadMode::patch;
  hp.n_class = 3;
  auto r = model_grad_check(hp, 1, 1e-5);
  EXPECT_LT(r.segmentation.max_rel_error, 1e-4);
}
