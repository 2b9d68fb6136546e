#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mv2mae/errors.hpp"
#include "mv2mae/masking.hpp"
#include "mv2mae/rng.hpp"
#include "mv2mae/tokenizer.hpp"

using namespace mv2mae;

namespace {

ClipTensor random_clip(std::size_t c, std::size_t t, std::size_t h, std::size_t w, std::uint64_t seed) {
  auto clip = ClipTensor::zeros(c, t, h, w);
  KeyedRng rng{seed};
  for (auto& p : clip.pixels) p = static_cast<float>(rng.uniform());
  return clip;
}

}  // namespace

TEST(Tokenizer, PaperTokenCount) {
  PatchConfig pc{2, 16, 16, 16, 128, 128, 3};
  EXPECT_EQ(pc.num_tokens(), 512u);
  EXPECT_EQ(pc.patch_dim(), 1536u);
}

TEST(Tokenizer, TokenCountLaw) {
  const std::vector<PatchConfig> grid = {
      {2, 16, 16, 16, 128, 128, 3}, {2, 8, 8, 8, 32, 32, 3},   {1, 4, 4, 4, 16, 16, 3},  {4, 8, 8, 16, 64, 64, 3},
      {2, 16, 16, 16, 224, 224, 3}, {2, 4, 8, 8, 16, 32, 3},   {8, 16, 16, 16, 64, 64, 1}, {2, 2, 2, 2, 2, 2, 3},
      {1, 1, 1, 3, 5, 7, 1},        {3, 6, 10, 9, 36, 40, 3},  {2, 8, 4, 6, 24, 12, 3},  {16, 32, 32, 16, 128, 128, 3}};
  for (const auto& pc : grid) {
    const auto expected = (pc.frames / pc.t_patch) * (pc.height / pc.h_patch) * (pc.width / pc.w_patch);
    EXPECT_EQ(pc.num_tokens(), expected);
    const auto clip = random_clip(pc.channels, pc.frames, pc.height, pc.width, expected);
    const auto p = patchify<double>(clip, pc);
    EXPECT_EQ(p.shape(), (Shape{expected, pc.patch_dim()}));
    EXPECT_EQ(unpatchify(p, pc).pixels, clip.pixels);
  }
}

TEST(Tokenizer, NonDividingPatchRejected) {
  PatchConfig pc{2, 7, 7, 8, 32, 32, 3};
  EXPECT_THROW(pc.validate(), ConfigError);
}

TEST(Tokenizer, FirstPixelOfFirstPatch) {
  PatchConfig pc{2, 8, 8, 8, 32, 32, 3};
  const auto clip = random_clip(3, 8, 32, 32, 1);
  const auto p = patchify<float>(clip, pc);
  EXPECT_EQ(p.at({0, 0}), clip.at(0, 0, 0, 0));
  // Inside a patch the order is (dt, dy, dx, channel).
  EXPECT_EQ(p.at({0, 1}), clip.at(1, 0, 0, 0));
  EXPECT_EQ(p.at({0, 3}), clip.at(0, 0, 0, 1));
  EXPECT_EQ(p.at({1, 0}), clip.at(0, 0, 0, 8));
}

TEST(Tokenizer, PermutedRowsBreakRoundTrip) {
  PatchConfig pc{2, 8, 8, 4, 16, 16, 3};
  const auto clip = random_clip(3, 4, 16, 16, 2);
  const auto p = patchify<double>(clip, pc);
  std::vector<double> swapped(p.data().begin(), p.data().end());
  std::swap_ranges(swapped.begin(), swapped.begin() + 384, swapped.begin() + 384);
  EXPECT_NE(unpatchify(Tensor<double>(p.shape(), swapped), pc).pixels, clip.pixels);
}

TEST(Tokenizer, NormalizedTargets) {
  const auto y = normalize_patch_targets(Tensor<double>({3, 2}, {0, 1, 5, 5, 2, 6}));
  EXPECT_NEAR(y.at({0, 0}), -0.5 / (0.5 + 1e-6), 1e-12);
  EXPECT_NEAR(y.at({0, 1}), 0.5 / (0.5 + 1e-6), 1e-12);
  EXPECT_EQ(y.at({1, 0}), 0.0);
  EXPECT_EQ(y.at({1, 1}), 0.0);

  KeyedRng rng{3};
  std::vector<double> v(20 * 48);
  for (auto& x : v) x = rng.uniform();
  const auto z = normalize_patch_targets(Tensor<double>({20, 48}, v));
  for (std::size_t r = 0; r < 20; ++r) {
    double m = 0, s = 0;
    for (std::size_t j = 0; j < 48; ++j) m += z.at({r, j});
    m /= 48;
    for (std::size_t j = 0; j < 48; ++j) s += (z.at({r, j}) - m) * (z.at({r, j}) - m);
    EXPECT_LT(std::abs(m), 1e-6);
    const double sd = std::sqrt(s / 48);
    EXPECT_GE(sd, 1 - 1e-3);
    EXPECT_LE(sd, 1.0);
  }
}

TEST(Tokenizer, StandardizeMapsUnitRange) {
  const auto y = standardize_pixels(Tensor<double>({3}, {0, 0.5, 1}));
  EXPECT_EQ(y.data()[0], -1.0);
  EXPECT_EQ(y.data()[1], 0.0);
  EXPECT_EQ(y.data()[2], 1.0);
}

TEST(PositionalEmbedding, Values) {
  const auto pe = sinusoidal_pos_embed<double>(10, 8);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(pe.at({0, 2 * i}), 0.0);
    EXPECT_EQ(pe.at({0, 2 * i + 1}), 1.0);
  }
  EXPECT_NEAR(pe.at({1, 0}), std::sin(1.0), 1e-15);
  EXPECT_NEAR(pe.at({3, 2}), std::sin(3.0 / std::pow(10000.0, 2.0 / 8)), 1e-15);
  for (double v : pe.data()) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_ANY_THROW(sinusoidal_pos_embed<double>(4, 7));
}

TEST(Embedding, ZeroPatchesGivePositions) {
  const auto pos = sinusoidal_pos_embed<double>(4, 6);
  const auto tb = embed_tokens(Tensor<double>::zeros({1, 4, 5}), Tensor<double>::full({5, 6}, 0.3),
                               Tensor<double>::zeros({6}), pos);
  EXPECT_EQ(std::vector<double>(tb.tokens.data().begin(), tb.tokens.data().end()),
            std::vector<double>(pos.data().begin(), pos.data().end()));
  EXPECT_EQ(tb.token_index.front(), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Embedding, AffineInPatches) {
  KeyedRng rng{6};
  std::vector<double> pv(2 * 3 * 4), wv(4 * 6), bv(6);
  for (auto& x : pv) x = rng.normal();
  for (auto& x : wv) x = rng.normal();
  for (auto& x : bv) x = rng.normal();
  const Tensor<double> w({4, 6}, wv), b({6}, bv);
  const auto pos = sinusoidal_pos_embed<double>(3, 6);
  const double alpha = 2.5;
  std::vector<double> scaled(pv);
  for (auto& x : scaled) x *= alpha;
  const auto e0 = embed_tokens(Tensor<double>::zeros({2, 3, 4}), w, b, pos).tokens;
  const auto e1 = embed_tokens(Tensor<double>({2, 3, 4}, pv), w, b, pos).tokens;
  const auto e2 = embed_tokens(Tensor<double>({2, 3, 4}, scaled), w, b, pos).tokens;
  for (std::size_t i = 0; i < e0.numel(); ++i) {
    EXPECT_NEAR(e2.data()[i] - e0.data()[i], alpha * (e1.data()[i] - e0.data()[i]), 1e-12);
  }
}

TEST(Embedding, WeightGradientMatchesFiniteDifferences) {
  KeyedRng rng{7};
  std::vector<double> pv(2 * 3 * 4), wv(4 * 6);
  for (auto& x : pv) x = rng.normal();
  for (auto& x : wv) x = rng.normal();
  const Tensor<double> patches({2, 3, 4}, pv), bias = Tensor<double>::full({6}, 0.1);
  const auto pos = sinusoidal_pos_embed<double>(3, 6);
  auto w = Tensor<double>({4, 6}, wv, true);
  auto f = [&](const Tensor<double>& weight) { return sum(square(gelu(embed_tokens(patches, weight, bias, pos).tokens))); };
  backward(f(w));
  const auto numeric = finite_diff_grad(
      [&](std::span<const double> t) { return f(Tensor<double>({4, 6}, {t.begin(), t.end()})).item(); }, wv, 1e-5);
  EXPECT_LT(relative_error(w.grad(), numeric), 1e-6);
}

TEST(Masking, PaperSplit) {
  const auto plan = random_mask(512, 0.7, {1, 2, 3, 0});
  EXPECT_EQ(plan.masked.size(), 358u);
  EXPECT_EQ(plan.visible.size(), 154u);
}

TEST(Masking, HalfSplitAndDeterminism) {
  const auto a = random_mask(64, 0.5, {9, 1, 0, 0});
  const auto b = random_mask(64, 0.5, {9, 1, 0, 0});
  EXPECT_EQ(a.masked.size(), 32u);
  EXPECT_EQ(a.visible.size(), 32u);
  EXPECT_EQ(a.masked, b.masked);
  EXPECT_NE(a.masked, random_mask(64, 0.5, {9, 1, 0, 1}).masked);
}

TEST(Masking, PartitionProperty) {
  KeyedRng rng{17};
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + rng.below(599);
    const double rho = rng.uniform(0.05, 0.95);
    const auto p = random_mask(n, rho, {static_cast<std::uint64_t>(i), 0, 0, 0});
    const auto want = static_cast<std::size_t>(std::floor(rho * static_cast<double>(n)));
    if (want == 0) continue;
    ASSERT_EQ(p.masked.size(), want);
    std::set<std::size_t> all(p.masked.begin(), p.masked.end());
    all.insert(p.visible.begin(), p.visible.end());
    ASSERT_EQ(all.size(), n);
    ASSERT_EQ(p.masked.size() + p.visible.size(), n);
    ASSERT_TRUE(std::is_sorted(p.masked.begin(), p.masked.end()));
    ASSERT_TRUE(std::is_sorted(p.visible.begin(), p.visible.end()));
  }
}

TEST(Masking, InvalidRatioRejected) {
  EXPECT_THROW(random_mask(64, 0.0, {}), ConfigError);
  EXPECT_THROW(random_mask(64, 1.0, {}), ConfigError);
  EXPECT_THROW(random_mask(1, 0.5, {}), ConfigError);
}

TEST(Masking, FrequencyNearRho) {
  std::vector<int> hits(64, 0);
  const int trials = 10000;
  for (int i = 0; i < trials; ++i)
    for (auto m : random_mask(64, 0.7, {0, static_cast<std::uint64_t>(i), 0, 0}).masked) ++hits[m];
  const double p = 44.0 / 64.0;
  const double sigma = std::sqrt(trials * p * (1 - p));
  double chi2 = 0;
  for (int h : hits) {
    const double z = (h - trials * p) / sigma;
    EXPECT_LT(std::abs(z), 4.5);
    chi2 += z * z;
  }
  // 63 degrees of freedom; mean 63, sd ~11.2.
  EXPECT_LT(chi2, 63 + 5 * std::sqrt(126.0));
}

TEST(Masking, TubeCounts) {
  const auto plan = tube_mask({4, 4, 4}, 0.5, {1, 0, 0, 0});
  EXPECT_EQ(plan.masked.size(), 32u);
  EXPECT_EQ(plan.visible.size(), 32u);
}

TEST(Masking, TubeTemporalConstancy) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto plan = tube_mask({8, 4, 6}, 0.7, {s, 0, 0, 0});
    std::set<std::size_t> masked(plan.masked.begin(), plan.masked.end());
    for (std::size_t cell = 0; cell < 24; ++cell) {
      const bool first = masked.count(cell) != 0;
      for (std::size_t t = 1; t < 8; ++t) ASSERT_EQ(masked.count(t * 24 + cell) != 0, first);
    }
  }
}

TEST(Masking, SplitKeepsAscendingVisibleTokens) {
  MaskPlan plan;
  plan.num_tokens = 4;
  plan.masked = {1, 3};
  plan.visible = {0, 2};
  TokenBatch<double> all;
  all.tokens = Tensor<double>({1, 4, 2}, {0, 0, 1, 1, 2, 2, 3, 3});
  all.token_index = {{0, 1, 2, 3}};
  all.view_id = {0};
  const auto split = split_tokens(all, {plan});
  EXPECT_EQ(split.visible.token_index.front(), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(split.visible.tokens.at({0, 1, 0}), 2.0);
  EXPECT_EQ(split.masked.front(), (std::vector<std::size_t>{1, 3}));
  const auto order = reassembled_order(split.visible.token_index.front(), plan);
  EXPECT_EQ(order, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Masking, EmptyMaskedSetInvalid) {
  MaskPlan plan;
  plan.num_tokens = 2;
  plan.visible = {0, 1};
  TokenBatch<double> all;
  all.tokens = Tensor<double>::zeros({1, 2, 1});
  all.token_index = {{0, 1}};
  all.view_id = {0};
  EXPECT_ANY_THROW(split_tokens(all, {plan}));
}
