#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "evakit/flasheva.hpp"
#include "evakit/linalg.hpp"
#include "test_util.hpp"

using namespace evakit;
using evakit::testing::random_matrix;
using evakit::testing::random_problem;

namespace {

EvaConfig config(std::size_t w, std::size_t chunk, WindowMode mode = WindowMode::block_local, std::uint64_t seed = 3) {
  EvaConfig cfg;
  cfg.window = w;
  cfg.chunk = chunk;
  cfg.mode = mode;
  cfg.seed = seed;
  return cfg;
}

AugmentedKV augment(const AttentionProblem& p, const EvaConfig& cfg) {
  const auto parts = partition_all(p.queries(), cfg);
  const auto summaries = summarize_chunks(p.k, p.v, total_chunks(p.queries(), cfg), cfg);
  return build_augmented(p.k, p.v, parts, summaries);
}

}  // namespace

TEST(BuildAugmented, LastQueryOfEightTokensSeesSixRows) {
  const AttentionProblem p = random_problem(1, 8, 8, 3, 2);
  const EvaConfig cfg = config(4, 2);
  const AugmentedKV full = augment(p, cfg);
  EXPECT_EQ(full.mask.allowed_count(7), 6u);
  const auto summaries = summarize_chunks(p.k, p.v, 2, cfg);
  const AugmentedKV single = build_augmented_for_query(p.k, p.v, partition_sequence(7, cfg), summaries);
  EXPECT_EQ(single.k_tilde.rows(), 6u);
  EXPECT_EQ(single.local_rows, 4u);
  EXPECT_EQ(single.rfa_rows, 2u);
  EXPECT_EQ(single.origin[4], (RowTag{RowOrigin::rfa, 0}));
}

TEST(BuildAugmented, NoChunksLeavesKeysAndValues) {
  const AttentionProblem p = random_problem(2, 10, 10, 3, 2);
  const AugmentedKV aug = augment(p, config(16, 4));
  EXPECT_EQ(aug.rfa_rows, 0u);
  EXPECT_EQ(aug.k_tilde, p.k);
  EXPECT_EQ(aug.v_tilde, p.v);
}

TEST(BuildAugmented, SingletonChunksCopyEarlyValues) {
  const AttentionProblem p = random_problem(3, 8, 8, 3, 2);
  const AugmentedKV aug = augment(p, config(4, 1));
  ASSERT_EQ(aug.rfa_rows, 4u);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(aug.v_tilde(8 + c, j), p.v(c, j));
}

TEST(BuildAugmented, MaskAllowsLocalsPlusPrecedingChunks) {
  const AttentionProblem p = random_problem(4, 40, 40, 3, 2);
  for (WindowMode mode : {WindowMode::block_local, WindowMode::sliding_chunk_aligned}) {
    const EvaConfig cfg = config(8, 4, mode);
    const AugmentedKV aug = augment(p, cfg);
    for (std::size_t n = 0; n < 40; ++n) {
      const Partition part = partition_sequence(n, cfg);
      for (std::size_t r = 0; r < aug.k_tilde.rows(); ++r) {
        const RowTag tag = aug.origin[r];
        const bool expect = tag.origin == RowOrigin::local
                                ? tag.index >= part.local_begin && tag.index < part.local_end
                                : tag.index < part.chunk_count;
        ASSERT_EQ(aug.mask.allows(n, r), expect) << "n=" << n << " r=" << r;
      }
    }
  }
}

TEST(BuildAugmented, RejectsSummaryCountMismatch) {
  const AttentionProblem p = random_problem(5, 16, 16, 3, 2);
  const EvaConfig cfg = config(4, 2);
  const auto summaries = summarize_chunks(p.k, p.v, 3, cfg);
  EXPECT_THROW(build_augmented(p.k, p.v, partition_all(16, cfg), summaries), ShapeError);
}

TEST(FlashEvaAttn, EqualsDirectEva) {
  CounterRng rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t chunk = std::array<std::size_t, 3>{1, 4, 16}[rng.below(3)];
    const std::size_t w = chunk * (1 + rng.below(8));
    const std::size_t n = 1 + rng.below(200);
    const std::size_t d = rng.below(2) ? 16 : 64;
    const auto mode = rng.below(2) ? WindowMode::block_local : WindowMode::sliding_chunk_aligned;
    const AttentionProblem p = random_problem(200 + trial, n, n, d, 8, 1.0 / std::sqrt(static_cast<double>(d)));
    const EvaConfig cfg = config(w, chunk, mode, trial);
    ASSERT_LE(max_abs_diff(flasheva_attn(p, cfg, {32, 32}), eva_attn_direct(p, cfg)), 1e-10)
        << "n=" << n << " w=" << w << " chunk=" << chunk;
  }
}

TEST(FlashEvaAttn, WindowCoveringSequenceIsSoftmax) {
  const AttentionProblem p = random_problem(6, 50, 50, 4, 4);
  EXPECT_LE(max_rel_err(flasheva_attn(p, config(64, 16)), softmax_attn(p, Mask::causal(50))), 1e-12);
}

TEST(FlashEvaAttn, MainConfigOnLongSequenceIsRowStochastic) {
  // Constant values make the output the row's total weight.
  AttentionProblem p = random_problem(7, 2048, 2048, 16, 1, 0.25);
  p.v.fill(1.0);
  const Matrix out = flasheva_attn(p, config(256, 16));
  for (double x : out.storage()) ASSERT_NEAR(x, 1.0, 1e-12);
}

TEST(FlashEvaAttn, AugmentedWeightsSumToOne) {
  const AttentionProblem p = random_problem(8, 48, 48, 4, 2, 0.5);
  const EvaConfig cfg = config(8, 4);
  const AugmentedKV aug = augment(p, cfg);
  const Matrix w = attention_weights(AttentionProblem{p.q, aug.k_tilde, aug.v_tilde, p.scale}, aug.mask);
  for (std::size_t n = 0; n < 48; ++n) {
    double s = 0.0;
    for (double x : w.row(n)) s += x;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(FlashEvaAttn, OutputIgnoresRowsOutsideTheMask) {
  const AttentionProblem p = random_problem(9, 40, 40, 4, 3);
  const EvaConfig cfg = config(8, 4, WindowMode::sliding_chunk_aligned);
  const AugmentedKV aug = augment(p, cfg);
  const AttentionProblem base{p.q, aug.k_tilde, aug.v_tilde, p.scale};
  const Matrix ref = tiled_softmax_attn(base, aug.mask);
  CounterRng rng(10);
  for (std::size_t n = 0; n < 40; n += 3) {
    AttentionProblem fuzzed = base;
    for (std::size_t r = 0; r < aug.k_tilde.rows(); ++r) {
      if (aug.mask.allows(n, r)) continue;
      for (double& x : fuzzed.k.row(r)) x = 50.0 * rng.normal();
      for (double& x : fuzzed.v.row(r)) x = 1e6 * rng.normal();
    }
    const Matrix out = tiled_softmax_attn(fuzzed, aug.mask);
    for (std::size_t j = 0; j < 3; ++j) ASSERT_EQ(out(n, j), ref(n, j));
  }
}

TEST(FlashEvaAttn, ScoresPerQueryAreLocalsPlusChunks) {
  const AttentionProblem p = random_problem(11, 300, 300, 4, 2);
  for (WindowMode mode : {WindowMode::block_local, WindowMode::sliding_chunk_aligned}) {
    const EvaConfig cfg = config(32, 8, mode);
    AttnStats stats;
    flasheva_attn(p, cfg, {16, 16}, &stats);
    for (std::size_t n = 0; n < 300; ++n) {
      ASSERT_EQ(stats.scores_per_query[n], partition_sequence(n, cfg).attended_rows());
      if (n > 64) ASSERT_LT(stats.scores_per_query[n], n + 1);
    }
  }
}

TEST(FlashEvaBackward, ZeroUpstreamGivesZeroGrads) {
  const AttentionProblem p = random_problem(12, 16, 16, 4, 2);
  const AttentionGrads g = flasheva_backward(p, config(4, 2), Matrix(16, 2));
  for (const Matrix* m : {&g.dq, &g.dk, &g.dv})
    for (double x : m->storage()) EXPECT_EQ(x, 0.0);
}

TEST(FlashEvaBackward, DegenerateWindowMatchesSoftmaxBackward) {
  const AttentionProblem p = random_problem(13, 20, 20, 4, 3);
  CounterRng rng(1);
  const Matrix d = random_matrix(rng, 20, 3);
  const AttentionGrads a = flasheva_backward(p, config(32, 8), d);
  const AttentionGrads b = attn_backward(p, Mask::causal(20), d);
  EXPECT_LE(max_abs_diff(a.dq, b.dq), 1e-10);
  EXPECT_LE(max_abs_diff(a.dk, b.dk), 1e-10);
  EXPECT_LE(max_abs_diff(a.dv, b.dv), 1e-10);
}

TEST(FlashEvaBackward, MatchesFiniteDifferences) {
  CounterRng rng(14);
  const ChunkProposal proposals[] = {ChunkProposal::clipped, ChunkProposal::gaussian_mean_key,
                                     ChunkProposal::standard_normal};
  for (int i = 0; i < 6; ++i) {
    EvaConfig cfg = config(4, 2, i % 2 ? WindowMode::sliding_chunk_aligned : WindowMode::block_local, 50 + i);
    cfg.proposal = proposals[i % 3];
    if (i == 3) cfg.clip_mode = ClipMode::clip_scale_deviation;
    const AttentionProblem p = random_problem(300 + i, 16, 16, 4, 3, 0.5);
    const Matrix d = random_matrix(rng, 16, 3);
    const AttentionGrads g = flasheva_backward(p, cfg, d, {5, 3});
    const double err = evakit::testing::finite_difference_error(
        p, d, g, [&](const AttentionProblem& x) { return flasheva_attn(x, cfg); });
    EXPECT_LE(err, 1e-5) << "config " << i;
  }
}

TEST(FlashEvaBackward, ValueRowGradientChainsThroughItsChunkOnly) {
  // Block-local, w=8, chunk=4, N=16: position 1 is local to queries 0..7 and
  // compressed into chunk 0 for queries 8..15.
  const AttentionProblem p = random_problem(15, 16, 16, 4, 2, 0.5);
  const EvaConfig cfg = config(8, 4);
  const Matrix ones(16, 2, 1.0);
  const AttentionGrads g = flasheva_backward(p, cfg, ones);

  const AugmentedKV aug = augment(p, cfg);
  const AttentionGrads ag =
      attn_backward(AttentionProblem{p.q, aug.k_tilde, aug.v_tilde, p.scale}, aug.mask, ones);
  const auto summaries = summarize_chunks(p.k, p.v, 2, cfg);
  const auto omega = summaries[0].omega.omegas.row(0);
  double z = 0.0, own = 0.0;
  for (std::size_t m = 0; m < 4; ++m) {
    double proj = 0.0, sq = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      proj += omega[j] * p.k(m, j);
      sq += p.k(m, j) * p.k(m, j);
    }
    const double xi = std::exp(proj - 0.5 * sq);
    z += xi;
    if (m == 1) own = xi;
  }
  for (std::size_t j = 0; j < 2; ++j)
    EXPECT_NEAR(g.dv(1, j), ag.dv(1, j) + own / z * ag.dv(16, j), 1e-12);
}
