#include <gtest/gtest.h>

#include "evakit/decode_cache.hpp"
#include "evakit/flasheva.hpp"
#include "test_util.hpp"

using namespace evakit;
using evakit::testing::random_problem;

namespace {

EvaConfig config(std::size_t w, std::size_t chunk, WindowMode mode = WindowMode::block_local) {
  EvaConfig cfg;
  cfg.window = w;
  cfg.chunk = chunk;
  cfg.mode = mode;
  cfg.seed = 5;
  return cfg;
}

// Streams p through a fresh state and returns the max deviation from `ref` rows.
double stream_error(const AttentionProblem& p, const EvaConfig& cfg, const Matrix& ref) {
  DecodeState state = cache_init(cfg, p.key_dim(), p.value_dim(), p.scale);
  double worst = 0.0;
  for (std::size_t t = 0; t < p.queries(); ++t) {
    const Vector out = decode_step(state, p.q.row(t), p.k.row(t), p.v.row(t));
    for (std::size_t j = 0; j < out.size(); ++j) worst = std::max(worst, std::abs(out[j] - ref(t, j)));
  }
  return worst;
}

}  // namespace

TEST(CacheInit, EmptyAndDeterministic) {
  const DecodeState a = cache_init(config(8, 4), 3, 2);
  EXPECT_EQ(a.pos(), 0u);
  EXPECT_EQ(a.window_size(), 0u);
  EXPECT_TRUE(a.summaries().empty());
  EXPECT_TRUE(a == cache_init(config(8, 4), 3, 2));
}

TEST(CacheInit, RejectsWindowNotMultipleOfChunk) {
  EXPECT_THROW(cache_init(config(10, 4), 3, 2), ConfigError);
}

TEST(DecodeStep, RejectsDimensionMismatch) {
  DecodeState s = cache_init(config(8, 4), 3, 2);
  EXPECT_THROW(decode_step(s, Vector(3), Vector(2), Vector(2)), ShapeError);
}

TEST(DecodeStep, PrefixWithinWindowIsExactSoftmax) {
  const AttentionProblem p = random_problem(1, 32, 32, 4, 3);
  EXPECT_LE(stream_error(p, config(32, 8), softmax_attn(p, Mask::causal(32))), 1e-12);
}

TEST(DecodeStep, SingletonChunksStreamExactSoftmax) {
  const AttentionProblem p = random_problem(2, 300, 300, 4, 3, 0.5);
  for (WindowMode mode : {WindowMode::block_local, WindowMode::sliding_chunk_aligned})
    EXPECT_LE(stream_error(p, config(16, 1, mode), softmax_attn(p, Mask::causal(300))), 1e-10);
}

TEST(DecodeStep, MatchesFullRecompute) {
  const AttentionProblem p = random_problem(3, 700, 700, 8, 4, 1.0 / std::sqrt(8.0));
  for (WindowMode mode : {WindowMode::block_local, WindowMode::sliding_chunk_aligned}) {
    const EvaConfig cfg = config(64, 8, mode);
    EXPECT_LE(stream_error(p, cfg, flasheva_attn(p, cfg)), 1e-10);
  }
}

TEST(DecodeStep, StateMatchesPartitionAtEveryStep) {
  const AttentionProblem p = random_problem(4, 200, 200, 4, 2);
  for (WindowMode mode : {WindowMode::block_local, WindowMode::sliding_chunk_aligned}) {
    const EvaConfig cfg = config(32, 8, mode);
    DecodeState s = cache_init(cfg, 4, 2);
    for (std::size_t t = 0; t < 200; ++t) {
      decode_step(s, p.q.row(t), p.k.row(t), p.v.row(t));
      const Partition part = partition_sequence(t, cfg);
      ASSERT_EQ(s.pos(), t + 1);
      ASSERT_LE(s.window_size(), cfg.window);
      ASSERT_EQ(s.window_begin(), part.local_begin);
      ASSERT_EQ(s.window_size(), part.local_size());
      ASSERT_EQ(s.summaries().size(), part.chunk_count);
      ASSERT_EQ(s.window_size() + s.summaries().size() * cfg.chunk, s.pos());
    }
  }
}

TEST(DecodeStep, SummariesMatchBatchSummaries) {
  const AttentionProblem p = random_problem(5, 96, 96, 4, 2);
  const EvaConfig cfg = config(16, 4);
  DecodeState s = cache_init(cfg, 4, 2);
  for (std::size_t t = 0; t < 96; ++t) decode_step(s, p.q.row(t), p.k.row(t), p.v.row(t));
  const auto batch = summarize_chunks(p.k, p.v, s.summaries().size(), cfg);
  for (std::size_t c = 0; c < batch.size(); ++c) {
    EXPECT_EQ(s.summaries()[c].k_tilde, batch[c].k_tilde);
    EXPECT_EQ(s.summaries()[c].beta_hat, batch[c].beta_hat);
  }
}

TEST(CacheReport, MainConfigNumbers) {
  const CacheReport r = cache_report(config(256, 16), 2048, 10240);
  EXPECT_EQ(r.total_tokens, 12288u);
  EXPECT_EQ(r.full_entries, 12288u);
  EXPECT_EQ(r.local_entries, 256u);
  EXPECT_EQ(r.chunk_entries, 752u);
  EXPECT_EQ(r.eva_entries, 1008u);
  EXPECT_NEAR(r.ratio, 12.19, 0.01);
  EXPECT_DOUBLE_EQ(r.ratio, 12288.0 / 1008.0);
}

TEST(CacheReport, DoublingChunk) {
  EXPECT_EQ(cache_report(config(256, 32), 2048, 10240).eva_entries, 632u);
}

TEST(CacheReport, WindowCoveringEverythingHasRatioOne) {
  const CacheReport r = cache_report(config(512, 16), 100, 200);
  EXPECT_EQ(r.eva_entries, 300u);
  EXPECT_EQ(r.ratio, 1.0);
}

TEST(CacheReport, BytesMode) {
  const CacheReport r = cache_report(config(256, 16), 2048, 10240, 128.0);
  EXPECT_EQ(*r.full_bytes, 128.0 * 12288);
  EXPECT_EQ(*r.eva_bytes, 128.0 * 1008);
  EXPECT_FALSE(cache_report(config(256, 16), 1, 1).bytes_per_entry.has_value());
}

TEST(CacheReport, MatchesSimulatedStateEntries) {
  CounterRng rng(6);
  for (WindowMode mode : {WindowMode::block_local, WindowMode::sliding_chunk_aligned}) {
    const EvaConfig cfg = config(16, 4, mode);
    DecodeState s = cache_init(cfg, 2, 1);
    for (std::size_t t = 1; t <= 200; ++t) {
      const Vector x{rng.normal(), rng.normal()};
      decode_step(s, x, x, Vector{rng.normal()});
      ASSERT_EQ(s.entries(), cache_report(cfg, t, 0).eva_entries) << "T=" << t;
    }
  }
}

TEST(CacheReport, GrowthLawInSlidingMode) {
  const EvaConfig cfg = config(64, 16, WindowMode::sliding_chunk_aligned);
  for (std::size_t t = 80; t < 2000; ++t) {
    const auto now = cache_report(cfg, t, 0), before = cache_report(cfg, t - cfg.chunk, 0);
    ASSERT_EQ(now.eva_entries - before.eva_entries, 1u) << "T=" << t;
    ASSERT_EQ(now.full_entries - before.full_entries, cfg.chunk);
  }
}

TEST(CacheReport, Monotonicity) {
  for (std::size_t w : {128, 256, 512}) {
    EXPECT_GT(cache_report(config(w, 8), 2048, 1024).eva_entries, cache_report(config(w, 16), 2048, 1024).eva_entries);
    EXPECT_GT(cache_report(config(w, 16), 2048, 1024).eva_entries, cache_report(config(w, 32), 2048, 1024).eva_entries);
  }
  for (std::size_t chunk : {8, 16, 32}) {
    EXPECT_LT(cache_report(config(128, chunk), 2048, 1024).eva_entries,
              cache_report(config(256, chunk), 2048, 1024).eva_entries);
    EXPECT_LT(cache_report(config(256, chunk), 2048, 1024).eva_entries,
              cache_report(config(512, chunk), 2048, 1024).eva_entries);
  }
}

TEST(CacheReport, RejectsEmptyRun) { EXPECT_THROW(cache_report(config(8, 4), 0, 0), ConfigError); }
