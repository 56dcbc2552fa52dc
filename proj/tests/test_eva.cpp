#include <gtest/gtest.h>

#include <cmath>

#include "evakit/eva.hpp"
#include "evakit/linalg.hpp"
#include "test_util.hpp"

using namespace evakit;
using evakit::testing::random_matrix;
using evakit::testing::random_problem;

namespace {

EvaConfig config(std::size_t w, std::size_t chunk, WindowMode mode = WindowMode::block_local, std::uint64_t seed = 1) {
  EvaConfig cfg;
  cfg.window = w;
  cfg.chunk = chunk;
  cfg.mode = mode;
  cfg.seed = seed;
  return cfg;
}

// Local range [begin, query] by the stated rules, written independently of the library.
std::size_t oracle_local_begin(std::size_t query, const EvaConfig& cfg) {
  if (cfg.mode == WindowMode::block_local) return query - query % cfg.window;
  const std::size_t n1 = query + 1;
  const std::size_t a = cfg.chunk * static_cast<std::size_t>(std::ceil(static_cast<double>(n1) / cfg.chunk));
  return a > cfg.window ? a - cfg.window : 0;
}

// One query at a time, linear domain, long double.
Matrix oracle_eva(const AttentionProblem& p, const EvaConfig& cfg) {
  const std::size_t n = p.queries(), d = p.key_dim(), dv = p.value_dim();
  Matrix out(n, dv);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t begin = oracle_local_begin(i, cfg);
    std::vector<long double> num(dv, 0), logits;
    std::vector<std::vector<long double>> values;
    auto score = [&](std::span<const double> key) {
      long double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += static_cast<long double>(p.q(i, j)) * key[j];
      return s * p.scale;
    };
    for (std::size_t m = begin; m <= i; ++m) {
      logits.push_back(score(p.k.row(m)));
      values.emplace_back(p.v.row(m).begin(), p.v.row(m).end());
    }
    for (std::size_t c = 0; c * cfg.chunk < begin; ++c) {
      Vector k_mean(d, 0.0);
      for (std::size_t m = c * cfg.chunk; m < (c + 1) * cfg.chunk; ++m)
        for (std::size_t j = 0; j < d; ++j) k_mean[j] += p.k(m, j) / cfg.chunk;
      const RandomFeatureDraw draw = chunk_draw(cfg, c, k_mean);
      long double z = 0;
      std::vector<long double> beta(dv, 0);
      for (std::size_t m = c * cfg.chunk; m < (c + 1) * cfg.chunk; ++m) {
        long double proj = 0, sq = 0;
        for (std::size_t j = 0; j < d; ++j) {
          proj += static_cast<long double>(draw.omegas(0, j)) * p.k(m, j);
          sq += static_cast<long double>(p.k(m, j)) * p.k(m, j);
        }
        const long double xi = std::exp(proj - sq / 2);
        z += xi;
        for (std::size_t j = 0; j < dv; ++j) beta[j] += xi * p.v(m, j);
      }
      for (auto& b : beta) b /= z;
      logits.push_back(score(k_mean));
      values.push_back(beta);
    }
    long double total = 0;
    for (std::size_t r = 0; r < logits.size(); ++r) {
      const long double w = std::exp(logits[r]);
      total += w;
      for (std::size_t j = 0; j < dv; ++j) num[j] += w * values[r][j];
    }
    for (std::size_t j = 0; j < dv; ++j) out(i, j) = static_cast<double>(num[j] / total);
  }
  return out;
}

}  // namespace

TEST(PartitionSequence, BlockLocalExample) {
  const Partition p = partition_sequence(5, config(4, 2));
  EXPECT_EQ(p.local_begin, 4u);
  EXPECT_EQ(p.local_end, 6u);
  EXPECT_EQ(p.chunk_count, 2u);
  EXPECT_EQ(p.chunk_begin(1), 2u);
  EXPECT_EQ(p.chunk_end(1), 4u);
}

TEST(PartitionSequence, SlidingExample) {
  const Partition p = partition_sequence(11, config(4, 2, WindowMode::sliding_chunk_aligned));
  EXPECT_EQ(p.local_begin, 8u);
  EXPECT_EQ(p.local_end, 12u);
  EXPECT_EQ(p.chunk_count, 4u);
}

TEST(PartitionSequence, ShortPrefixHasNoChunks) {
  for (WindowMode mode : {WindowMode::block_local, WindowMode::sliding_chunk_aligned})
    for (std::size_t n = 0; n < 8; ++n) {
      const Partition p = partition_sequence(n, config(8, 4, mode));
      EXPECT_EQ(p.local_begin, 0u);
      EXPECT_EQ(p.chunk_count, 0u);
    }
}

TEST(PartitionSequence, ExactCoverProperty) {
  CounterRng rng(12);
  for (std::size_t chunk : {1, 2, 8, 16}) {
    for (int trial = 0; trial < 60; ++trial) {
      const std::size_t w = chunk * (1 + rng.below(64));
      for (WindowMode mode : {WindowMode::block_local, WindowMode::sliding_chunk_aligned}) {
        const EvaConfig cfg = config(w, chunk, mode);
        for (std::size_t q : {std::size_t{0}, static_cast<std::size_t>(rng.below(4096)), static_cast<std::size_t>(rng.below(4096)), w - 1, w, std::size_t{4095}}) {
          const Partition p = partition_sequence(q, cfg);
          std::vector<int> covered(q + 1, 0);
          for (std::size_t c = 0; c < p.chunk_count; ++c)
            for (std::size_t m = p.chunk_begin(c); m < p.chunk_end(c); ++m) ++covered.at(m);
          for (std::size_t m = p.local_begin; m < p.local_end; ++m) ++covered.at(m);
          for (std::size_t m = 0; m <= q; ++m) ASSERT_EQ(covered[m], 1) << "q=" << q << " w=" << w;
          ASSERT_LE(p.local_size(), w);
          ASSERT_EQ(p.local_begin, oracle_local_begin(q, cfg));
        }
      }
    }
  }
}

TEST(EvaConfig, RejectsWindowNotMultipleOfChunk) {
  EXPECT_THROW(partition_sequence(3, config(6, 4)), ConfigError);
  EXPECT_THROW(config(0, 1).validate(), ConfigError);
}

TEST(ChunkSummary, ConstantChunkCollapses) {
  const Matrix k{{0.5, -1.0}, {0.5, -1.0}, {0.5, -1.0}}, v{{2.0}, {2.0}, {2.0}};
  const auto s = chunk_summary(k, v, sample_proposal(ProposalSpec::standard_normal(), 1, 2, 3));
  EXPECT_EQ(s.k_tilde, (Vector{0.5, -1.0}));
  EXPECT_EQ(s.beta_hat, (Vector{2.0}));
}

TEST(ChunkSummary, SingletonCollapses) {
  const Matrix k{{0.3, 0.7}}, v{{-1.0, 4.0}};
  const auto s = chunk_summary(k, v, sample_proposal(ProposalSpec::standard_normal(), 1, 2, 3));
  EXPECT_EQ(s.k_tilde, (Vector{0.3, 0.7}));
  EXPECT_EQ(s.beta_hat, (Vector{-1.0, 4.0}));
}

TEST(ChunkSummary, LinearDomainOracle) {
  const double omega = 0.37;
  RandomFeatureDraw draw;
  draw.omegas = Matrix{{omega}};
  draw.noise = draw.omegas;
  const auto s = chunk_summary(Matrix{{0.0}, {1.0}}, Matrix{{1.0}, {3.0}}, draw);
  const double x0 = std::exp(0.0), x1 = std::exp(omega - 0.5);
  EXPECT_NEAR(s.beta_hat[0], (x0 * 1.0 + x1 * 3.0) / (x0 + x1), 1e-12);
  EXPECT_NEAR(s.k_tilde[0], 0.5, 1e-15);
}

TEST(ChunkSummary, BetaIsConvexAndReproducible) {
  CounterRng rng(4);
  const EvaConfig cfg = config(16, 8);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix k = random_matrix(rng, 8, 4, 3.0), v = random_matrix(rng, 8, 3);
    const Vector mean = column_mean(k);
    const auto a = chunk_summary(k, v, chunk_draw(cfg, trial, mean));
    const auto b = chunk_summary(k, v, chunk_draw(cfg, trial, mean));
    EXPECT_EQ(a.beta_hat, b.beta_hat);
    for (std::size_t j = 0; j < 3; ++j) {
      double lo = INFINITY, hi = -INFINITY;
      for (std::size_t m = 0; m < 8; ++m) {
        lo = std::min(lo, v(m, j));
        hi = std::max(hi, v(m, j));
      }
      EXPECT_GE(a.beta_hat[j], lo - 1e-12);
      EXPECT_LE(a.beta_hat[j], hi + 1e-12);
    }
  }
}

TEST(ChunkSummary, RejectsEmptyChunk) {
  EXPECT_THROW(chunk_summary(Matrix(0, 2), Matrix(0, 1), sample_proposal(ProposalSpec::standard_normal(), 1, 2, 0)),
               ShapeError);
}

TEST(ChunkSummary, QueryIndependentAcrossSequenceLengths) {
  const AttentionProblem p = random_problem(3, 128, 128, 4, 4);
  const EvaConfig cfg = config(16, 4);
  const auto short_run = summarize_chunks(p.k.slice_rows(0, 64), p.v.slice_rows(0, 64), 12, cfg);
  const auto long_run = summarize_chunks(p.k, p.v, 28, cfg);
  for (std::size_t c = 0; c < 12; ++c) {
    EXPECT_EQ(short_run[c].k_tilde, long_run[c].k_tilde);
    EXPECT_EQ(short_run[c].beta_hat, long_run[c].beta_hat);
  }
}

TEST(ChunkSeed, DependsOnLayerHeadAndIndex) {
  EvaConfig a = config(8, 4);
  EvaConfig b = a;
  b.head = 1;
  EvaConfig c = a;
  c.layer = 1;
  EXPECT_NE(chunk_seed(a, 0), chunk_seed(b, 0));
  EXPECT_NE(chunk_seed(a, 0), chunk_seed(c, 0));
  EXPECT_NE(chunk_seed(a, 0), chunk_seed(a, 1));
  EXPECT_EQ(chunk_seed(a, 3), chunk_seed(config(8, 4), 3));
}

namespace {

struct CvFixture {
  Vector q{0.3, -0.2};
  Matrix k{{0.4, 0.1}, {-0.3, 0.5}, {0.2, -0.6}};
  Matrix v{{1.0, 2.0}, {-1.0, 0.5}, {3.0, -2.0}};
  RandomFeatureDraw draw = sample_proposal(ProposalSpec::standard_normal(), 1, 2, 42);
  TokenTerms terms = per_token_terms(q, k, v, draw);
  Vector pi = expected_weights(q, k);
};

}  // namespace

TEST(ControlVariate, SingleSampleSatisfiesGEqualsHV) {
  const CvFixture f;
  for (std::size_t m = 0; m < 3; ++m)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(f.terms.g(m, j), f.terms.h[m] * f.v(m, j));
}

TEST(ControlVariate, BetaEqualValuesGivesExactSoftmax) {
  const CvFixture f;
  const Vector out = control_variate_estimate(f.terms.g, f.terms.h, f.v, f.pi);
  const Matrix exact = softmax_attn(AttentionProblem{row_matrix(f.q), f.k, f.v, 1.0}, Mask::full(1, 3));
  for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(out[j], exact(0, j), 1e-14);
}

TEST(ControlVariate, ZeroBetaGivesRawSum) {
  const CvFixture f;
  const Vector out = control_variate_estimate(f.terms.g, f.terms.h, Matrix(3, 2), f.pi);
  for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(out[j], f.terms.g(0, j) + f.terms.g(1, j) + f.terms.g(2, j));
}

TEST(ControlVariate, SharedBetaEqualsSnis) {
  CvFixture f;
  f.draw = sample_proposal(ProposalSpec::standard_normal(), 64, 2, 43);
  f.terms = per_token_terms(f.q, f.k, f.v, f.draw);
  double h_sum = 0.0;
  Vector g_sum(2, 0.0);
  for (std::size_t m = 0; m < 3; ++m) {
    h_sum += f.terms.h[m];
    for (std::size_t j = 0; j < 2; ++j) g_sum[j] += f.terms.g(m, j);
  }
  Matrix betas(3, 2);
  for (std::size_t m = 0; m < 3; ++m)
    for (std::size_t j = 0; j < 2; ++j) betas(m, j) = g_sum[j] / h_sum;
  const Vector out = control_variate_estimate(f.terms.g, f.terms.h, betas, f.pi);
  const Vector snis = snis_rfa(f.q, f.k, f.v, f.draw);
  for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(out[j], snis[j], 1e-10);
}

TEST(ControlVariate, RejectsLengthMismatch) {
  const CvFixture f;
  EXPECT_THROW(control_variate_estimate(f.terms.g, f.terms.h, Matrix(2, 2), f.pi), ShapeError);
}

TEST(EvaAttnDirect, WindowCoveringSequenceIsSoftmax) {
  const AttentionProblem p = random_problem(5, 40, 40, 6, 3);
  EXPECT_LE(max_rel_err(eva_attn_direct(p, config(64, 8)), softmax_attn(p, Mask::causal(40))), 1e-12);
}

TEST(EvaAttnDirect, SingletonChunksAreSoftmaxForAnySeed) {
  const AttentionProblem p = random_problem(6, 50, 50, 4, 4);
  for (std::uint64_t seed : {0, 1, 99})
    for (WindowMode mode : {WindowMode::block_local, WindowMode::sliding_chunk_aligned})
      EXPECT_LE(max_rel_err(eva_attn_direct(p, config(5, 1, mode, seed)), softmax_attn(p, Mask::causal(50))), 1e-12);
}

TEST(EvaAttnDirect, MatchesIndependentOracle) {
  const AttentionProblem p = random_problem(8, 64, 64, 8, 5, 1.0 / std::sqrt(8.0));
  for (WindowMode mode : {WindowMode::block_local, WindowMode::sliding_chunk_aligned}) {
    const EvaConfig cfg = config(8, 4, mode, 17);
    EXPECT_LE(max_rel_err(eva_attn_direct(p, cfg), oracle_eva(p, cfg)), 1e-12);
  }
}

TEST(EvaAttnDirect, ErrorGrowsFromSingletonToLargeChunks) {
  // Reported trend; only the chunk 1 vs 16 endpoints are asserted.
  const std::size_t chunks[] = {1, 2, 4, 8, 16};
  double err[5] = {};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const AttentionProblem p = random_problem(seed, 128, 128, 8, 4, 1.0 / std::sqrt(8.0));
    const Matrix exact = softmax_attn(p, Mask::causal(128));
    for (int i = 0; i < 5; ++i) err[i] += max_abs_diff(eva_attn_direct(p, config(16, chunks[i], WindowMode::block_local, seed)), exact);
  }
  for (int i = 0; i < 5; ++i) RecordProperty("chunk_" + std::to_string(chunks[i]), std::to_string(err[i] / 20));
  EXPECT_LT(err[0], err[4]);
}

TEST(EvaAttnDirect, RejectsNonCausalShape) {
  EXPECT_THROW(eva_attn_direct(random_problem(1, 4, 5, 2, 2), config(4, 2)), ShapeError);
}
