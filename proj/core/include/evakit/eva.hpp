#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evakit/attention.hpp"
#include "evakit/random_features.hpp"

namespace evakit {

enum class WindowMode {
  block_local,            // local set = the query's own length-w block
  sliding_chunk_aligned,  // window of w positions ending at the query's chunk boundary
};

// Proposal used for each chunk's random feature draw. Centers are the chunk's mean key.
enum class ChunkProposal {
  standard_normal,    // N(0, I)
  gaussian_mean_key,  // N(mu_c, I)
  clipped,            // lambda * clip(N(mu_c, I)) (or the deviation variant, see ClipMode)
};

struct EvaConfig {
  std::size_t window = 256;
  std::size_t chunk = 16;
  WindowMode mode = WindowMode::block_local;
  std::size_t samples = 1;
  ChunkProposal proposal = ChunkProposal::clipped;
  double lambda = 0.1;
  ClipMode clip_mode = ClipMode::as_printed;
  std::uint64_t seed = 0;
  std::uint32_t layer = 0;
  std::uint32_t head = 0;

  // Throws ConfigError: window, chunk >= 1, window % chunk == 0, samples >= 1, lambda > 0.
  void validate() const;
};

std::string to_string(WindowMode mode);
std::string to_string(ChunkProposal proposal);
std::string to_string(ClipMode mode);
WindowMode parse_window_mode(const std::string& s);
ChunkProposal parse_chunk_proposal(const std::string& s);
ClipMode parse_clip_mode(const std::string& s);

// Coverage of positions [0, query] for one query (0-indexed). Positions
// [0, chunk_count * chunk) are compressed into chunks of exactly `chunk`
// positions; [local_begin, local_end) are attended exactly, and
// local_begin == chunk_count * chunk.
struct Partition {
  std::size_t query = 0;
  std::size_t local_begin = 0;
  std::size_t local_end = 0;
  std::size_t chunk = 1;
  std::size_t chunk_count = 0;

  std::size_t local_size() const { return local_end - local_begin; }
  std::size_t chunk_begin(std::size_t c) const { return c * chunk; }
  std::size_t chunk_end(std::size_t c) const { return (c + 1) * chunk; }
  // |E(n)| + C(n): rows of the augmented key set this query attends to.
  std::size_t attended_rows() const { return local_size() + chunk_count; }
};

Partition partition_sequence(std::size_t query, const EvaConfig& cfg);

// One compressed token. beta_hat is query independent for S = 1.
struct ChunkSummary {
  std::size_t index = 0;
  Vector k_tilde;
  Vector beta_hat;
  RandomFeatureDraw omega;
  std::size_t member_count = 0;
};

// Seed for chunk `index` of (layer, head).
std::uint64_t chunk_seed(const EvaConfig& cfg, std::size_t index);

// Proposal for a chunk whose mean key is `mean_key`.
ProposalSpec chunk_proposal(const EvaConfig& cfg, std::span<const double> mean_key);

// The chunk's draw, regenerated deterministically from the config.
RandomFeatureDraw chunk_draw(const EvaConfig& cfg, std::size_t index, std::span<const double> mean_key);

// k_tilde = mean of the chunk's keys; beta_hat = softmax over (s, m) of
// log xi(k_m, omega_s), applied to the value rows.
ChunkSummary chunk_summary(const Matrix& chunk_keys, const Matrix& chunk_values, const RandomFeatureDraw& draw);

// Summaries for chunks [0, count) of a sequence.
std::vector<ChunkSummary> summarize_chunks(const Matrix& keys, const Matrix& values, std::size_t count,
                                           const EvaConfig& cfg);

// Per-token control-variate pieces for one query under a draw: h_m and g_m = h_m v_m.
struct TokenTerms {
  Matrix g;  // M x Dv
  Vector h;  // M
};

TokenTerms per_token_terms(std::span<const double> q, const Matrix& keys, const Matrix& values,
                           const RandomFeatureDraw& draw, double scale = 1.0);

// sum_m [ g_m - beta_m * (h_m - E[h_m]) ].
Vector control_variate_estimate(const Matrix& g_parts, std::span<const double> h_parts, const Matrix& betas,
                                std::span<const double> expected_h);

// EVA attention evaluated per query straight from the local/chunk decomposition.
Matrix eva_attn_direct(const AttentionProblem& p, const EvaConfig& cfg);
Matrix eva_attn_direct(const AttentionProblem& p, const EvaConfig& cfg, std::span<const ChunkSummary> summaries);

// Number of chunks any query of an n-token sequence uses.
std::size_t total_chunks(std::size_t n, const EvaConfig& cfg);

}  // namespace evakit
