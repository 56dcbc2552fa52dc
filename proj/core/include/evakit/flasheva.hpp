#pragma once

#include <span>
#include <vector>

#include "evakit/attention.hpp"
#include "evakit/eva.hpp"

namespace evakit {

enum class RowOrigin : std::uint8_t { local, rfa };

struct RowTag {
  RowOrigin origin = RowOrigin::local;
  std::size_t index = 0;  // sequence position for local rows, chunk index for rfa rows

  friend bool operator==(const RowTag&, const RowTag&) = default;
};

// Keys and values extended with one (k_tilde_c, beta_hat_c) row per chunk.
// Local rows come first (in position order), rfa rows follow in chunk order.
// The mask gives each query its own local range plus the completed chunks.
struct AugmentedKV {
  Matrix k_tilde;
  Matrix v_tilde;
  std::vector<RowTag> origin;
  Mask mask = Mask::full(0, 0);
  std::size_t local_rows = 0;
  std::size_t rfa_rows = 0;
};

// Shared augmented set for a whole causal sequence. `parts[n]` is the
// partition of query n; `summaries` must hold exactly the chunks the last
// query uses.
AugmentedKV build_augmented(const Matrix& keys, const Matrix& values, std::span<const Partition> parts,
                            std::span<const ChunkSummary> summaries);

// Compact |E(n)| + C(n) row set for a single query (mask allows every row).
AugmentedKV build_augmented_for_query(const Matrix& keys, const Matrix& values, const Partition& part,
                                      std::span<const ChunkSummary> summaries);

std::vector<Partition> partition_all(std::size_t n, const EvaConfig& cfg);

// EVA as softmax attention over the augmented set, run through the tiled kernel.
Matrix flasheva_attn(const AttentionProblem& p, const EvaConfig& cfg, TileConfig tiles = {},
                     AttnStats* stats = nullptr);

// Same with caller-supplied summaries (used by fault injection and streaming checks).
Matrix flasheva_attn_with_summaries(const AttentionProblem& p, const EvaConfig& cfg,
                                    std::span<const ChunkSummary> summaries, TileConfig tiles = {},
                                    AttnStats* stats = nullptr);

// Gradients through the local path and through every chunk summary
// (k_tilde via the mean, beta_hat via the xi-softmax, and the proposal
// center where the draw depends on it). Augmented rows are recomputed.
AttentionGrads flasheva_backward(const AttentionProblem& p, const EvaConfig& cfg, const Matrix& d_out,
                                 TileConfig tiles = {});

}  // namespace evakit
