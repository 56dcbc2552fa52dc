#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "evakit/tensor.hpp"

namespace evakit {

// Queries N x D, keys M x D, values M x Dv. Logits are scale * (q_n . k_m).
template <typename T>
struct BasicAttentionProblem {
  BasicMatrix<T> q;
  BasicMatrix<T> k;
  BasicMatrix<T> v;
  T scale = T(1);

  std::size_t queries() const { return q.rows(); }
  std::size_t keys() const { return k.rows(); }
  std::size_t key_dim() const { return q.cols(); }
  std::size_t value_dim() const { return v.cols(); }

  // Throws ShapeError / NumericalError on violated invariants.
  void validate() const;
};

using AttentionProblem = BasicAttentionProblem<double>;
using AttentionProblemF = BasicAttentionProblem<float>;

template <typename T>
struct BasicAttentionGrads {
  BasicMatrix<T> dq;
  BasicMatrix<T> dk;
  BasicMatrix<T> dv;
};

using AttentionGrads = BasicAttentionGrads<double>;

// Half-open key index interval.
struct RowRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end > begin ? end - begin : 0; }
  friend bool operator==(const RowRange&, const RowRange&) = default;
};

// Which keys each query may attend to. Structured kinds answer per-query
// range queries in O(1); nothing here stores an N x M table except the
// explicit kind, whose table is caller-supplied.
class Mask {
 public:
  enum class Kind { full, causal, sliding_window, block_local, explicit_table, row_ranges };

  static Mask full(std::size_t n, std::size_t m);
  static Mask causal(std::size_t n);
  // Key m allowed for query n iff n - w < m <= n.
  static Mask sliding_window(std::size_t n, std::size_t w);
  // Key m allowed iff floor(m / b) == floor(n / b) and m <= n.
  static Mask block_local(std::size_t n, std::size_t b);
  // Row-major n x m allowance table (nonzero = allowed).
  static Mask from_table(std::size_t n, std::size_t m, std::vector<std::uint8_t> table);
  // Per-query sorted, disjoint ranges over m keys.
  static Mask from_ranges(std::size_t m, std::vector<std::vector<RowRange>> ranges);

  Kind kind() const { return kind_; }
  std::size_t queries() const { return n_; }
  std::size_t keys() const { return m_; }
  std::size_t width() const { return width_; }

  bool allows(std::size_t query, std::size_t key) const;

  // Replaces `out` with the allowed ranges for `query`, ascending and disjoint.
  void ranges(std::size_t query, std::vector<RowRange>& out) const;
  std::size_t allowed_count(std::size_t query) const;

  // Throws if the mask shape does not fit the problem or a row is fully masked.
  void validate_for(std::size_t n, std::size_t m) const;

 private:
  Mask(Kind kind, std::size_t n, std::size_t m, std::size_t width) : kind_(kind), n_(n), m_(m), width_(width) {}

  Kind kind_;
  std::size_t n_;
  std::size_t m_;
  std::size_t width_;
  std::vector<std::uint8_t> table_;
  std::vector<RowRange> flat_ranges_;
  std::vector<std::size_t> range_offsets_;
};

// Factory keyed by kind; `w_or_b` is the window or block width for windowed kinds.
Mask make_mask(Mask::Kind kind, std::size_t n, std::size_t m, std::size_t w_or_b = 0);

struct TileConfig {
  std::size_t block_q = 64;
  std::size_t block_k = 64;
};

// Instrumentation filled by the tiled kernels when requested.
struct AttnStats {
  std::vector<std::size_t> scores_per_query;  // logits evaluated per query row
  std::size_t tiles_visited = 0;
  std::size_t peak_scratch_elements = 0;  // largest transient buffer, in elements
};

// Naive row-at-a-time reference. Uses a length-M scratch row, no N x M table.
template <typename T>
BasicMatrix<T> softmax_attn(const BasicAttentionProblem<T>& p, const Mask& mask);

// Single pass over key tiles with the running-max / running-normalizer recurrence.
template <typename T>
BasicMatrix<T> tiled_softmax_attn(const BasicAttentionProblem<T>& p, const Mask& mask, TileConfig tiles = {},
                                  AttnStats* stats = nullptr);

// Same as tiled_softmax_attn but also returns each row's log-normalizer
// (max + log sum exp), which the backward pass reuses.
template <typename T>
BasicMatrix<T> tiled_softmax_attn_lse(const BasicAttentionProblem<T>& p, const Mask& mask, TileConfig tiles,
                                      std::vector<T>& row_lse, AttnStats* stats = nullptr);

// Analytic gradients; attention weights are recomputed tile by tile.
template <typename T>
BasicAttentionGrads<T> attn_backward(const BasicAttentionProblem<T>& p, const Mask& mask, const BasicMatrix<T>& d_out,
                                     TileConfig tiles = {});

// Dense N x M weight table. Test and diagnostics helper only.
Matrix attention_weights(const AttentionProblem& p, const Mask& mask);

}  // namespace evakit
