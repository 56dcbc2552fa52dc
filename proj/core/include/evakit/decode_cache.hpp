#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evakit/eva.hpp"

namespace evakit {

// What the decoder keeps per compressed chunk; the draw is discarded.
struct CachedSummary {
  Vector k_tilde;
  Vector beta_hat;
};

// Streaming cache: a ring buffer of in-window (key, value) rows plus the
// append-only list of chunk summaries. Single writer.
class DecodeState {
 public:
  DecodeState(EvaConfig cfg, std::size_t key_dim, std::size_t value_dim, double scale = 1.0);

  // Appends (k, v) at position pos(), compresses any chunk that left the
  // window, and returns the attention output for q at that position.
  Vector step(std::span<const double> q, std::span<const double> k, std::span<const double> v);

  const EvaConfig& config() const { return cfg_; }
  std::size_t pos() const { return pos_; }
  std::size_t window_size() const { return count_; }
  std::size_t window_capacity() const { return cfg_.window; }
  // Sequence position of the oldest buffered row.
  std::size_t window_begin() const { return first_pos_; }
  const std::vector<CachedSummary>& summaries() const { return summaries_; }
  std::size_t key_dim() const { return key_dim_; }
  std::size_t value_dim() const { return value_dim_; }
  double scale() const { return scale_; }
  // Cached entries right now: window rows + summaries.
  std::size_t entries() const { return count_ + summaries_.size(); }

  friend bool operator==(const DecodeState& a, const DecodeState& b);

 private:
  std::span<const double> key_at(std::size_t i) const;    // i-th oldest window row
  std::span<const double> value_at(std::size_t i) const;
  void compress_front_chunk();

  EvaConfig cfg_;
  std::size_t key_dim_;
  std::size_t value_dim_;
  double scale_;
  Matrix keys_;    // window x D ring storage
  Matrix values_;  // window x Dv ring storage
  std::size_t head_ = 0;  // ring slot of the oldest row
  std::size_t count_ = 0;
  std::size_t first_pos_ = 0;
  std::size_t pos_ = 0;
  std::vector<CachedSummary> summaries_;
  Vector scratch_logits_;
};

DecodeState cache_init(const EvaConfig& cfg, std::size_t key_dim, std::size_t value_dim, double scale = 1.0);
Vector decode_step(DecodeState& state, std::span<const double> q, std::span<const double> k,
                   std::span<const double> v);

struct CacheReport {
  std::size_t total_tokens = 0;
  std::size_t full_entries = 0;
  std::size_t eva_entries = 0;
  std::size_t local_entries = 0;
  std::size_t chunk_entries = 0;
  double ratio = 1.0;
  std::optional<double> bytes_per_entry;
  std::optional<double> full_bytes;
  std::optional<double> eva_bytes;
  std::string formula;
};

// Closed-form entry counts at the last position of a prefix + generated run.
CacheReport cache_report(const EvaConfig& cfg, std::size_t prefix, std::size_t generated,
                         std::optional<double> bytes_per_entry = std::nullopt);

}  // namespace evakit
