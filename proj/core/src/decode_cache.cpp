#include "evakit/decode_cache.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "evakit/linalg.hpp"

namespace evakit {

DecodeState::DecodeState(EvaConfig cfg, std::size_t key_dim, std::size_t value_dim, double scale)
    : cfg_(cfg), key_dim_(key_dim), value_dim_(value_dim), scale_(scale) {
  cfg_.validate();
  if (key_dim == 0 || value_dim == 0) throw ShapeError("decode state needs nonzero key and value dims");
  if (!(scale >= 0.0) || !std::isfinite(scale)) throw ConfigError("scale must be finite and nonnegative");
  keys_ = Matrix(cfg_.window, key_dim);
  values_ = Matrix(cfg_.window, value_dim);
}

std::span<const double> DecodeState::key_at(std::size_t i) const { return keys_.row((head_ + i) % cfg_.window); }

std::span<const double> DecodeState::value_at(std::size_t i) const {
  return values_.row((head_ + i) % cfg_.window);
}

void DecodeState::compress_front_chunk() {
  const std::size_t c = cfg_.chunk;
  Matrix kc(c, key_dim_), vc(c, value_dim_);
  for (std::size_t i = 0; i < c; ++i) {
    std::copy(key_at(i).begin(), key_at(i).end(), kc.row(i).begin());
    std::copy(value_at(i).begin(), value_at(i).end(), vc.row(i).begin());
  }
  const std::size_t index = first_pos_ / c;
  const Vector mean = column_mean(kc);
  ChunkSummary s = chunk_summary(kc, vc, chunk_draw(cfg_, index, mean));
  summaries_.push_back({std::move(s.k_tilde), std::move(s.beta_hat)});
  head_ = (head_ + c) % cfg_.window;
  count_ -= c;
  first_pos_ += c;
}

Vector DecodeState::step(std::span<const double> q, std::span<const double> k, std::span<const double> v) {
  if (q.size() != key_dim_ || k.size() != key_dim_ || v.size() != value_dim_)
    throw ShapeError("decode_step: dimension mismatch");
  if (!all_finite(q) || !all_finite(k) || !all_finite(v)) throw NumericalError("decode_step: non-finite input");

  // Chunks leave the window whole; the window start is always chunk aligned.
  const Partition part = partition_sequence(pos_, cfg_);
  while (first_pos_ < part.local_begin) compress_front_chunk();

  const std::size_t slot = (head_ + count_) % cfg_.window;
  std::copy(k.begin(), k.end(), keys_.row(slot).begin());
  std::copy(v.begin(), v.end(), values_.row(slot).begin());
  ++count_;
  ++pos_;

  const std::size_t n_rows = count_ + summaries_.size();
  scratch_logits_.resize(n_rows);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < count_; ++i) {
    scratch_logits_[i] = scale_ * dot(q, key_at(i));
    mx = std::max(mx, scratch_logits_[i]);
  }
  for (std::size_t c = 0; c < summaries_.size(); ++c) {
    scratch_logits_[count_ + c] = scale_ * dot(q, std::span<const double>(summaries_[c].k_tilde));
    mx = std::max(mx, scratch_logits_[count_ + c]);
  }
  Vector out(value_dim_, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n_rows; ++i) {
    const double w = std::exp(scratch_logits_[i] - mx);
    z += w;
    const std::span<const double> value =
        i < count_ ? value_at(i) : std::span<const double>(summaries_[i - count_].beta_hat);
    for (std::size_t j = 0; j < value_dim_; ++j) out[j] += w * value[j];
  }
  for (double& x : out) x /= z;
  return out;
}

bool operator==(const DecodeState& a, const DecodeState& b) {
  if (a.pos_ != b.pos_ || a.count_ != b.count_ || a.first_pos_ != b.first_pos_ || a.key_dim_ != b.key_dim_ ||
      a.value_dim_ != b.value_dim_ || a.scale_ != b.scale_ || a.summaries_.size() != b.summaries_.size())
    return false;
  for (std::size_t i = 0; i < a.count_; ++i)
    if (!std::ranges::equal(a.key_at(i), b.key_at(i)) || !std::ranges::equal(a.value_at(i), b.value_at(i)))
      return false;
  for (std::size_t c = 0; c < a.summaries_.size(); ++c)
    if (a.summaries_[c].k_tilde != b.summaries_[c].k_tilde || a.summaries_[c].beta_hat != b.summaries_[c].beta_hat)
      return false;
  return true;
}

DecodeState cache_init(const EvaConfig& cfg, std::size_t key_dim, std::size_t value_dim, double scale) {
  return DecodeState(cfg, key_dim, value_dim, scale);
}

Vector decode_step(DecodeState& state, std::span<const double> q, std::span<const double> k,
                   std::span<const double> v) {
  return state.step(q, k, v);
}

CacheReport cache_report(const EvaConfig& cfg, std::size_t prefix, std::size_t generated,
                         std::optional<double> bytes_per_entry) {
  cfg.validate();
  const std::size_t total = prefix + generated;
  if (total == 0) throw ConfigError("cache_report: prefix + generated must be >= 1");
  const Partition part = partition_sequence(total - 1, cfg);
  CacheReport r;
  r.total_tokens = total;
  r.full_entries = total;
  r.local_entries = part.local_size();
  r.chunk_entries = part.chunk_count;
  r.eva_entries = part.attended_rows();
  r.ratio = static_cast<double>(r.full_entries) / static_cast<double>(r.eva_entries);
  if (bytes_per_entry) {
    r.bytes_per_entry = *bytes_per_entry;
    r.full_bytes = *bytes_per_entry * static_cast<double>(r.full_entries);
    r.eva_bytes = *bytes_per_entry * static_cast<double>(r.eva_entries);
  }
  r.formula = cfg.mode == WindowMode::block_local
                  ? "eva = (T-1) - w*floor((T-1)/w) + 1 + w*floor((T-1)/w)/chunk"
                  : "eva = T - (a-w)^+ + (a-w)^+/chunk, a = chunk*ceil(T/chunk)";
  return r;
}

}  // namespace evakit
