#include "evakit/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace evakit {

template <typename T>
void BasicAttentionProblem<T>::validate() const {
  if (q.rows() == 0 || k.rows() == 0 || q.cols() == 0 || v.cols() == 0)
    throw ShapeError("attention problem needs N, M, D, Dv >= 1");
  if (k.cols() != q.cols())
    throw ShapeError("query dim " + std::to_string(q.cols()) + " != key dim " + std::to_string(k.cols()));
  if (v.rows() != k.rows()) throw ShapeError("keys and values must share a row count");
  if (!(scale >= T(0)) || !std::isfinite(scale)) throw NumericalError("scale must be finite and nonnegative");
  if (!all_finite(q) || !all_finite(k) || !all_finite(v)) throw NumericalError("attention inputs must be finite");
}

template struct BasicAttentionProblem<double>;
template struct BasicAttentionProblem<float>;

// --- Mask ------------------------------------------------------------------

Mask Mask::full(std::size_t n, std::size_t m) { return Mask(Kind::full, n, m, 0); }

Mask Mask::causal(std::size_t n) { return Mask(Kind::causal, n, n, 0); }

Mask Mask::sliding_window(std::size_t n, std::size_t w) {
  if (w == 0) throw ConfigError("sliding window width must be >= 1");
  return Mask(Kind::sliding_window, n, n, w);
}

Mask Mask::block_local(std::size_t n, std::size_t b) {
  if (b == 0) throw ConfigError("block width must be >= 1");
  return Mask(Kind::block_local, n, n, b);
}

Mask Mask::from_table(std::size_t n, std::size_t m, std::vector<std::uint8_t> table) {
  if (table.size() != n * m) throw ShapeError("explicit mask table must have n*m entries");
  Mask mask(Kind::explicit_table, n, m, 0);
  mask.table_ = std::move(table);
  return mask;
}

Mask Mask::from_ranges(std::size_t m, std::vector<std::vector<RowRange>> ranges) {
  Mask mask(Kind::row_ranges, ranges.size(), m, 0);
  mask.range_offsets_.reserve(ranges.size() + 1);
  mask.range_offsets_.push_back(0);
  for (const auto& row : ranges) {
    std::size_t last_end = 0;
    for (const RowRange& r : row) {
      if (r.begin < last_end || r.end > m || r.begin > r.end)
        throw ShapeError("row ranges must be sorted, disjoint and inside [0, m)");
      last_end = r.end;
      if (r.size() > 0) mask.flat_ranges_.push_back(r);
    }
    mask.range_offsets_.push_back(mask.flat_ranges_.size());
  }
  return mask;
}

bool Mask::allows(std::size_t n, std::size_t m) const {
  switch (kind_) {
    case Kind::full:
      return true;
    case Kind::causal:
      return m <= n;
    case Kind::sliding_window:
      return m <= n && n - m < width_;
    case Kind::block_local:
      return m <= n && m / width_ == n / width_;
    case Kind::explicit_table:
      return table_[n * m_ + m] != 0;
    case Kind::row_ranges:
      for (std::size_t i = range_offsets_[n]; i < range_offsets_[n + 1]; ++i)
        if (m >= flat_ranges_[i].begin && m < flat_ranges_[i].end) return true;
      return false;
  }
  return false;
}

void Mask::ranges(std::size_t n, std::vector<RowRange>& out) const {
  out.clear();
  switch (kind_) {
    case Kind::full:
      out.push_back({0, m_});
      break;
    case Kind::causal:
      out.push_back({0, n + 1});
      break;
    case Kind::sliding_window:
      out.push_back({n + 1 > width_ ? n + 1 - width_ : 0, n + 1});
      break;
    case Kind::block_local:
      out.push_back({(n / width_) * width_, n + 1});
      break;
    case Kind::explicit_table: {
      const std::uint8_t* row = table_.data() + n * m_;
      std::size_t j = 0;
      while (j < m_) {
        while (j < m_ && row[j] == 0) ++j;
        const std::size_t begin = j;
        while (j < m_ && row[j] != 0) ++j;
        if (j > begin) out.push_back({begin, j});
      }
      break;
    }
    case Kind::row_ranges:
      out.assign(flat_ranges_.begin() + static_cast<std::ptrdiff_t>(range_offsets_[n]),
                 flat_ranges_.begin() + static_cast<std::ptrdiff_t>(range_offsets_[n + 1]));
      break;
  }
}

std::size_t Mask::allowed_count(std::size_t n) const {
  std::vector<RowRange> rs;
  ranges(n, rs);
  std::size_t total = 0;
  for (const auto& r : rs) total += r.size();
  return total;
}

void Mask::validate_for(std::size_t n, std::size_t m) const {
  if (n != n_ || m != m_)
    throw ShapeError("mask shape " + shape_string(n_, m_) + " does not match problem " + shape_string(n, m));
  std::vector<RowRange> rs;
  for (std::size_t i = 0; i < n; ++i) {
    ranges(i, rs);
    if (rs.empty()) throw NumericalError("query row " + std::to_string(i) + " has every key masked");
  }
}

Mask make_mask(Mask::Kind kind, std::size_t n, std::size_t m, std::size_t w_or_b) {
  const bool square_only = kind == Mask::Kind::causal || kind == Mask::Kind::sliding_window ||
                           kind == Mask::Kind::block_local;
  if (square_only && n != m) throw ConfigError("causal and windowed masks require N == M");
  switch (kind) {
    case Mask::Kind::full:
      return Mask::full(n, m);
    case Mask::Kind::causal:
      return Mask::causal(n);
    case Mask::Kind::sliding_window:
      return Mask::sliding_window(n, w_or_b);
    case Mask::Kind::block_local:
      return Mask::block_local(n, w_or_b);
    case Mask::Kind::explicit_table:
    case Mask::Kind::row_ranges:
      break;
  }
  throw ConfigError("make_mask: explicit and range masks are built from data, not by kind");
}

// --- Forward ---------------------------------------------------------------

namespace {

template <typename T>
void check_inputs(const BasicAttentionProblem<T>& p, const Mask& mask) {
  p.validate();
  mask.validate_for(p.queries(), p.keys());
}

}  // namespace

template <typename T>
BasicMatrix<T> softmax_attn(const BasicAttentionProblem<T>& p, const Mask& mask) {
  check_inputs(p, mask);
  const std::size_t n_q = p.queries();
  const std::size_t dv = p.value_dim();
  BasicMatrix<T> out(n_q, dv);
  std::vector<T> logits(p.keys());
  std::vector<RowRange> rs;
  for (std::size_t n = 0; n < n_q; ++n) {
    mask.ranges(n, rs);
    T row_max = -std::numeric_limits<T>::infinity();
    for (const auto& r : rs)
      for (std::size_t m = r.begin; m < r.end; ++m) {
        logits[m] = p.scale * dot(p.q.row(n), p.k.row(m));
        row_max = std::max(row_max, logits[m]);
      }
    T total = 0;
    auto o = out.row(n);
    for (const auto& r : rs)
      for (std::size_t m = r.begin; m < r.end; ++m) {
        const T w = std::exp(logits[m] - row_max);
        total += w;
        const auto vm = p.v.row(m);
        for (std::size_t j = 0; j < dv; ++j) o[j] += w * vm[j];
      }
    for (auto& x : o) x /= total;
  }
  return out;
}

template <typename T>
BasicMatrix<T> tiled_softmax_attn_lse(const BasicAttentionProblem<T>& p, const Mask& mask, TileConfig tiles,
                                      std::vector<T>& row_lse, AttnStats* stats) {
  check_inputs(p, mask);
  if (tiles.block_q == 0 || tiles.block_k == 0) throw ConfigError("tile sizes must be >= 1");

  const std::size_t n_q = p.queries();
  const std::size_t n_k = p.keys();
  const std::size_t dv = p.value_dim();
  const std::size_t bq = std::min(tiles.block_q, n_q);
  const std::size_t bk = std::min(tiles.block_k, n_k);

  BasicMatrix<T> out(n_q, dv);
  row_lse.assign(n_q, T(0));
  if (stats) {
    stats->scores_per_query.assign(n_q, 0);
    stats->tiles_visited = 0;
    stats->peak_scratch_elements = 0;
  }

  // Per-block scratch: logits tile, validity flags, running max / normalizer, accumulators.
  std::vector<T> tile(bq * bk);
  std::vector<std::uint8_t> valid(bq * bk);
  std::vector<T> run_max(bq), run_sum(bq);
  std::vector<std::vector<RowRange>> row_ranges(bq);
  BasicMatrix<T> acc(bq, dv);
  if (stats) stats->peak_scratch_elements = tile.size() + valid.size() + 2 * bq + acc.size();

  for (std::size_t q0 = 0; q0 < n_q; q0 += bq) {
    const std::size_t q1 = std::min(q0 + bq, n_q);
    const std::size_t rows = q1 - q0;
    std::size_t span_begin = n_k, span_end = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      mask.ranges(q0 + i, row_ranges[i]);
      span_begin = std::min(span_begin, row_ranges[i].front().begin);
      span_end = std::max(span_end, row_ranges[i].back().end);
      run_max[i] = -std::numeric_limits<T>::infinity();
      run_sum[i] = 0;
    }
    acc.fill(T(0));

    for (std::size_t k0 = (span_begin / bk) * bk; k0 < span_end; k0 += bk) {
      const std::size_t k1 = std::min(k0 + bk, n_k);
      bool any = false;
      for (std::size_t i = 0; i < rows; ++i) {
        std::fill_n(valid.begin() + static_cast<std::ptrdiff_t>(i * bk), bk, std::uint8_t{0});
        T tile_max = -std::numeric_limits<T>::infinity();
        std::size_t evaluated = 0;
        for (const auto& r : row_ranges[i]) {
          const std::size_t b = std::max(r.begin, k0), e = std::min(r.end, k1);
          for (std::size_t m = b; m < e; ++m) {
            const T s = p.scale * dot(p.q.row(q0 + i), p.k.row(m));
            tile[i * bk + (m - k0)] = s;
            valid[i * bk + (m - k0)] = 1;
            tile_max = std::max(tile_max, s);
            ++evaluated;
          }
        }
        if (evaluated == 0) continue;
        any = true;
        if (stats) stats->scores_per_query[q0 + i] += evaluated;

        const T new_max = std::max(run_max[i], tile_max);
        const T correction = std::exp(run_max[i] - new_max);  // 0 on the first visited tile
        auto acc_row = acc.row(i);
        for (auto& a : acc_row) a *= correction;
        T tile_sum = 0;
        for (std::size_t m = k0; m < k1; ++m) {
          if (!valid[i * bk + (m - k0)]) continue;
          const T w = std::exp(tile[i * bk + (m - k0)] - new_max);
          tile_sum += w;
          const auto vm = p.v.row(m);
          for (std::size_t j = 0; j < dv; ++j) acc_row[j] += w * vm[j];
        }
        run_sum[i] = run_sum[i] * correction + tile_sum;
        run_max[i] = new_max;
      }
      if (stats && any) ++stats->tiles_visited;
    }

    for (std::size_t i = 0; i < rows; ++i) {
      auto o = out.row(q0 + i);
      const auto a = acc.row(i);
      for (std::size_t j = 0; j < dv; ++j) o[j] = a[j] / run_sum[i];
      row_lse[q0 + i] = run_max[i] + std::log(run_sum[i]);
    }
  }
  return out;
}

template <typename T>
BasicMatrix<T> tiled_softmax_attn(const BasicAttentionProblem<T>& p, const Mask& mask, TileConfig tiles,
                                  AttnStats* stats) {
  std::vector<T> lse;
  return tiled_softmax_attn_lse(p, mask, tiles, lse, stats);
}

// --- Backward --------------------------------------------------------------

template <typename T>
BasicAttentionGrads<T> attn_backward(const BasicAttentionProblem<T>& p, const Mask& mask, const BasicMatrix<T>& d_out,
                                     TileConfig tiles) {
  std::vector<T> lse;
  const BasicMatrix<T> out = tiled_softmax_attn_lse(p, mask, tiles, lse);
  if (d_out.rows() != p.queries() || d_out.cols() != p.value_dim())
    throw ShapeError("d_out must be " + shape_string(p.queries(), p.value_dim()));
  if (!all_finite(d_out)) throw NumericalError("d_out must be finite");

  const std::size_t n_q = p.queries();
  const std::size_t n_k = p.keys();
  const std::size_t d = p.key_dim();
  const std::size_t dv = p.value_dim();
  const std::size_t bq = std::min(tiles.block_q, n_q);
  const std::size_t bk = std::min(tiles.block_k, n_k);

  BasicAttentionGrads<T> g{BasicMatrix<T>(n_q, d), BasicMatrix<T>(n_k, d), BasicMatrix<T>(n_k, dv)};

  // delta_n = dO_n . O_n, the row term of the softmax Jacobian.
  std::vector<T> delta(n_q);
  for (std::size_t n = 0; n < n_q; ++n) delta[n] = dot(d_out.row(n), out.row(n));

  std::vector<std::vector<RowRange>> row_ranges(bq);
  for (std::size_t q0 = 0; q0 < n_q; q0 += bq) {
    const std::size_t q1 = std::min(q0 + bq, n_q);
    std::size_t span_begin = n_k, span_end = 0;
    for (std::size_t i = 0; i < q1 - q0; ++i) {
      mask.ranges(q0 + i, row_ranges[i]);
      span_begin = std::min(span_begin, row_ranges[i].front().begin);
      span_end = std::max(span_end, row_ranges[i].back().end);
    }
    for (std::size_t k0 = (span_begin / bk) * bk; k0 < span_end; k0 += bk) {
      const std::size_t k1 = std::min(k0 + bk, n_k);
      for (std::size_t i = 0; i < q1 - q0; ++i) {
        const std::size_t n = q0 + i;
        const auto qn = p.q.row(n);
        const auto don = d_out.row(n);
        auto dqn = g.dq.row(n);
        for (const auto& r : row_ranges[i]) {
          const std::size_t b = std::max(r.begin, k0), e = std::min(r.end, k1);
          for (std::size_t m = b; m < e; ++m) {
            const auto km = p.k.row(m);
            const T prob = std::exp(p.scale * dot(qn, km) - lse[n]);
            auto dvm = g.dv.row(m);
            for (std::size_t j = 0; j < dv; ++j) dvm[j] += prob * don[j];
            const T dprob = dot(don, p.v.row(m));
            const T dlogit = prob * (dprob - delta[n]) * p.scale;
            auto dkm = g.dk.row(m);
            for (std::size_t j = 0; j < d; ++j) {
              dqn[j] += dlogit * km[j];
              dkm[j] += dlogit * qn[j];
            }
          }
        }
      }
    }
  }
  return g;
}

Matrix attention_weights(const AttentionProblem& p, const Mask& mask) {
  check_inputs(p, mask);
  Matrix w(p.queries(), p.keys());
  std::vector<RowRange> rs;
  for (std::size_t n = 0; n < p.queries(); ++n) {
    mask.ranges(n, rs);
    auto row = w.row(n);
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& r : rs)
      for (std::size_t m = r.begin; m < r.end; ++m) {
        row[m] = p.scale * dot(p.q.row(n), p.k.row(m));
        mx = std::max(mx, row[m]);
      }
    double total = 0.0;
    for (const auto& r : rs)
      for (std::size_t m = r.begin; m < r.end; ++m) total += (row[m] = std::exp(row[m] - mx));
    for (const auto& r : rs)
      for (std::size_t m = r.begin; m < r.end; ++m) row[m] /= total;
  }
  return w;
}

#define EVAKIT_INSTANTIATE_ATTENTION(T)                                                                      \
  template BasicMatrix<T> softmax_attn<T>(const BasicAttentionProblem<T>&, const Mask&);                    \
  template BasicMatrix<T> tiled_softmax_attn<T>(const BasicAttentionProblem<T>&, const Mask&, TileConfig,  \
                                                AttnStats*);                                                \
  template BasicMatrix<T> tiled_softmax_attn_lse<T>(const BasicAttentionProblem<T>&, const Mask&, TileConfig, \
                                                    std::vector<T>&, AttnStats*);                           \
  template BasicAttentionGrads<T> attn_backward<T>(const BasicAttentionProblem<T>&, const Mask&,            \
                                                   const BasicMatrix<T>&, TileConfig);

EVAKIT_INSTANTIATE_ATTENTION(double)
EVAKIT_INSTANTIATE_ATTENTION(float)

#undef EVAKIT_INSTANTIATE_ATTENTION

}  // namespace evakit
