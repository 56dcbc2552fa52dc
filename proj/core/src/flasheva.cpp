#include "evakit/flasheva.hpp"

#include <algorithm>
#include <cmath>

namespace evakit {

std::vector<Partition> partition_all(std::size_t n, const EvaConfig& cfg) {
  cfg.validate();
  std::vector<Partition> parts;
  parts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) parts.push_back(partition_sequence(i, cfg));
  return parts;
}

AugmentedKV build_augmented(const Matrix& keys, const Matrix& values, std::span<const Partition> parts,
                            std::span<const ChunkSummary> summaries) {
  if (keys.rows() != values.rows()) throw ShapeError("build_augmented: key/value row mismatch");
  if (parts.size() != keys.rows()) throw ShapeError("build_augmented: need one partition per position");
  std::size_t needed = 0;
  for (const auto& part : parts) needed = std::max(needed, part.chunk_count);
  if (summaries.size() != needed)
    throw ShapeError("build_augmented: " + std::to_string(summaries.size()) + " summaries for " +
                     std::to_string(needed) + " chunks");

  const std::size_t n_local = keys.rows();
  const std::size_t n_rows = n_local + summaries.size();
  AugmentedKV aug;
  aug.local_rows = n_local;
  aug.rfa_rows = summaries.size();
  aug.k_tilde = Matrix(n_rows, keys.cols());
  aug.v_tilde = Matrix(n_rows, values.cols());
  aug.origin.reserve(n_rows);
  std::copy(keys.storage().begin(), keys.storage().end(), aug.k_tilde.data());
  std::copy(values.storage().begin(), values.storage().end(), aug.v_tilde.data());
  for (std::size_t i = 0; i < n_local; ++i) aug.origin.push_back({RowOrigin::local, i});
  for (std::size_t c = 0; c < summaries.size(); ++c) {
    const auto& s = summaries[c];
    if (s.k_tilde.size() != keys.cols() || s.beta_hat.size() != values.cols())
      throw ShapeError("build_augmented: summary dimension mismatch");
    std::copy(s.k_tilde.begin(), s.k_tilde.end(), aug.k_tilde.row(n_local + c).begin());
    std::copy(s.beta_hat.begin(), s.beta_hat.end(), aug.v_tilde.row(n_local + c).begin());
    aug.origin.push_back({RowOrigin::rfa, c});
  }

  std::vector<std::vector<RowRange>> ranges(parts.size());
  for (std::size_t n = 0; n < parts.size(); ++n) {
    const Partition& part = parts[n];
    ranges[n].push_back({part.local_begin, part.local_end});
    if (part.chunk_count > 0) ranges[n].push_back({n_local, n_local + part.chunk_count});
  }
  aug.mask = Mask::from_ranges(n_rows, std::move(ranges));
  return aug;
}

AugmentedKV build_augmented_for_query(const Matrix& keys, const Matrix& values, const Partition& part,
                                      std::span<const ChunkSummary> summaries) {
  if (summaries.size() < part.chunk_count) throw ShapeError("build_augmented_for_query: missing summaries");
  if (part.local_end > keys.rows()) throw ShapeError("build_augmented_for_query: partition past the sequence");
  AugmentedKV aug;
  aug.local_rows = part.local_size();
  aug.rfa_rows = part.chunk_count;
  const std::size_t n_rows = aug.local_rows + aug.rfa_rows;
  aug.k_tilde = Matrix(n_rows, keys.cols());
  aug.v_tilde = Matrix(n_rows, values.cols());
  for (std::size_t i = 0; i < aug.local_rows; ++i) {
    const std::size_t pos = part.local_begin + i;
    std::copy(keys.row(pos).begin(), keys.row(pos).end(), aug.k_tilde.row(i).begin());
    std::copy(values.row(pos).begin(), values.row(pos).end(), aug.v_tilde.row(i).begin());
    aug.origin.push_back({RowOrigin::local, pos});
  }
  for (std::size_t c = 0; c < part.chunk_count; ++c) {
    std::copy(summaries[c].k_tilde.begin(), summaries[c].k_tilde.end(), aug.k_tilde.row(aug.local_rows + c).begin());
    std::copy(summaries[c].beta_hat.begin(), summaries[c].beta_hat.end(),
              aug.v_tilde.row(aug.local_rows + c).begin());
    aug.origin.push_back({RowOrigin::rfa, c});
  }
  aug.mask = Mask::full(1, n_rows);
  return aug;
}

Matrix flasheva_attn_with_summaries(const AttentionProblem& p, const EvaConfig& cfg,
                                    std::span<const ChunkSummary> summaries, TileConfig tiles, AttnStats* stats) {
  p.validate();
  if (p.queries() != p.keys()) throw ShapeError("flasheva is causal: N must equal M");
  const auto parts = partition_all(p.queries(), cfg);
  AugmentedKV aug = build_augmented(p.k, p.v, parts, summaries);
  const AttentionProblem augmented{p.q, std::move(aug.k_tilde), std::move(aug.v_tilde), p.scale};
  return tiled_softmax_attn(augmented, aug.mask, tiles, stats);
}

Matrix flasheva_attn(const AttentionProblem& p, const EvaConfig& cfg, TileConfig tiles, AttnStats* stats) {
  p.validate();
  const auto summaries = summarize_chunks(p.k, p.v, total_chunks(p.queries(), cfg), cfg);
  return flasheva_attn_with_summaries(p, cfg, summaries, tiles, stats);
}

namespace {

// Chain a chunk row's gradients (d k_tilde, d beta_hat) back to the chunk's keys and values.
void backprop_chunk(const ChunkSummary& summary, std::size_t begin, const Matrix& keys, const Matrix& values,
                    std::span<const double> d_k_tilde, std::span<const double> d_beta, AttentionGrads& g) {
  const RandomFeatureDraw& draw = summary.omega;
  const std::size_t members = summary.member_count;
  const std::size_t dim = keys.cols();
  const std::size_t dv = values.cols();
  const std::size_t n_s = draw.samples();

  Vector weights(n_s * members);
  for (std::size_t m = 0; m < members; ++m) {
    const double half_sq = 0.5 * squared_norm(keys.row(begin + m));
    for (std::size_t s = 0; s < n_s; ++s)
      weights[s * members + m] = dot(draw.omegas.row(s), keys.row(begin + m)) - half_sq;
  }
  softmax_inplace(weights);

  const double beta_dot = dot(std::span<const double>(summary.beta_hat), d_beta);
  Matrix d_omega(n_s, dim);
  for (std::size_t m = 0; m < members; ++m) {
    const auto km = keys.row(begin + m);
    auto dkm = g.dk.row(begin + m);
    auto dvm = g.dv.row(begin + m);
    const double value_dot = dot(values.row(begin + m), d_beta);
    for (std::size_t s = 0; s < n_s; ++s) {
      const double a = weights[s * members + m];
      for (std::size_t j = 0; j < dv; ++j) dvm[j] += a * d_beta[j];
      // d logit_{s,m}; logit = omega_s . k_m - |k_m|^2 / 2.
      const double d_logit = a * (value_dot - beta_dot);
      const auto omega = draw.omegas.row(s);
      auto d_om = d_omega.row(s);
      for (std::size_t j = 0; j < dim; ++j) {
        dkm[j] += d_logit * (omega[j] - km[j]);
        d_om[j] += d_logit * km[j];
      }
    }
  }

  // Reparameterized draw: omega is a function of the mean key for centered proposals.
  Vector d_mean(d_k_tilde.begin(), d_k_tilde.end());
  const ProposalSpec& prop = draw.proposal;
  for (std::size_t s = 0; s < n_s; ++s) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = d_omega(s, j);
      switch (prop.kind) {
        case ProposalKind::standard_normal:
        case ProposalKind::mixture_pn:
          break;
        case ProposalKind::gaussian:
          d_mean[j] += d;
          break;
        case ProposalKind::clipped:
          if (prop.clip_mode == ClipMode::clip_scale_deviation) {
            d_mean[j] += d;
          } else if (std::abs(prop.mu[j] + draw.noise(s, j)) < 1.0) {
            d_mean[j] += prop.lambda * d;
          }
          break;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(members);
  for (std::size_t m = 0; m < members; ++m) {
    auto dkm = g.dk.row(begin + m);
    for (std::size_t j = 0; j < dim; ++j) dkm[j] += d_mean[j] * inv;
  }
}

}  // namespace

AttentionGrads flasheva_backward(const AttentionProblem& p, const EvaConfig& cfg, const Matrix& d_out,
                                 TileConfig tiles) {
  p.validate();
  if (p.queries() != p.keys()) throw ShapeError("flasheva is causal: N must equal M");
  const std::size_t n_tok = p.queries();
  const auto summaries = summarize_chunks(p.k, p.v, total_chunks(n_tok, cfg), cfg);
  const auto parts = partition_all(n_tok, cfg);
  AugmentedKV aug = build_augmented(p.k, p.v, parts, summaries);
  const AttentionProblem augmented{p.q, std::move(aug.k_tilde), std::move(aug.v_tilde), p.scale};
  const AttentionGrads ag = attn_backward(augmented, aug.mask, d_out, tiles);

  AttentionGrads g{ag.dq, ag.dk.slice_rows(0, n_tok), ag.dv.slice_rows(0, n_tok)};
  for (std::size_t c = 0; c < summaries.size(); ++c)
    backprop_chunk(summaries[c], c * cfg.chunk, p.k, p.v, ag.dk.row(n_tok + c), ag.dv.row(n_tok + c), g);
  return g;
}

}  // namespace evakit
