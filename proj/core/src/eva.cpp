#include "evakit/eva.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "evakit/linalg.hpp"
#include "evakit/rng.hpp"

namespace evakit {

void EvaConfig::validate() const {
  if (window == 0) throw ConfigError("window must be >= 1");
  if (chunk == 0) throw ConfigError("chunk must be >= 1");
  if (window % chunk != 0)
    throw ConfigError("window (" + std::to_string(window) + ") must be a multiple of chunk (" +
                      std::to_string(chunk) + ")");
  if (samples == 0) throw ConfigError("samples must be >= 1");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be > 0");
}

std::string to_string(WindowMode mode) {
  return mode == WindowMode::block_local ? "block-local" : "sliding-chunk-aligned";
}

std::string to_string(ChunkProposal proposal) {
  switch (proposal) {
    case ChunkProposal::standard_normal:
      return "standard-normal";
    case ChunkProposal::gaussian_mean_key:
      return "gaussian-mean-key";
    case ChunkProposal::clipped:
      return "clipped";
  }
  return "unknown";
}

std::string to_string(ClipMode mode) {
  return mode == ClipMode::as_printed ? "as-printed" : "clip-scale-deviation";
}

WindowMode parse_window_mode(const std::string& s) {
  if (s == "block-local") return WindowMode::block_local;
  if (s == "sliding-chunk-aligned" || s == "sliding") return WindowMode::sliding_chunk_aligned;
  throw ConfigError("unknown window mode '" + s + "'");
}

ChunkProposal parse_chunk_proposal(const std::string& s) {
  if (s == "standard-normal") return ChunkProposal::standard_normal;
  if (s == "gaussian-mean-key") return ChunkProposal::gaussian_mean_key;
  if (s == "clipped") return ChunkProposal::clipped;
  throw ConfigError("unknown chunk proposal '" + s + "'");
}

ClipMode parse_clip_mode(const std::string& s) {
  if (s == "as-printed") return ClipMode::as_printed;
  if (s == "clip-scale-deviation") return ClipMode::clip_scale_deviation;
  throw ConfigError("unknown clip mode '" + s + "'");
}

Partition partition_sequence(std::size_t query, const EvaConfig& cfg) {
  cfg.validate();
  Partition part;
  part.query = query;
  part.chunk = cfg.chunk;
  part.local_end = query + 1;
  if (cfg.mode == WindowMode::block_local) {
    part.local_begin = (query / cfg.window) * cfg.window;
  } else {
    // 1-indexed window (a - w, a] with a = chunk * ceil((query + 1) / chunk).
    const std::size_t aligned = cfg.chunk * ((query + cfg.chunk) / cfg.chunk);
    part.local_begin = aligned > cfg.window ? aligned - cfg.window : 0;
  }
  part.chunk_count = part.local_begin / cfg.chunk;
  return part;
}

std::size_t total_chunks(std::size_t n, const EvaConfig& cfg) {
  return n == 0 ? 0 : partition_sequence(n - 1, cfg).chunk_count;
}

std::uint64_t chunk_seed(const EvaConfig& cfg, std::size_t index) {
  return derive_seed(cfg.seed, cfg.layer, cfg.head, index);
}

ProposalSpec chunk_proposal(const EvaConfig& cfg, std::span<const double> mean_key) {
  switch (cfg.proposal) {
    case ChunkProposal::standard_normal:
      return ProposalSpec::standard_normal();
    case ChunkProposal::gaussian_mean_key:
      return ProposalSpec::gaussian(Vector(mean_key.begin(), mean_key.end()));
    case ChunkProposal::clipped:
      return ProposalSpec::clipped(Vector(mean_key.begin(), mean_key.end()), cfg.lambda, cfg.clip_mode);
  }
  throw ConfigError("unknown chunk proposal");
}

RandomFeatureDraw chunk_draw(const EvaConfig& cfg, std::size_t index, std::span<const double> mean_key) {
  return sample_proposal(chunk_proposal(cfg, mean_key), cfg.samples, mean_key.size(), chunk_seed(cfg, index));
}

ChunkSummary chunk_summary(const Matrix& chunk_keys, const Matrix& chunk_values, const RandomFeatureDraw& draw) {
  if (chunk_keys.rows() == 0) throw ShapeError("chunk_summary: empty chunk");
  if (chunk_values.rows() != chunk_keys.rows()) throw ShapeError("chunk_summary: key/value row mismatch");
  if (draw.dim() != chunk_keys.cols()) throw ShapeError("chunk_summary: draw dimension mismatch");

  const std::size_t members = chunk_keys.rows();
  const std::size_t n_s = draw.samples();
  Vector logits(n_s * members);
  for (std::size_t m = 0; m < members; ++m) {
    const double half_sq = 0.5 * squared_norm(chunk_keys.row(m));
    for (std::size_t s = 0; s < n_s; ++s)
      logits[s * members + m] = dot(draw.omegas.row(s), chunk_keys.row(m)) - half_sq;
  }
  softmax_inplace(logits);

  ChunkSummary out;
  out.k_tilde = column_mean(chunk_keys);
  out.beta_hat.assign(chunk_values.cols(), 0.0);
  for (std::size_t s = 0; s < n_s; ++s)
    for (std::size_t m = 0; m < members; ++m) {
      const double a = logits[s * members + m];
      const auto vm = chunk_values.row(m);
      for (std::size_t j = 0; j < vm.size(); ++j) out.beta_hat[j] += a * vm[j];
    }
  out.omega = draw;
  out.member_count = members;
  return out;
}

std::vector<ChunkSummary> summarize_chunks(const Matrix& keys, const Matrix& values, std::size_t count,
                                           const EvaConfig& cfg) {
  cfg.validate();
  if (count * cfg.chunk > keys.rows()) throw ShapeError("summarize_chunks: chunks extend past the sequence");
  std::vector<ChunkSummary> out;
  out.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    const Matrix kc = keys.slice_rows(c * cfg.chunk, (c + 1) * cfg.chunk);
    const Matrix vc = values.slice_rows(c * cfg.chunk, (c + 1) * cfg.chunk);
    const Vector mean = column_mean(kc);
    ChunkSummary s = chunk_summary(kc, vc, chunk_draw(cfg, c, mean));
    s.index = c;
    out.push_back(std::move(s));
  }
  return out;
}

TokenTerms per_token_terms(std::span<const double> q, const Matrix& keys, const Matrix& values,
                           const RandomFeatureDraw& draw, double scale) {
  if (keys.rows() != values.rows() || keys.rows() == 0) throw ShapeError("per_token_terms: bad key/value rows");
  if (q.size() != keys.cols() || draw.dim() != keys.cols()) throw ShapeError("per_token_terms: dimension mismatch");
  if (!draw.proposal.has_density()) throw ConfigError("per_token_terms needs a proposal with a density");

  // h_m = (1/S) sum_s N(w_s; 0, I) xi(q, w_s) xi(k_m, w_s) / (Z q(w_s))
  //     = (1/S) sum_s pi_m N(w_s; q + k_m, I) / q(w_s).
  Vector q_scaled(q.begin(), q.end());
  for (double& x : q_scaled) x *= scale;
  const Vector pi = expected_weights(q, keys, scale);
  const std::size_t n_s = draw.samples();
  const std::size_t dim = keys.cols();
  TokenTerms t{Matrix(keys.rows(), values.cols()), Vector(keys.rows(), 0.0)};
  Vector terms(n_s);
  for (std::size_t m = 0; m < keys.rows(); ++m) {
    for (std::size_t s = 0; s < n_s; ++s) {
      const auto omega = draw.omegas.row(s);
      double sq = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double d = omega[j] - q_scaled[j] - keys(m, j);
        sq += d * d;
      }
      const double log_component = -0.5 * sq - 0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi);
      terms[s] = std::log(pi[m]) + log_component - log_proposal_density(draw.proposal, omega);
    }
    t.h[m] = std::exp(log_sum_exp(terms)) / static_cast<double>(n_s);
    for (std::size_t j = 0; j < values.cols(); ++j) t.g(m, j) = t.h[m] * values(m, j);
  }
  return t;
}

Vector control_variate_estimate(const Matrix& g_parts, std::span<const double> h_parts, const Matrix& betas,
                                std::span<const double> expected_h) {
  const std::size_t tokens = g_parts.rows();
  if (h_parts.size() != tokens || betas.rows() != tokens || expected_h.size() != tokens ||
      betas.cols() != g_parts.cols())
    throw ShapeError("control_variate_estimate: length mismatch");
  Vector out(g_parts.cols(), 0.0);
  for (std::size_t m = 0; m < tokens; ++m) {
    const double residual = h_parts[m] - expected_h[m];
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += g_parts(m, j) - betas(m, j) * residual;
  }
  return out;
}

Matrix eva_attn_direct(const AttentionProblem& p, const EvaConfig& cfg,
                       std::span<const ChunkSummary> summaries) {
  p.validate();
  cfg.validate();
  if (p.queries() != p.keys()) throw ShapeError("eva attention is causal: N must equal M");
  const std::size_t n_tok = p.queries();
  const std::size_t dv = p.value_dim();
  if (summaries.size() < total_chunks(n_tok, cfg)) throw ShapeError("eva_attn_direct: missing chunk summaries");

  Matrix out(n_tok, dv);
  Vector logits;
  for (std::size_t n = 0; n < n_tok; ++n) {
    const Partition part = partition_sequence(n, cfg);
    const auto qn = p.q.row(n);
    logits.assign(part.attended_rows(), 0.0);
    for (std::size_t i = 0; i < part.local_size(); ++i)
      logits[i] = p.scale * dot(qn, p.k.row(part.local_begin + i));
    for (std::size_t c = 0; c < part.chunk_count; ++c)
      logits[part.local_size() + c] = p.scale * dot(qn, std::span<const double>(summaries[c].k_tilde));
    // Z shares one max across local and chunk terms.
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    auto o = out.row(n);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double w = std::exp(logits[i] - mx);
      z += w;
      const std::span<const double> value = i < part.local_size()
                                                ? p.v.row(part.local_begin + i)
                                                : std::span<const double>(summaries[i - part.local_size()].beta_hat);
      for (std::size_t j = 0; j < dv; ++j) o[j] += w * value[j];
    }
    for (double& x : o) x /= z;
  }
  return out;
}

Matrix eva_attn_direct(const AttentionProblem& p, const EvaConfig& cfg) {
  const auto summaries = summarize_chunks(p.k, p.v, total_chunks(p.queries(), cfg), cfg);
  return eva_attn_direct(p, cfg, summaries);
}

}  // namespace evakit
