#pragma once

#include <cstdint>
#include <span>

#include "evakit/attention.hpp"
#include "evakit/tensor.hpp"

namespace evakit {

enum class ProposalKind {
  standard_normal,  // N(0, I)
  mixture_pn,       // sum_m pi_m N(q + k_m, I), the query-conditioned optimal proposal
  gaussian,         // N(mu, I)
  clipped,          // lambda-scaled, [-1, 1]-clipped Gaussian around mu
};

enum class ClipMode {
  as_printed,            // omega = lambda * clip(mu + eps)
  clip_scale_deviation,  // omega = mu + lambda * clip(eps)
};

struct ProposalSpec {
  ProposalKind kind = ProposalKind::standard_normal;
  Vector mu;            // gaussian / clipped center
  double lambda = 0.1;  // clipped scale
  ClipMode clip_mode = ClipMode::as_printed;
  Vector query;         // mixture_pn conditioning query (already scaled)
  Matrix keys;          // mixture_pn components

  static ProposalSpec standard_normal();
  static ProposalSpec gaussian(Vector mu);
  static ProposalSpec clipped(Vector mu, double lambda = 0.1, ClipMode mode = ClipMode::as_printed);
  static ProposalSpec mixture_pn(Vector query, Matrix keys);

  void validate(std::size_t dim) const;
  // Whether log_density is defined (the clipped law has atoms at the bounds).
  bool has_density() const;
};

struct RandomFeatureDraw {
  Matrix omegas;  // S x D samples
  Matrix noise;   // S x D standard-normal noise the samples were built from
  ProposalSpec proposal;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;

  std::size_t samples() const { return omegas.rows(); }
  std::size_t dim() const { return omegas.cols(); }
};

// Deterministic per (spec, S, D, seed, stream).
RandomFeatureDraw sample_proposal(const ProposalSpec& spec, std::size_t samples, std::size_t dim,
                                  std::uint64_t seed, std::uint64_t stream = 0);

// Rebuilds omegas from stored noise for a new center (clipped / gaussian kinds).
Matrix transform_noise(const ProposalSpec& spec, const Matrix& noise);

double log_proposal_density(const ProposalSpec& spec, std::span<const double> omega);

// log xi(x, omega_s) = omega_s . x - |x|^2 / 2, one entry per sample.
Vector log_xi_features(std::span<const double> x, const RandomFeatureDraw& draw);
Vector xi_features(std::span<const double> x, const RandomFeatureDraw& draw);

// Softmax weights pi_m of one query (scale applied to the logits).
Vector expected_weights(std::span<const double> q, const Matrix& keys, double scale = 1.0);

// f_n(omega): the xi-weighted average of value rows for one sample. The query
// factor cancels, so only keys enter.
Vector randomized_attention_integrand(std::span<const double> omega, const Matrix& keys, const Matrix& values);

// Random Feature Attention for every query. The logit scale is folded into
// the queries, so exp(scale q.k) is the kernel being approximated.
Matrix rfa(const AttentionProblem& p, const RandomFeatureDraw& draw);

// Plain Monte Carlo over the mixture proposal p_n: average of f_n over S draws.
Vector randomized_attn_mc(std::span<const double> q, const Matrix& keys, const Matrix& values, std::size_t samples,
                          std::uint64_t seed, double scale = 1.0);

// Self-normalized importance sampling of the randomized-attention expectation
// with the draw's proposal as q(omega).
Vector snis_rfa(std::span<const double> q, const Matrix& keys, const Matrix& values, const RandomFeatureDraw& draw,
                double scale = 1.0);

// Importance weights p_n(omega_s) / q(omega_s), in log domain.
Vector log_importance_weights(std::span<const double> q, const Matrix& keys, const RandomFeatureDraw& draw,
                              double scale = 1.0);

}  // namespace evakit
