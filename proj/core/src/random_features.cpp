#include "evakit/random_features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "evakit/rng.hpp"

namespace evakit {

namespace {

double log_gaussian_unit(std::span<const double> omega, std::span<const double> center) {
  double sq = 0.0;
  for (std::size_t i = 0; i < omega.size(); ++i) {
    const double d = omega[i] - (center.empty() ? 0.0 : center[i]);
    sq += d * d;
  }
  return -0.5 * sq - 0.5 * static_cast<double>(omega.size()) * std::log(2.0 * std::numbers::pi);
}

Vector log_softmax_weights(std::span<const double> q, const Matrix& keys, double scale) {
  Vector logits(keys.rows());
  for (std::size_t m = 0; m < keys.rows(); ++m) logits[m] = scale * dot(q, keys.row(m));
  const double lse = log_sum_exp(logits);
  if (!std::isfinite(lse)) throw NumericalError("mixture weights are degenerate (non-finite log-normalizer)");
  for (double& l : logits) l -= lse;
  return logits;
}

void check_finite(std::span<const double> x, const char* what) {
  if (!all_finite(x)) throw NumericalError(std::string(what) + " must be finite");
}

}  // namespace

// --- ProposalSpec ----------------------------------------------------------

ProposalSpec ProposalSpec::standard_normal() { return ProposalSpec{}; }

ProposalSpec ProposalSpec::gaussian(Vector mu) {
  ProposalSpec s;
  s.kind = ProposalKind::gaussian;
  s.mu = std::move(mu);
  return s;
}

ProposalSpec ProposalSpec::clipped(Vector mu, double lambda, ClipMode mode) {
  ProposalSpec s;
  s.kind = ProposalKind::clipped;
  s.mu = std::move(mu);
  s.lambda = lambda;
  s.clip_mode = mode;
  return s;
}

ProposalSpec ProposalSpec::mixture_pn(Vector query, Matrix keys) {
  ProposalSpec s;
  s.kind = ProposalKind::mixture_pn;
  s.query = std::move(query);
  s.keys = std::move(keys);
  return s;
}

void ProposalSpec::validate(std::size_t dim) const {
  switch (kind) {
    case ProposalKind::standard_normal:
      return;
    case ProposalKind::gaussian:
    case ProposalKind::clipped:
      if (mu.size() != dim) throw ConfigError("proposal center has wrong dimension");
      if (kind == ProposalKind::clipped && !(lambda > 0.0 && std::isfinite(lambda)))
        throw ConfigError("clipped proposal needs lambda > 0");
      check_finite(mu, "proposal center");
      return;
    case ProposalKind::mixture_pn:
      if (query.size() != dim || keys.cols() != dim || keys.rows() == 0)
        throw ConfigError("mixture proposal needs a query and at least one key of matching dimension");
      check_finite(query, "mixture query");
      check_finite(keys.storage(), "mixture keys");
      return;
  }
}

bool ProposalSpec::has_density() const { return kind != ProposalKind::clipped; }

// --- Sampling --------------------------------------------------------------

Matrix transform_noise(const ProposalSpec& spec, const Matrix& noise) {
  Matrix omegas = noise;
  const std::size_t dim = noise.cols();
  for (std::size_t s = 0; s < noise.rows(); ++s) {
    auto row = omegas.row(s);
    switch (spec.kind) {
      case ProposalKind::standard_normal:
        break;
      case ProposalKind::gaussian:
        for (std::size_t j = 0; j < dim; ++j) row[j] += spec.mu[j];
        break;
      case ProposalKind::clipped:
        for (std::size_t j = 0; j < dim; ++j) {
          row[j] = spec.clip_mode == ClipMode::as_printed
                       ? spec.lambda * std::clamp(spec.mu[j] + row[j], -1.0, 1.0)
                       : spec.mu[j] + spec.lambda * std::clamp(row[j], -1.0, 1.0);
        }
        break;
      case ProposalKind::mixture_pn:
        throw ConfigError("mixture samples depend on component choices; use sample_proposal");
    }
  }
  return omegas;
}

RandomFeatureDraw sample_proposal(const ProposalSpec& spec, std::size_t samples, std::size_t dim,
                                  std::uint64_t seed, std::uint64_t stream) {
  if (samples == 0) throw ConfigError("sample count must be >= 1");
  if (dim == 0) throw ConfigError("feature dimension must be >= 1");
  spec.validate(dim);

  RandomFeatureDraw draw;
  draw.proposal = spec;
  draw.seed = seed;
  draw.stream = stream;
  draw.noise = Matrix(samples, dim);
  CounterRng rng(seed, stream);

  if (spec.kind != ProposalKind::mixture_pn) {
    for (double& x : draw.noise.storage()) x = rng.normal();
    draw.omegas = transform_noise(spec, draw.noise);
    return draw;
  }

  // Mixture: pick component m with probability pi_m, then omega ~ N(q + k_m, I).
  const Vector log_pi = log_softmax_weights(spec.query, spec.keys, 1.0);
  Vector cumulative(log_pi.size());
  double running = 0.0;
  for (std::size_t m = 0; m < log_pi.size(); ++m) cumulative[m] = (running += std::exp(log_pi[m]));
  draw.omegas = Matrix(samples, dim);
  for (std::size_t s = 0; s < samples; ++s) {
    const double u = rng.uniform() * running;
    const std::size_t m = std::min<std::size_t>(
        static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin()),
        log_pi.size() - 1);
    for (std::size_t j = 0; j < dim; ++j) {
      const double eps = rng.normal();
      draw.noise(s, j) = eps;
      draw.omegas(s, j) = spec.query[j] + spec.keys(m, j) + eps;
    }
  }
  return draw;
}

double log_proposal_density(const ProposalSpec& spec, std::span<const double> omega) {
  switch (spec.kind) {
    case ProposalKind::standard_normal:
      return log_gaussian_unit(omega, {});
    case ProposalKind::gaussian:
      return log_gaussian_unit(omega, spec.mu);
    case ProposalKind::mixture_pn: {
      const Vector log_pi = log_softmax_weights(spec.query, spec.keys, 1.0);
      Vector terms(log_pi.size());
      Vector center(omega.size());
      for (std::size_t m = 0; m < log_pi.size(); ++m) {
        for (std::size_t j = 0; j < omega.size(); ++j) center[j] = spec.query[j] + spec.keys(m, j);
        terms[m] = log_pi[m] + log_gaussian_unit(omega, center);
      }
      return log_sum_exp(terms);
    }
    case ProposalKind::clipped:
      break;
  }
  throw ConfigError("the clipped proposal has no density; it cannot drive importance weights");
}

// --- Feature maps ----------------------------------------------------------

Vector log_xi_features(std::span<const double> x, const RandomFeatureDraw& draw) {
  if (x.size() != draw.dim()) throw ShapeError("xi_features: dimension mismatch");
  check_finite(x, "xi_features input");
  const double half_sq = 0.5 * squared_norm(x);
  Vector out(draw.samples());
  for (std::size_t s = 0; s < draw.samples(); ++s) out[s] = dot(draw.omegas.row(s), x) - half_sq;
  return out;
}

Vector xi_features(std::span<const double> x, const RandomFeatureDraw& draw) {
  Vector out = log_xi_features(x, draw);
  for (double& v : out) v = std::exp(v);
  return out;
}

Vector expected_weights(std::span<const double> q, const Matrix& keys, double scale) {
  Vector pi = log_softmax_weights(q, keys, scale);
  for (double& p : pi) p = std::exp(p);
  return pi;
}

Vector randomized_attention_integrand(std::span<const double> omega, const Matrix& keys, const Matrix& values) {
  Vector logits(keys.rows());
  const std::size_t dim = omega.size();
  for (std::size_t m = 0; m < keys.rows(); ++m) {
    const auto km = keys.row(m);
    double proj = 0.0, sq = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      proj += omega[j] * km[j];
      sq += km[j] * km[j];
    }
    logits[m] = proj - 0.5 * sq;
  }
  softmax_inplace(logits);
  Vector out(values.cols(), 0.0);
  for (std::size_t m = 0; m < keys.rows(); ++m)
    for (std::size_t j = 0; j < values.cols(); ++j) out[j] += logits[m] * values(m, j);
  return out;
}

// --- Estimators ------------------------------------------------------------

Matrix rfa(const AttentionProblem& p, const RandomFeatureDraw& draw) {
  p.validate();
  if (draw.dim() != p.key_dim()) throw ShapeError("rfa: draw dimension does not match keys");
  const std::size_t n_s = draw.samples();
  const std::size_t dv = p.value_dim();

  // Per-sample key sums: log c_s = lse_m log xi(k_m, w_s), A_s = sum_m xi v_m / c_s.
  Vector log_c(n_s);
  Matrix a(n_s, dv);
  Vector key_logits(p.keys());
  for (std::size_t s = 0; s < n_s; ++s) {
    const auto omega = draw.omegas.row(s);
    for (std::size_t m = 0; m < p.keys(); ++m)
      key_logits[m] = dot(omega, p.k.row(m)) - 0.5 * squared_norm(p.k.row(m));
    log_c[s] = log_sum_exp(key_logits);
    auto as = a.row(s);
    for (std::size_t m = 0; m < p.keys(); ++m) {
      const double w = std::exp(key_logits[m] - log_c[s]);
      const auto vm = p.v.row(m);
      for (std::size_t j = 0; j < dv; ++j) as[j] += w * vm[j];
    }
  }

  Matrix out(p.queries(), dv);
  Vector q_scaled(p.key_dim());
  Vector logits(n_s);
  for (std::size_t n = 0; n < p.queries(); ++n) {
    const auto qn = p.q.row(n);
    for (std::size_t j = 0; j < q_scaled.size(); ++j) q_scaled[j] = p.scale * qn[j];
    const Vector log_xi_q = log_xi_features(q_scaled, draw);
    for (std::size_t s = 0; s < n_s; ++s) logits[s] = log_xi_q[s] + log_c[s];
    const double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    auto o = out.row(n);
    for (std::size_t s = 0; s < n_s; ++s) {
      const double w = std::exp(logits[s] - mx);
      denom += w;
      const auto as = a.row(s);
      for (std::size_t j = 0; j < dv; ++j) o[j] += w * as[j];
    }
    if (!(denom > 0.0) || !std::isfinite(denom)) throw NumericalError("rfa: denominator underflow");
    for (double& x : o) x /= denom;
  }
  return out;
}

Vector randomized_attn_mc(std::span<const double> q, const Matrix& keys, const Matrix& values, std::size_t samples,
                          std::uint64_t seed, double scale) {
  if (keys.rows() != values.rows() || keys.rows() == 0) throw ShapeError("randomized_attn_mc: bad key/value rows");
  if (q.size() != keys.cols()) throw ShapeError("randomized_attn_mc: query dimension mismatch");
  check_finite(q, "query");
  Vector q_scaled(q.begin(), q.end());
  for (double& x : q_scaled) x *= scale;
  const RandomFeatureDraw draw =
      sample_proposal(ProposalSpec::mixture_pn(q_scaled, keys), samples, q.size(), seed);
  Vector out(values.cols(), 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    const Vector f = randomized_attention_integrand(draw.omegas.row(s), keys, values);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += f[j];
  }
  for (double& x : out) x /= static_cast<double>(samples);
  return out;
}

Vector log_importance_weights(std::span<const double> q, const Matrix& keys, const RandomFeatureDraw& draw,
                              double scale) {
  if (!draw.proposal.has_density()) throw ConfigError("snis needs a proposal with a density");
  Vector q_scaled(q.begin(), q.end());
  for (double& x : q_scaled) x *= scale;
  const ProposalSpec target = ProposalSpec::mixture_pn(q_scaled, keys);
  target.validate(draw.dim());
  Vector log_w(draw.samples());
  for (std::size_t s = 0; s < draw.samples(); ++s) {
    const auto omega = draw.omegas.row(s);
    log_w[s] = log_proposal_density(target, omega) - log_proposal_density(draw.proposal, omega);
  }
  return log_w;
}

Vector snis_rfa(std::span<const double> q, const Matrix& keys, const Matrix& values, const RandomFeatureDraw& draw,
                double scale) {
  if (keys.rows() != values.rows() || keys.rows() == 0) throw ShapeError("snis_rfa: bad key/value rows");
  Vector log_w = log_importance_weights(q, keys, draw, scale);
  const double mx = *std::max_element(log_w.begin(), log_w.end());
  if (!std::isfinite(mx)) throw NumericalError("snis_rfa: every importance weight underflowed");
  softmax_inplace(log_w);
  Vector out(values.cols(), 0.0);
  for (std::size_t s = 0; s < draw.samples(); ++s) {
    const Vector f = randomized_attention_integrand(draw.omegas.row(s), keys, values);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += log_w[s] * f[j];
  }
  return out;
}

}  // namespace evakit
