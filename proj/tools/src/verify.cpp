#include "evakit_cli/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "evakit/decode_cache.hpp"
#include "evakit/eva.hpp"
#include "evakit/flasheva.hpp"
#include "evakit/linalg.hpp"
#include "evakit/model.hpp"
#include "evakit/random_features.hpp"
#include "evakit/rng.hpp"

namespace evakit::cli {

namespace {

enum SuiteId : std::uint64_t {
  kEquivalence = 1,
  kDegenerate,
  kTiling,
  kGradients,
  kStreaming,
  kCache,
  kMonteCarlo,
  kRope,
};

Matrix random_matrix(CounterRng& rng, std::size_t rows, std::size_t cols, double stddev = 1.0) {
  Matrix m(rows, cols);
  for (double& x : m.storage()) x = stddev * rng.normal();
  return m;
}

AttentionProblem random_problem(CounterRng& rng, std::size_t n, std::size_t m, std::size_t d, std::size_t dv,
                                double scale) {
  return {random_matrix(rng, n, d), random_matrix(rng, m, d), random_matrix(rng, m, dv), scale};
}

EvaConfig random_eva(CounterRng& rng, std::size_t chunk, std::size_t max_blocks) {
  EvaConfig cfg;
  cfg.chunk = chunk;
  cfg.window = chunk * (1 + rng.below(max_blocks));
  cfg.mode = rng.below(2) == 0 ? WindowMode::block_local : WindowMode::sliding_chunk_aligned;
  cfg.proposal = static_cast<ChunkProposal>(rng.below(3));
  cfg.clip_mode = rng.below(2) == 0 ? ClipMode::as_printed : ClipMode::clip_scale_deviation;
  cfg.samples = 1 + rng.below(2);
  cfg.seed = rng.next_u64();
  return cfg;
}

// Per-instance errors are written into slots, then reduced in index order.
SuiteResult reduce(std::string name, const std::vector<double>& errors, double tolerance, std::string detail = {}) {
  SuiteResult r;
  r.name = std::move(name);
  r.instances = errors.size();
  r.tolerance = tolerance;
  for (double e : errors) r.max_error = std::max(r.max_error, std::isnan(e) ? INFINITY : e);
  r.pass = r.max_error <= tolerance;
  r.detail = std::move(detail);
  return r;
}

Mask random_mask(CounterRng& rng, std::size_t n, std::size_t m) {
  if (n != m) return Mask::full(n, m);
  switch (rng.below(4)) {
    case 0:
      return Mask::full(n, m);
    case 1:
      return Mask::causal(n);
    case 2:
      return Mask::sliding_window(n, 1 + rng.below(n));
    default:
      return Mask::block_local(n, 1 + rng.below(n));
  }
}

// Max componentwise relative error between analytic gradients of
// sum(G * f(q, k, v)) and central differences.
double check_gradients(AttentionProblem p, const Matrix& g, const AttentionGrads& analytic,
                       const std::function<Matrix(const AttentionProblem&)>& f) {
  constexpr double h = 1e-6;
  auto objective = [&](const AttentionProblem& prob) {
    const Matrix out = f(prob);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out.data()[i] * g.data()[i];
    return s;
  };
  double worst = 0.0;
  auto sweep = [&](Matrix& target, const Matrix& grad) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double saved = target.data()[i];
      target.data()[i] = saved + h;
      const double up = objective(p);
      target.data()[i] = saved - h;
      const double down = objective(p);
      target.data()[i] = saved;
      worst = std::max(worst, gradient_rel_error(grad.data()[i], (up - down) / (2.0 * h)));
    }
  };
  sweep(p.q, analytic.dq);
  sweep(p.k, analytic.dk);
  sweep(p.v, analytic.dv);
  return worst;
}

}  // namespace

double gradient_rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

SuiteResult suite_equivalence(std::uint64_t seed, std::size_t instances, std::size_t max_n, bool inject_fault) {
  std::vector<double> errors(instances);
  parallel_for(instances, [&](std::size_t i) {
    CounterRng rng(derive_seed(seed, kEquivalence, i));
    const std::size_t d = rng.below(2) == 0 ? 16 : 64;
    const std::size_t chunk = std::array<std::size_t, 3>{1, 4, 16}[rng.below(3)];
    const EvaConfig cfg = random_eva(rng, chunk, 64);
    const std::size_t n = 1 + rng.below(max_n);
    const AttentionProblem p = random_problem(rng, n, n, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
    const auto summaries = summarize_chunks(p.k, p.v, total_chunks(n, cfg), cfg);
    auto fast_summaries = summaries;
    if (inject_fault)
      for (auto& s : fast_summaries)
        for (double& b : s.beta_hat) b += 1e-3;
    const Matrix fast = flasheva_attn_with_summaries(p, cfg, fast_summaries, {64, 64});
    const Matrix direct = eva_attn_direct(p, cfg, summaries);
    errors[i] = max_abs_diff(fast, direct);
  });
  return reduce("flasheva_equivalence", errors, 1e-10,
                inject_fault ? "fault injected: beta_hat + 1e-3 on the augmented side" : "max |flasheva - eva_direct|");
}

SuiteResult suite_degenerate(std::uint64_t seed, std::size_t instances) {
  std::vector<double> errors(instances);
  parallel_for(instances, [&](std::size_t i) {
    CounterRng rng(derive_seed(seed, kDegenerate, i));
    const std::size_t n = 1 + rng.below(128);
    const std::size_t d = 1 + rng.below(32);
    const AttentionProblem p = random_problem(rng, n, n, d, 1 + rng.below(32), 1.0 / std::sqrt(static_cast<double>(d)));
    const Matrix exact = softmax_attn(p, Mask::causal(n));
    // w >= N: every query is fully local.
    EvaConfig wide = random_eva(rng, 1 + rng.below(8), 4);
    wide.window = wide.chunk * ((n + wide.chunk - 1) / wide.chunk + rng.below(3));
    // chunk = 1: every summary is its own key/value pair.
    EvaConfig unit = random_eva(rng, 1, 64);
    errors[i] = std::max(max_abs_diff(flasheva_attn(p, wide), exact), max_abs_diff(eva_attn_direct(p, unit), exact));
  });
  return reduce("degenerate_exactness", errors, 1e-12, "w >= N and chunk = 1 against softmax");
}

SuiteResult suite_tiling(std::uint64_t seed, std::size_t instances) {
  std::vector<double> errors(instances);
  parallel_for(instances, [&](std::size_t i) {
    CounterRng rng(derive_seed(seed, kTiling, i));
    const std::size_t n = 1 + rng.below(200);
    const std::size_t m = rng.below(2) == 0 ? n : 1 + rng.below(200);
    const std::size_t d = 1 + rng.below(48);
    const AttentionProblem p = random_problem(rng, n, m, d, 1 + rng.below(48), rng.uniform() * 2.0);
    const Mask mask = random_mask(rng, n, m);
    const TileConfig tiles{1 + rng.below(97), 1 + rng.below(97)};
    errors[i] = max_abs_diff(tiled_softmax_attn(p, mask, tiles), softmax_attn(p, mask));
  });
  return reduce("tiling_exactness", errors, 1e-12, "randomized block sizes");
}

SuiteResult suite_gradients(std::uint64_t seed, std::size_t configs) {
  std::vector<double> errors(2 * configs);
  parallel_for(configs, [&](std::size_t i) {
    CounterRng rng(derive_seed(seed, kGradients, i));
    const std::size_t n = 2 + rng.below(31);
    const std::size_t d = 2 + rng.below(7);
    const std::size_t dv = 1 + rng.below(6);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const TileConfig tiles{1 + rng.below(16), 1 + rng.below(16)};

    const AttentionProblem p = random_problem(rng, n, n, d, dv, scale);
    const Mask mask = random_mask(rng, n, n);
    const Matrix g = random_matrix(rng, n, dv);
    errors[2 * i] = check_gradients(p, g, attn_backward(p, mask, g, tiles),
                                    [&](const AttentionProblem& q) { return softmax_attn(q, mask); });

    const EvaConfig cfg = random_eva(rng, std::array<std::size_t, 3>{1, 2, 4}[rng.below(3)], 4);
    errors[2 * i + 1] = check_gradients(p, g, flasheva_backward(p, cfg, g, tiles),
                                        [&](const AttentionProblem& q) { return flasheva_attn(q, cfg, tiles); });
  });
  return reduce("gradient_checks", errors, 1e-5, "central differences, h = 1e-6, relative floor 1e-3");
}

SuiteResult suite_streaming(std::uint64_t seed, std::size_t steps) {
  struct Case {
    std::size_t window, chunk;
    WindowMode mode;
  };
  const std::vector<Case> cases{{256, 16, WindowMode::block_local},
                                {256, 16, WindowMode::sliding_chunk_aligned},
                                {64, 8, WindowMode::block_local},
                                {64, 8, WindowMode::sliding_chunk_aligned}};
  std::vector<double> errors(cases.size());
  parallel_for(cases.size(), [&](std::size_t i) {
    CounterRng rng(derive_seed(seed, kStreaming, i));
    EvaConfig cfg;
    cfg.window = cases[i].window;
    cfg.chunk = cases[i].chunk;
    cfg.mode = cases[i].mode;
    cfg.seed = rng.next_u64();
    const std::size_t d = 16;
    const AttentionProblem p = random_problem(rng, steps, steps, d, d, 0.25);
    const Matrix full = flasheva_attn(p, cfg);
    DecodeState state(cfg, d, d, p.scale);
    double worst = 0.0;
    for (std::size_t t = 0; t < steps; ++t) {
      const Vector out = state.step(p.q.row(t), p.k.row(t), p.v.row(t));
      for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(out[j] - full(t, j)));
    }
    errors[i] = worst;
  });
  return reduce("streaming_equivalence", errors, 1e-10, std::to_string(steps) + " decode steps per config");
}

SuiteResult suite_cache(std::uint64_t seed) {
  const std::vector<std::pair<std::size_t, std::size_t>> shapes{{256, 16}, {64, 8}, {32, 32}, {16, 1}};
  std::vector<double> errors;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    for (const WindowMode mode : {WindowMode::block_local, WindowMode::sliding_chunk_aligned}) {
      EvaConfig cfg;
      cfg.window = shapes[i].first;
      cfg.chunk = shapes[i].second;
      cfg.mode = mode;
      cfg.seed = derive_seed(seed, kCache, i);
      DecodeState state(cfg, 2, 2);
      double mismatch = 0.0;
      const Vector x{0.1, -0.2};
      for (std::size_t t = 0; t < 4 * cfg.window + 7; ++t) {
        state.step(x, x, x);
        const CacheReport r = cache_report(cfg, t + 1, 0);
        mismatch = std::max(mismatch, std::abs(static_cast<double>(r.eva_entries) - static_cast<double>(state.entries())));
        if (state.window_size() > cfg.window) mismatch = std::max(mismatch, 1.0);
      }
      errors.push_back(mismatch);
    }
  }
  EvaConfig main_cfg;
  const CacheReport main = cache_report(main_cfg, 2048, 10240);
  const bool closed_form = main.full_entries == 12288 && main.eva_entries == 1008 && std::abs(main.ratio - 12.19) <= 0.01;
  errors.push_back(closed_form ? 0.0 : 1.0);
  return reduce("cache_arithmetic", errors, 0.0, "simulated decode entries equal the closed form; 12288 vs 1008");
}

SuiteResult suite_monte_carlo(std::uint64_t seed, std::size_t seeds) {
  CounterRng rng(derive_seed(seed, kMonteCarlo));
  const std::size_t d = 4, m = 8;
  // Moderate key and query norms keep the positive-feature variance small enough
  // for the S = 64 vs 4096 contrast to show.
  AttentionProblem p = random_problem(rng, 3, m, d, 3, 0.5);
  scale_inplace(p.q, 0.5);
  scale_inplace(p.k, 0.5);
  const Matrix exact = softmax_attn(p, Mask::full(3, m));
  double rfa_small = 0.0, rfa_large = 0.0, ra_small = 0.0, ra_large = 0.0;
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto draw = [&](std::size_t n) {
      return sample_proposal(ProposalSpec::standard_normal(), n, d, derive_seed(seed, kMonteCarlo, s, n));
    };
    rfa_small += max_abs_diff(rfa(p, draw(64)), exact);
    rfa_large += max_abs_diff(rfa(p, draw(4096)), exact);
    for (std::size_t n = 0; n < 3; ++n) {
      const Matrix ref = exact.slice_rows(n, n + 1);
      ra_small += max_abs_diff(row_matrix(randomized_attn_mc(p.q.row(n), p.k, p.v, 64, derive_seed(seed, s, n, 64), p.scale)), ref);
      ra_large += max_abs_diff(row_matrix(randomized_attn_mc(p.q.row(n), p.k, p.v, 4096, derive_seed(seed, s, n, 4096), p.scale)), ref);
    }
  }
  // Error ratio large-S / small-S; below 1 means the estimators converge.
  return reduce("monte_carlo_convergence", {rfa_large / rfa_small, ra_large / ra_small}, 1.0 - 1e-9,
                "mean error ratio S=4096 vs S=64 over " + std::to_string(seeds) + " seeds");
}

SuiteResult suite_rope(std::uint64_t seed) {
  CounterRng rng(derive_seed(seed, kRope));
  const std::size_t d = 16;
  const Matrix q = random_matrix(rng, 1, d);
  const Matrix k = random_matrix(rng, 1, d);
  auto at = [&](const Matrix& x, double pos) -> const Matrix {
    const double positions[1] = {pos};
    return rope_apply(x, positions, 10000.0);
  };
  const double shifted = std::abs(dot(at(q, 5).row(0), at(k, 3).row(0)) - dot(at(q, 7).row(0), at(k, 5).row(0)));
  const double norm = std::abs(std::sqrt(squared_norm(at(q, 123).row(0))) - std::sqrt(squared_norm(q.row(0))));
  const double origin = max_abs_diff(at(q, 0), q);
  return reduce("rope_properties", {shifted, norm, origin}, 1e-12, "relative position, isometry, identity at 0");
}

bool VerifyReport::pass() const {
  return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.pass; });
}

VerifyReport run_verify(const VerifyOptions& o) {
  if (o.max_n == 0) throw ConfigError("verify: max_n must be >= 1");
  VerifyReport r;
  r.suites.push_back(suite_equivalence(o.seed, o.equivalence_instances, o.max_n, o.inject_fault));
  r.suites.push_back(suite_degenerate(o.seed, o.exactness_instances));
  r.suites.push_back(suite_tiling(o.seed, o.exactness_instances));
  r.suites.push_back(suite_gradients(o.seed, o.gradient_configs));
  r.suites.push_back(suite_streaming(o.seed, o.decode_steps));
  r.suites.push_back(suite_cache(o.seed));
  r.suites.push_back(suite_monte_carlo(o.seed, o.mc_seeds));
  r.suites.push_back(suite_rope(o.seed));
  return r;
}

json to_json(const VerifyOptions& o) {
  return {{"equivalence_instances", o.equivalence_instances},
          {"max_n", o.max_n},
          {"exactness_instances", o.exactness_instances},
          {"gradient_configs", o.gradient_configs},
          {"decode_steps", o.decode_steps},
          {"mc_seeds", o.mc_seeds},
          {"inject_fault", o.inject_fault}};
}

VerifyOptions verify_options_from_json(const json& j, VerifyOptions o) {
  if (!j.is_object()) throw ConfigError("verify config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "equivalence_instances") o.equivalence_instances = value.get<std::size_t>();
      else if (key == "max_n") o.max_n = value.get<std::size_t>();
      else if (key == "exactness_instances") o.exactness_instances = value.get<std::size_t>();
      else if (key == "gradient_configs") o.gradient_configs = value.get<std::size_t>();
      else if (key == "decode_steps") o.decode_steps = value.get<std::size_t>();
      else if (key == "mc_seeds") o.mc_seeds = value.get<std::size_t>();
      else if (key == "inject_fault") o.inject_fault = value.get<bool>();
      else throw ConfigError("verify config: unknown key '" + key + "'");
    } catch (const json::exception&) {
      throw ConfigError("verify config: bad value for '" + key + "'");
    }
  }
  if (o.max_n == 0 || o.mc_seeds == 0) throw ConfigError("verify config: max_n and mc_seeds must be >= 1");
  return o;
}

json verify_report_json(const VerifyOptions& opts, const VerifyReport& report) {
  json suites = json::array();
  for (const auto& s : report.suites)
    suites.push_back({{"name", s.name},
                      {"pass", s.pass},
                      {"max_error", s.max_error},
                      {"tolerance", s.tolerance},
                      {"instances", s.instances},
                      {"detail", s.detail}});
  json j = provenance(opts.seed, to_json(opts));
  j["suites"] = suites;
  j["pass"] = report.pass();
  return j;
}

}  // namespace evakit::cli
