#include "evakit_cli/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "evakit/config_io.hpp"
#include "evakit/flasheva.hpp"
#include "evakit/rng.hpp"

namespace evakit::cli {

std::string to_string(BenchMode mode) { return mode == BenchMode::constant_c ? "constant-C" : "constant-chunk"; }

BenchMode parse_bench_mode(const std::string& s) {
  if (s == "constant-C" || s == "constant-c") return BenchMode::constant_c;
  if (s == "constant-chunk") return BenchMode::constant_chunk;
  throw ConfigError("unknown bench mode '" + s + "'");
}

EvaConfig BenchSpec::eva_for(std::size_t seq_len) const {
  EvaConfig cfg = eva;
  cfg.seed = seed;
  if (mode == BenchMode::constant_c) {
    if (rfa_tokens == 0 || seq_len % rfa_tokens != 0)
      throw ConfigError("constant-C mode: L = " + std::to_string(seq_len) + " is not a multiple of C = " +
                        std::to_string(rfa_tokens));
    cfg.chunk = seq_len / rfa_tokens;
  }
  cfg.validate();
  return cfg;
}

void BenchSpec::validate() const {
  if (seq_lens.empty()) throw ConfigError("bench: seq_lens must not be empty");
  if (repeats < 3) throw ConfigError("bench: repeats must be >= 3");
  if (dim == 0) throw ConfigError("bench: dim must be >= 1");
  for (const auto& impl : impls)
    if (impl != "softmax-naive" && impl != "softmax-tiled" && impl != "flasheva")
      throw ConfigError("bench: unknown impl '" + impl + "'");
  for (std::size_t len : seq_lens) {
    if (len == 0 || token_budget % len != 0)
      throw ConfigError("bench: token budget " + std::to_string(token_budget) + " is not divisible by L = " +
                        std::to_string(len));
    eva_for(len);
  }
}

AttentionGrads naive_attn_backward(const AttentionProblem& p, const Mask& mask, const Matrix& d_out) {
  const std::size_t n = p.queries(), m = p.keys(), d = p.key_dim(), dv = p.value_dim();
  AttentionGrads g{Matrix(n, d), Matrix(m, d), Matrix(m, dv)};
  Vector w(m), dp(m), out(dv);
  for (std::size_t i = 0; i < n; ++i) {
    const auto qi = p.q.row(i);
    const auto doi = d_out.row(i);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < m; ++j) {
      w[j] = mask.allows(i, j) ? p.scale * dot(qi, p.k.row(j)) : -INFINITY;
      mx = std::max(mx, w[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      w[j] = std::exp(w[j] - mx);
      z += w[j];
    }
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      w[j] /= z;
      const auto vj = p.v.row(j);
      for (std::size_t c = 0; c < dv; ++c) out[c] += w[j] * vj[c];
    }
    const double delta = dot(std::span<const double>(out), doi);
    auto dqi = g.dq.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      if (w[j] == 0.0) continue;
      auto dvj = g.dv.row(j);
      for (std::size_t c = 0; c < dv; ++c) dvj[c] += w[j] * doi[c];
      const double ds = w[j] * (dot(doi, p.v.row(j)) - delta) * p.scale;
      const auto kj = p.k.row(j);
      auto dkj = g.dk.row(j);
      for (std::size_t c = 0; c < d; ++c) {
        dqi[c] += ds * kj[c];
        dkj[c] += ds * qi[c];
      }
    }
  }
  return g;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Summary {
  double median = 0.0;
  double iqr = 0.0;
};

double quantile(std::vector<double> xs, double q) {
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  return xs[lo] + (xs[hi] - xs[lo]) * (pos - static_cast<double>(lo));
}

Summary summarize(const std::vector<double>& xs) {
  return {quantile(xs, 0.5), quantile(xs, 0.75) - quantile(xs, 0.25)};
}

double elapsed_ms(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchSpec& spec) {
  spec.validate();
  std::vector<BenchRow> rows;
  for (const auto& impl : spec.impls) {
    for (std::size_t len : spec.seq_lens) {
      const std::size_t batch = spec.token_budget / len;
      const EvaConfig cfg = spec.eva_for(len);
      CounterRng rng(derive_seed(spec.seed, len));
      std::vector<AttentionProblem> problems;
      std::vector<Matrix> grads;
      const double scale = 1.0 / std::sqrt(static_cast<double>(spec.dim));
      for (std::size_t b = 0; b < batch; ++b) {
        AttentionProblem p{Matrix(len, spec.dim), Matrix(len, spec.dim), Matrix(len, spec.dim), scale};
        for (double& x : p.q.storage()) x = rng.normal();
        for (double& x : p.k.storage()) x = rng.normal();
        for (double& x : p.v.storage()) x = rng.normal();
        Matrix g(len, spec.dim);
        for (double& x : g.storage()) x = rng.normal();
        problems.push_back(std::move(p));
        grads.push_back(std::move(g));
      }
      const Mask causal = Mask::causal(len);

      BenchRow row;
      row.impl = impl;
      row.mode = spec.mode;
      row.seq_len = len;
      row.batch = batch;
      std::vector<double> fwd, bwd;
      double sink = 0.0;  // keeps results observable
      for (std::size_t it = 0; it < spec.warmup + spec.repeats; ++it) {
        auto t0 = Clock::now();
        for (const auto& p : problems) {
          AttnStats stats;
          Matrix o;
          if (impl == "softmax-naive") {
            o = softmax_attn(p, causal);
          } else if (impl == "softmax-tiled") {
            o = tiled_softmax_attn(p, causal, {}, &stats);
          } else {
            o = flasheva_attn(p, cfg, {}, &stats);
          }
          sink += o(0, 0);
          row.peak_scratch = std::max(row.peak_scratch, stats.peak_scratch_elements);
        }
        const double f = elapsed_ms(t0);
        t0 = Clock::now();
        for (std::size_t b = 0; b < batch; ++b) {
          AttentionGrads g;
          if (impl == "softmax-naive") {
            g = naive_attn_backward(problems[b], causal, grads[b]);
          } else if (impl == "softmax-tiled") {
            g = attn_backward(problems[b], causal, grads[b]);
          } else {
            g = flasheva_backward(problems[b], cfg, grads[b]);
          }
          sink += g.dq(0, 0);
        }
        const double bw = elapsed_ms(t0);
        if (it >= spec.warmup) {
          fwd.push_back(f);
          bwd.push_back(bw);
        }
      }
      if (!std::isfinite(sink)) throw NumericalError("bench: non-finite attention output");
      const Summary fs = summarize(fwd), bs = summarize(bwd);
      row.fwd_ms = fs.median;
      row.fwd_iqr = fs.iqr;
      row.bwd_ms = bs.median;
      row.bwd_iqr = bs.iqr;
      rows.push_back(row);
    }
  }
  return rows;
}

double log_log_slope(const std::vector<BenchRow>& rows, const std::string& impl) {
  std::vector<double> xs, ys;
  for (const auto& r : rows) {
    if (r.impl != impl) continue;
    xs.push_back(std::log(static_cast<double>(r.seq_len)));
    ys.push_back(std::log((r.fwd_ms + r.bwd_ms) / static_cast<double>(r.batch)));
  }
  if (xs.size() < 2) throw ConfigError("slope needs at least two lengths for " + impl);
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i] / n;
    my += ys[i] / n;
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  return sxy / sxx;
}

json to_json(const BenchSpec& s) {
  return {{"seq_lens", s.seq_lens},
          {"b_min", s.b_min},
          {"token_budget", s.token_budget},
          {"mode", to_string(s.mode)},
          {"rfa_tokens", s.rfa_tokens},
          {"eva", parse_json_text(evakit::to_json(s.eva))},
          {"dim", s.dim},
          {"repeats", s.repeats},
          {"warmup", s.warmup},
          {"impls", s.impls}};
}

BenchSpec bench_spec_from_json(const json& j, BenchSpec s) {
  if (!j.is_object()) throw ConfigError("bench config: expected a JSON object");
  bool budget_set = false;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "seq_lens") s.seq_lens = value.get<std::vector<std::size_t>>();
      else if (key == "b_min") s.b_min = value.get<std::size_t>();
      else if (key == "token_budget") {
        s.token_budget = value.get<std::size_t>();
        budget_set = true;
      } else if (key == "mode") s.mode = parse_bench_mode(value.get<std::string>());
      else if (key == "rfa_tokens") s.rfa_tokens = value.get<std::size_t>();
      else if (key == "eva") s.eva = eva_config_from_json(value.dump());
      else if (key == "dim") s.dim = value.get<std::size_t>();
      else if (key == "repeats") s.repeats = value.get<std::size_t>();
      else if (key == "warmup") s.warmup = value.get<std::size_t>();
      else if (key == "impls") s.impls = value.get<std::vector<std::string>>();
      else throw ConfigError("bench config: unknown key '" + key + "'");
    } catch (const json::exception&) {
      throw ConfigError("bench config: bad value for '" + key + "'");
    }
  }
  if (s.b_min == 0) throw ConfigError("bench config: b_min must be >= 1");
  if (!budget_set) s.token_budget = 16384 * s.b_min;
  return s;
}

std::string bench_csv(const BenchSpec& spec, const std::vector<BenchRow>& rows) {
  std::ostringstream ss;
  ss << csv_provenance(spec.seed, to_json(spec));
  ss << "impl,mode,L,batch,fwd_ms,bwd_ms,fwd_iqr,bwd_iqr,seed\n";
  ss.precision(6);
  ss << std::fixed;
  for (const auto& r : rows)
    ss << r.impl << ',' << to_string(r.mode) << ',' << r.seq_len << ',' << r.batch << ',' << r.fwd_ms << ','
       << r.bwd_ms << ',' << r.fwd_iqr << ',' << r.bwd_iqr << ',' << spec.seed << '\n';
  return ss.str();
}

}  // namespace evakit::cli
