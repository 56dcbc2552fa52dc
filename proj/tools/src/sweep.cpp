#include "evakit_cli/sweep.hpp"

#include <chrono>
#include <iomanip>
#include <cmath>
#include <sstream>

#include "evakit/config_io.hpp"
#include "evakit/corpus.hpp"
#include "evakit/decode_cache.hpp"
#include "evakit/rng.hpp"
#include "evakit/trainer.hpp"

namespace evakit::cli {

void SweepSpec::validate() const {
  if (windows.empty() || chunks.empty()) throw ConfigError("sweep: windows and chunks must not be empty");
  if (prefix + generated == 0) throw ConfigError("sweep: prefix + generated must be >= 1");
  if (dim == 0) throw ConfigError("sweep: dim must be >= 1");
  if (!checkpoint.empty() && eval_windows == 0) throw ConfigError("sweep: eval_windows must be >= 1");
}

json to_json(const SweepSpec& s) {
  return {{"windows", s.windows},
          {"chunks", s.chunks},
          {"prefix", s.prefix},
          {"generated", s.generated},
          {"mode", to_string(s.mode)},
          {"dim", s.dim},
          {"checkpoint", s.checkpoint},
          {"corpus", s.corpus},
          {"eval_windows", s.eval_windows}};
}

SweepSpec sweep_spec_from_json(const json& j, SweepSpec s) {
  if (!j.is_object()) throw ConfigError("sweep config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "windows") s.windows = value.get<std::vector<std::size_t>>();
      else if (key == "chunks") s.chunks = value.get<std::vector<std::size_t>>();
      else if (key == "prefix") s.prefix = value.get<std::size_t>();
      else if (key == "generated") s.generated = value.get<std::size_t>();
      else if (key == "mode") s.mode = parse_window_mode(value.get<std::string>());
      else if (key == "dim") s.dim = value.get<std::size_t>();
      else if (key == "checkpoint") s.checkpoint = value.get<std::string>();
      else if (key == "corpus") s.corpus = value.get<std::string>();
      else if (key == "eval_windows") s.eval_windows = value.get<std::size_t>();
      else throw ConfigError("sweep config: unknown key '" + key + "'");
    } catch (const json::exception&) {
      throw ConfigError("sweep config: bad value for '" + key + "'");
    }
  }
  return s;
}

SweepResult run_sweep(const SweepSpec& spec) {
  spec.validate();
  struct Cell {
    EvaConfig cfg;
    std::size_t index;
  };
  SweepResult result;
  std::vector<Cell> cells;
  for (std::size_t w : spec.windows) {
    for (std::size_t c : spec.chunks) {
      EvaConfig cfg;
      cfg.window = w;
      cfg.chunk = c;
      cfg.mode = spec.mode;
      try {
        cfg.validate();
      } catch (const ConfigError& e) {
        result.skipped.push_back("w=" + std::to_string(w) + " chunk=" + std::to_string(c) + ": " + e.what());
        continue;
      }
      cells.push_back({cfg, cells.size()});
    }
  }

  std::optional<Checkpoint> ck;
  std::vector<int> eval_tokens;
  if (!spec.checkpoint.empty()) {
    ck = load_checkpoint(spec.checkpoint);
    const std::string text =
        spec.corpus.empty() ? bundled_corpus() : read_text_file(spec.corpus);
    eval_tokens = split_corpus(tokenize(text), 0.1).val;
  }

  const std::size_t total = spec.prefix + spec.generated;
  result.rows.resize(cells.size());
  parallel_for(cells.size(), [&](std::size_t i) {
    EvaConfig cfg = cells[i].cfg;
    cfg.seed = derive_seed(spec.seed, cfg.window, cfg.chunk);
    // Per-cell stream: same inputs for every (w, chunk) pair.
    CounterRng rng(derive_seed(spec.seed, 0x7377656570));
    DecodeState state(cfg, spec.dim, spec.dim, 1.0 / std::sqrt(static_cast<double>(spec.dim)));
    Vector q(spec.dim), k(spec.dim), v(spec.dim);
    double sink = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t t = 0; t < total; ++t) {
      for (std::size_t j = 0; j < spec.dim; ++j) {
        q[j] = rng.normal();
        k[j] = rng.normal();
        v[j] = rng.normal();
      }
      sink += state.step(q, k, v)[0];
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(sink)) throw NumericalError("sweep: non-finite decode output");

    const CacheReport report = cache_report(cfg, spec.prefix, spec.generated);
    if (report.eva_entries != state.entries())
      throw NumericalError("sweep: decode cache holds " + std::to_string(state.entries()) +
                           " entries, closed form says " + std::to_string(report.eva_entries));
    SweepRow& row = result.rows[i];
    row.window = cfg.window;
    row.chunk = cfg.chunk;
    row.total_tokens = total;
    row.cache_entries = state.entries();
    row.full_entries = report.full_entries;
    row.ratio = report.ratio;
    row.main_config = cfg.window == 256 && cfg.chunk == 16;
    row.tokens_per_sec = secs > 0.0 ? static_cast<double>(total) / secs : 0.0;
    if (ck) {
      EvaConfig model_eva = cfg;
      model_eva.seed = ck->config.eva.seed;
      const TinyLM model(ck->config, ck->weights);
      const TinyLM swapped = swap_attention(model, AttentionKind::flasheva, model_eva);
      row.perplexity = std::exp(eval_loss(swapped, eval_tokens, spec.eval_windows));
    }
  });
  return result;
}

std::string sweep_csv(const SweepSpec& spec, const SweepResult& result, bool include_timing) {
  std::ostringstream ss;
  ss << csv_provenance(spec.seed, to_json(spec));
  for (const auto& reason : result.skipped) ss << "# skipped: " << reason << '\n';
  ss << "w,chunk,mode,total_tokens,cache_entries,full_entries,ratio,main_config,perplexity";
  if (include_timing) ss << ",tokens_per_sec";
  ss << '\n';
  for (const auto& r : result.rows) {
    ss << r.window << ',' << r.chunk << ',' << to_string(spec.mode) << ',' << r.total_tokens << ','
       << r.cache_entries << ',' << r.full_entries << ',';
    ss.precision(6);
    ss << std::fixed << r.ratio << ',' << (r.main_config ? 1 : 0) << ',';
    if (r.perplexity) ss << *r.perplexity;
    if (include_timing) ss << ',' << std::setprecision(1) << r.tokens_per_sec;
    ss << '\n';
    ss << std::defaultfloat;
  }
  return ss.str();
}

}  // namespace evakit::cli
