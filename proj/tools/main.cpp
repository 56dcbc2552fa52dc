#include <exception>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "evakit/config_io.hpp"
#include "evakit/corpus.hpp"
#include "evakit/fixture.hpp"
#include "evakit/flasheva.hpp"
#include "evakit_cli/bench.hpp"
#include "evakit_cli/reports.hpp"
#include "evakit_cli/sweep.hpp"
#include "evakit_cli/verify.hpp"

using namespace evakit;
using namespace evakit::cli;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file");
  cmd->add_option("--seed", c.seed, "Seed for every random draw");
  cmd->add_option("--out", c.out, "Output path (default: stdout)");
}

json config_or_empty(const Common& c) { return c.config.empty() ? json::object() : load_json_file(c.config); }

int run_verify_cmd(const Common& c, bool inject_fault) {
  VerifyOptions opts = verify_options_from_json(config_or_empty(c));
  opts.seed = c.seed;
  opts.inject_fault = opts.inject_fault || inject_fault;
  const VerifyReport report = run_verify(opts);
  write_output(c.out, verify_report_json(opts, report).dump(2) + "\n");
  for (const auto& s : report.suites)
    std::cerr << (s.pass ? "PASS " : "FAIL ") << s.name << " max_error=" << s.max_error << " tol=" << s.tolerance
              << '\n';
  return report.pass() ? kExitOk : kExitFailure;
}

int run_bench_cmd(const Common& c, const std::string& mode, std::optional<std::size_t> repeats) {
  BenchSpec spec = bench_spec_from_json(config_or_empty(c));
  spec.seed = c.seed;
  if (!mode.empty()) spec.mode = parse_bench_mode(mode);
  if (repeats) spec.repeats = *repeats;
  const auto rows = run_bench(spec);
  write_output(c.out, bench_csv(spec, rows));
  for (const auto& impl : spec.impls)
    if (spec.seq_lens.size() >= 2) std::cerr << impl << " log-log slope " << log_log_slope(rows, impl) << '\n';
  return kExitOk;
}

int run_sweep_cmd(const Common& c, const std::string& mode, const std::string& checkpoint) {
  SweepSpec spec = sweep_spec_from_json(config_or_empty(c));
  spec.seed = c.seed;
  if (!mode.empty()) spec.mode = parse_window_mode(mode);
  if (!checkpoint.empty()) spec.checkpoint = checkpoint;
  const SweepResult result = run_sweep(spec);
  for (const auto& reason : result.skipped) std::cerr << "skipped " << reason << '\n';
  write_output(c.out, sweep_csv(spec, result));
  return kExitOk;
}

int run_demo_cmd(const Common& c, const std::string& corpus) {
  json j = config_or_empty(c);
  std::string corpus_path = corpus;
  if (j.contains("corpus")) {
    if (corpus_path.empty()) corpus_path = j.at("corpus").get<std::string>();
    j.erase("corpus");
  }
  DemoConfig cfg = default_demo_config();
  if (!j.empty()) {
    // Overlay the file on the defaults.
    json merged = parse_json_text(to_json(cfg));
    merged.merge_patch(j);
    cfg = demo_config_from_json(merged.dump());
  }
  const std::string out_dir = c.out.empty() ? "finetune_demo_out" : c.out;
  const FinetuneDemoOutcome o = run_finetune_demo(cfg, corpus_path, c.seed, out_dir);
  const auto& r = o.result;
  std::cout << "baseline_loss " << r.baseline_loss << "\nswapped_loss " << r.swapped_loss << "\nfinal_loss "
            << r.final_loss << " (ratio " << r.final_loss / r.baseline_loss << ")\n";
  if (cfg.compare_no_warmup)
    std::cout << "max_grad_norm warmup " << r.max_grad_norm_warmup << " vs no-warmup " << r.max_grad_norm_no_warmup
              << '\n';
  std::cout << "seconds " << o.seconds << "\noutputs in " << out_dir << '\n';
  if (o.seconds > 600.0) std::cerr << "warning: demo exceeded the 10 minute budget\n";
  return o.loss_within_budget ? kExitOk : kExitFailure;
}

int run_cache_cmd(const Common& c, EvaConfig cfg, std::size_t prefix, std::size_t generated,
                  std::optional<double> bytes) {
  if (!c.config.empty()) cfg = eva_config_from_json(load_json_file(c.config).dump());
  write_output(c.out, cache_report_json(cfg, prefix, generated, bytes, c.seed).dump(2) + "\n");
  return kExitOk;
}

int run_attn_cmd(const Common& c, const std::string& q, const std::string& k, const std::string& v,
                 const std::string& impl, const std::string& mask_kind, std::size_t width, double scale) {
  if (c.out.empty()) throw ConfigError("attn: --out is required");
  AttentionProblem p{to_matrix(read_tensor_file(q)), to_matrix(read_tensor_file(k)), to_matrix(read_tensor_file(v)),
                     scale};
  Matrix o;
  if (impl == "flasheva") {
    EvaConfig cfg = c.config.empty() ? EvaConfig{} : eva_config_from_json(load_json_file(c.config).dump());
    cfg.seed = c.seed;
    o = flasheva_attn(p, cfg);
  } else {
    Mask mask = Mask::full(p.queries(), p.keys());
    if (mask_kind == "causal") mask = Mask::causal(p.queries());
    else if (mask_kind == "sliding") mask = Mask::sliding_window(p.queries(), width);
    else if (mask_kind == "block-local") mask = Mask::block_local(p.queries(), width);
    else if (mask_kind != "full") throw ConfigError("attn: unknown mask '" + mask_kind + "'");
    if (impl == "naive") o = softmax_attn(p, mask);
    else if (impl == "tiled") o = tiled_softmax_attn(p, mask);
    else throw ConfigError("attn: unknown impl '" + impl + "'");
  }
  write_tensor_file(c.out, to_tensor(o, 8));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"evakit: exact, random-feature and FlashEVA attention toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", git_describe());

  Common common;

  auto* verify = app.add_subcommand("verify", "Run the property and equivalence suites");
  add_common(verify, common);
  bool inject_fault = false;
  verify->add_flag("--inject-fault", inject_fault, "Perturb beta_hat by 1e-3 to check that the suite fails");

  auto* bench = app.add_subcommand("bench", "Forward/backward scaling benchmark (CSV)");
  add_common(bench, common);
  std::string bench_mode;
  std::optional<std::size_t> repeats;
  bench->add_option("--mode", bench_mode, "constant-C or constant-chunk");
  bench->add_option("--repeats", repeats, "Timed repeats per cell (>= 3)");

  auto* sweep = app.add_subcommand("sweep", "Window/chunk tradeoff sweep (CSV)");
  add_common(sweep, common);
  std::string sweep_mode, checkpoint;
  sweep->add_option("--mode", sweep_mode, "block-local or sliding-chunk-aligned");
  sweep->add_option("--checkpoint", checkpoint, "Model checkpoint directory for perplexity");

  auto* cache = app.add_subcommand("cache-report", "Closed-form cache entries (JSON)");
  add_common(cache, common);
  EvaConfig cache_cfg;
  std::string cache_mode = "block-local";
  std::size_t prefix = 2048, generated = 10240;
  std::optional<double> bytes;
  cache->add_option("--window", cache_cfg.window, "Local window w");
  cache->add_option("--chunk", cache_cfg.chunk, "Chunk size");
  cache->add_option("--mode", cache_mode, "block-local or sliding-chunk-aligned");
  cache->add_option("--prefix", prefix, "Prompt tokens");
  cache->add_option("--generated", generated, "Generated tokens");
  cache->add_option("--bytes-per-entry", bytes, "Report bytes as well as entries");

  auto* demo = app.add_subcommand("finetune-demo", "Pretrain, swap to FlashEVA, warm up and finetune");
  add_common(demo, common);
  std::string corpus;
  demo->add_option("--corpus", corpus, "Text corpus (default: the bundled synthetic corpus)");

  auto* attn = app.add_subcommand("attn", "Attention on fixture tensors");
  add_common(attn, common);
  std::string q_path, k_path, v_path, impl = "tiled", mask_kind = "causal";
  std::size_t width = 0;
  double scale = 1.0;
  attn->add_option("--q", q_path, "Query tensor")->required();
  attn->add_option("--k", k_path, "Key tensor")->required();
  attn->add_option("--v", v_path, "Value tensor")->required();
  attn->add_option("--impl", impl, "naive, tiled or flasheva");
  attn->add_option("--mask", mask_kind, "full, causal, sliding or block-local");
  attn->add_option("--width", width, "Window or block width");
  attn->add_option("--scale", scale, "Logit scale");

  auto* gen = app.add_subcommand("gen-corpus", "Write the synthetic corpus");
  add_common(gen, common);
  std::size_t chars = kBundledCorpusChars;
  gen->add_option("--chars", chars, "Corpus length in characters");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfigError;
  }

  try {
    if (*verify) return run_verify_cmd(common, inject_fault);
    if (*bench) return run_bench_cmd(common, bench_mode, repeats);
    if (*sweep) return run_sweep_cmd(common, sweep_mode, checkpoint);
    if (*cache) {
      cache_cfg.mode = parse_window_mode(cache_mode);
      return run_cache_cmd(common, cache_cfg, prefix, generated, bytes);
    }
    if (*demo) return run_demo_cmd(common, corpus);
    if (*attn) return run_attn_cmd(common, q_path, k_path, v_path, impl, mask_kind, width, scale);
    if (*gen) {
      const std::uint64_t seed = gen->count("--seed") ? common.seed : kBundledCorpusSeed;
      write_output(common.out, generate_synthetic_corpus(chars, seed));
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}
