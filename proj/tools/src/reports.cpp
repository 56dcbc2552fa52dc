#include "evakit_cli/reports.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <sstream>

#include "evakit/config_io.hpp"
#include "evakit/corpus.hpp"
#include "evakit/decode_cache.hpp"

namespace evakit::cli {

json cache_report_json(const EvaConfig& cfg, std::size_t prefix, std::size_t generated,
                       std::optional<double> bytes_per_entry, std::uint64_t seed) {
  const CacheReport r = cache_report(cfg, prefix, generated, bytes_per_entry);
  json config = {{"eva", parse_json_text(to_json(cfg))}, {"prefix", prefix}, {"generated", generated}};
  if (bytes_per_entry) config["bytes_per_entry"] = *bytes_per_entry;
  json j = provenance(seed, config);
  j["total_tokens"] = r.total_tokens;
  j["full_entries"] = r.full_entries;
  j["eva_entries"] = r.eva_entries;
  j["local_entries"] = r.local_entries;
  j["chunk_entries"] = r.chunk_entries;
  j["ratio"] = r.ratio;
  j["formula"] = r.formula;
  if (r.full_bytes) {
    j["full_bytes"] = *r.full_bytes;
    j["eva_bytes"] = *r.eva_bytes;
  }
  return j;
}

DemoConfig default_demo_config() {
  DemoConfig c;
  c.model.layers = 2;
  c.model.d_model = 64;
  c.model.heads = 4;
  c.model.seq_len = 256;
  c.model.vocab = kVocabSize;
  c.eva.window = 64;
  c.eva.chunk = 16;
  c.pretrain_steps = 400;
  c.pretrain_schedule = {3e-3, 400, 0.1, 25.0, 1e4};
  c.batch_size = 4;
  c.recipe.warmup_steps = 100;
  c.recipe.warmup_lr = 3e-4;
  c.recipe.main_steps = 300;
  c.recipe.main_schedule = {1e-3, 300, 0.1, 25.0, 1e4};
  c.recipe.batch_size = 4;
  c.compare_steps = 10;
  return c;
}

std::string demo_metrics_csv(const DemoConfig& cfg, std::uint64_t seed, const std::vector<StepRecord>& records) {
  std::ostringstream ss;
  std::istringstream header(csv_provenance(seed, parse_json_text(to_json(cfg))));
  std::vector<std::string> lines;
  for (std::string line; std::getline(header, line);) lines.push_back(line.substr(2));
  write_metrics_csv(ss, records, lines);
  return ss.str();
}

FinetuneDemoOutcome run_finetune_demo(const DemoConfig& cfg, const std::string& corpus_path, std::uint64_t seed,
                                      const std::string& out_dir) {
  const std::string text = corpus_path.empty() ? bundled_corpus() : read_text_file(corpus_path);
  const auto t0 = std::chrono::steady_clock::now();
  const std::clock_t c0 = std::clock();
  FinetuneDemoOutcome o;
  o.result = run_adaptation_demo(cfg, tokenize(text), seed);
  o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.cpu_seconds = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC;
  o.loss_within_budget = o.result.final_loss <= kDemoLossFactor * o.result.baseline_loss;
  o.warmup_lowers_grad = o.result.max_grad_norm_warmup < o.result.max_grad_norm_no_warmup;

  if (!out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    write_output((fs::path(out_dir) / "metrics.csv").string(), demo_metrics_csv(cfg, seed, o.result.records));
    if (cfg.compare_no_warmup)
      write_output((fs::path(out_dir) / "metrics_no_warmup.csv").string(),
                   demo_metrics_csv(cfg, seed, o.result.records_no_warmup));
    const TinyLM tuned(o.result.final_config, o.result.final_weights);
    save_checkpoint((fs::path(out_dir) / "checkpoint").string(), tuned, o.result.records.size(), seed);
    json summary = provenance(seed, parse_json_text(to_json(cfg)));
    summary["corpus"] = corpus_path.empty() ? "bundled" : corpus_path;
    summary["baseline_loss"] = o.result.baseline_loss;
    summary["swapped_loss"] = o.result.swapped_loss;
    summary["final_loss"] = o.result.final_loss;
    summary["final_loss_no_warmup"] = o.result.final_loss_no_warmup;
    summary["loss_ratio"] = o.result.final_loss / o.result.baseline_loss;
    summary["loss_within_budget"] = o.loss_within_budget;
    summary["max_grad_norm_warmup"] = o.result.max_grad_norm_warmup;
    summary["max_grad_norm_no_warmup"] = o.result.max_grad_norm_no_warmup;
    summary["warmup_lowers_grad_norm"] = o.warmup_lowers_grad;
    summary["seconds"] = o.seconds;
    summary["cpu_seconds"] = o.cpu_seconds;
    write_output((fs::path(out_dir) / "summary.json").string(), summary.dump(2) + "\n");
  }
  return o;
}

}  // namespace evakit::cli
