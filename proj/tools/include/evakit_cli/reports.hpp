#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "evakit/eva.hpp"
#include "evakit/trainer.hpp"
#include "evakit_cli/common.hpp"

namespace evakit::cli {

// cache_report plus the config echo and provenance.
json cache_report_json(const EvaConfig& cfg, std::size_t prefix, std::size_t generated,
                       std::optional<double> bytes_per_entry, std::uint64_t seed);

struct FinetuneDemoOutcome {
  DemoResult result;
  bool loss_within_budget = false;   // final <= 1.05 x baseline
  bool warmup_lowers_grad = false;   // max grad norm with warmup < without
  double seconds = 0.0;      // wall clock
  double cpu_seconds = 0.0;  // process CPU time
};

inline constexpr double kDemoLossFactor = 1.05;

// Default demo: 2 layers, d = 64, seq 256, FlashEVA window 64 / chunk 16.
DemoConfig default_demo_config();

// Runs the demo. When `out_dir` is non-empty writes metrics.csv,
// metrics_no_warmup.csv, summary.json and checkpoint/ there.
FinetuneDemoOutcome run_finetune_demo(const DemoConfig& cfg, const std::string& corpus_path, std::uint64_t seed,
                                      const std::string& out_dir);

// Metrics CSV text with provenance comment lines; deterministic per (cfg, seed).
std::string demo_metrics_csv(const DemoConfig& cfg, std::uint64_t seed, const std::vector<StepRecord>& records);

}  // namespace evakit::cli
