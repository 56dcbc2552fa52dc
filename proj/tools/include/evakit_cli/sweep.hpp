#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evakit/eva.hpp"
#include "evakit_cli/common.hpp"

namespace evakit::cli {

struct SweepSpec {
  std::vector<std::size_t> windows{128, 256, 512};
  std::vector<std::size_t> chunks{8, 16, 32};
  std::size_t prefix = 2048;
  std::size_t generated = 1024;
  WindowMode mode = WindowMode::block_local;
  std::size_t dim = 16;
  std::uint64_t seed = 0;
  std::string checkpoint;   // optional model directory for perplexity
  std::string corpus;       // text file for perplexity (default: regenerate the bundled corpus)
  std::size_t eval_windows = 8;

  void validate() const;
};

SweepSpec sweep_spec_from_json(const json& j, SweepSpec base = {});
json to_json(const SweepSpec& spec);

struct SweepRow {
  std::size_t window = 0;
  std::size_t chunk = 0;
  std::size_t total_tokens = 0;
  std::size_t cache_entries = 0;
  std::size_t full_entries = 0;
  double ratio = 0.0;
  bool main_config = false;  // window 256, chunk 16
  std::optional<double> perplexity;
  double tokens_per_sec = 0.0;  // timing column
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<std::string> skipped;  // reason per invalid (w, chunk) pair
};

SweepResult run_sweep(const SweepSpec& spec);

// Timing columns come last so `cut` / prefix comparisons see the
// deterministic part first.
std::string sweep_csv(const SweepSpec& spec, const SweepResult& result, bool include_timing = true);

}  // namespace evakit::cli
