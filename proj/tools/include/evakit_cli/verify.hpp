#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evakit_cli/common.hpp"

namespace evakit::cli {

struct VerifyOptions {
  std::uint64_t seed = 0;
  std::size_t equivalence_instances = 200;
  std::size_t max_n = 512;
  std::size_t exactness_instances = 100;
  std::size_t gradient_configs = 10;
  std::size_t decode_steps = 1024;
  std::size_t mc_seeds = 20;
  // Perturbs every beta_hat by 1e-3 on the FlashEVA side of the equivalence suite.
  bool inject_fault = false;
};

VerifyOptions verify_options_from_json(const json& j, VerifyOptions base = {});
json to_json(const VerifyOptions& opts);

struct SuiteResult {
  std::string name;
  bool pass = false;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t instances = 0;
  std::string detail;
};

// Individual suites; each is deterministic in its seed.
SuiteResult suite_equivalence(std::uint64_t seed, std::size_t instances, std::size_t max_n, bool inject_fault);
SuiteResult suite_degenerate(std::uint64_t seed, std::size_t instances);
SuiteResult suite_tiling(std::uint64_t seed, std::size_t instances);
SuiteResult suite_gradients(std::uint64_t seed, std::size_t configs);
SuiteResult suite_streaming(std::uint64_t seed, std::size_t steps);
SuiteResult suite_cache(std::uint64_t seed);
SuiteResult suite_monte_carlo(std::uint64_t seed, std::size_t seeds);
SuiteResult suite_rope(std::uint64_t seed);

struct VerifyReport {
  std::vector<SuiteResult> suites;
  bool pass() const;
};

VerifyReport run_verify(const VerifyOptions& opts);
// Non-timing report with provenance; identical for identical options.
json verify_report_json(const VerifyOptions& opts, const VerifyReport& report);

// Componentwise |a - b| / max(|a|, |b|, floor).
double gradient_rel_error(double analytic, double numeric, double floor = 1e-3);

}  // namespace evakit::cli
