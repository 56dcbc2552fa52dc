#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evakit/attention.hpp"
#include "evakit/eva.hpp"
#include "evakit_cli/common.hpp"

namespace evakit::cli {

enum class BenchMode { constant_c, constant_chunk };

std::string to_string(BenchMode mode);
BenchMode parse_bench_mode(const std::string& s);

struct BenchSpec {
  std::vector<std::size_t> seq_lens{512, 1024, 2048, 4096, 8192, 16384};
  std::size_t b_min = 1;
  std::size_t token_budget = 16384;  // 16384 * b_min unless set
  BenchMode mode = BenchMode::constant_c;
  std::size_t rfa_tokens = 128;  // C in constant-C mode; chunk = L / C
  EvaConfig eva;                 // window, and chunk in constant-chunk mode
  std::size_t dim = 64;
  std::size_t repeats = 3;
  std::size_t warmup = 2;
  std::vector<std::string> impls{"softmax-naive", "softmax-tiled", "flasheva"};
  std::uint64_t seed = 0;

  // Throws ConfigError: budget divisible by every L, repeats >= 3, known impls,
  // and a valid chunk for every length.
  void validate() const;
  // EVA config used at length L.
  EvaConfig eva_for(std::size_t seq_len) const;
};

BenchSpec bench_spec_from_json(const json& j, BenchSpec base = {});
json to_json(const BenchSpec& spec);

struct BenchRow {
  std::string impl;
  BenchMode mode = BenchMode::constant_c;
  std::size_t seq_len = 0;
  std::size_t batch = 0;
  double fwd_ms = 0.0;
  double bwd_ms = 0.0;
  double fwd_iqr = 0.0;
  double bwd_iqr = 0.0;
  std::size_t peak_scratch = 0;  // largest transient buffer of the forward pass, in elements
};

std::vector<BenchRow> run_bench(const BenchSpec& spec);
std::string bench_csv(const BenchSpec& spec, const std::vector<BenchRow>& rows);

// Least-squares slope of log(per-sequence time) against log(L) for one impl,
// using forward + backward time.
double log_log_slope(const std::vector<BenchRow>& rows, const std::string& impl);

// Row-at-a-time backward with an O(M) scratch row and no tiling; the
// reference point for the scaling comparison.
AttentionGrads naive_attn_backward(const AttentionProblem& p, const Mask& mask, const Matrix& d_out);

}  // namespace evakit::cli
