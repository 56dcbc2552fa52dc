#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "json.hpp"

namespace evakit::cli {

using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfigError = 2;

// Worker cap from EVA_KIT_THREADS (default 1; invalid values are a ConfigError).
std::size_t worker_count();

// Runs fn(0..n-1) across worker_count() threads. Callers write results into
// per-index slots so the outcome does not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

// {"seed", "git_describe", "rng", "config"} block embedded in every artifact.
json provenance(std::uint64_t seed, const json& config);

// The same block as "# key: value" lines for CSV headers.
std::string csv_provenance(std::uint64_t seed, const json& config);

json load_json_file(const std::string& path);

// Writes to `path`, or stdout when path is empty or "-".
void write_output(const std::string& path, const std::string& text);

// Parse with evakit's string-level config readers.
json parse_json_text(const std::string& text);

}  // namespace evakit::cli
