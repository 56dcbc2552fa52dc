#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace evakit {

// Name recorded in every output artifact that depends on random draws.
inline constexpr std::string_view kRngName = "philox4x32-10+box-muller";

// One Philox4x32-10 block: 4 x 32-bit outputs for a 128-bit counter and 64-bit key.
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter,
                                           std::array<std::uint32_t, 2> key);

// SplitMix64 finalizer; used to fold several ids into one seed.
std::uint64_t mix64(std::uint64_t x);

// Deterministic combination of (seed, a, b, c) into a stream seed. Used for the
// per-chunk draws so batch recompute and streaming decode agree.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

// Counter-based generator. The key is the seed and the high counter words are
// the stream id, so distinct (seed, stream) pairs never share blocks.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  // Uniform in the open interval (0, 1).
  double uniform();
  // Standard normal via Box-Muller (both outputs used).
  double normal();
  // Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

 private:
  void refill();

  std::array<std::uint32_t, 2> key_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int buffered_ = 0;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace evakit
