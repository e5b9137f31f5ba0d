#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace s2c {

// Mixes (seed, stream) into an independent 64-bit seed with SplitMix64.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Deterministic random source. The engine is std::mt19937_64, whose output
// sequence is fixed by the C++ standard; all derived draws are computed here
// rather than through <random> distributions, which are implementation-defined.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 5489u) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; consumes exactly two engine outputs.
  double normal();

  // Uniform integer in [0, bound), unbiased (rejection sampling).
  std::uint64_t below(std::uint64_t bound);

  std::string state() const;
  void set_state(const std::string& text);

  friend bool operator==(const SeededRng& a, const SeededRng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

// Named sub-streams split off the single top-level seed.
namespace streams {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t shuffle = 2;
inline constexpr std::uint64_t growth = 3;
inline constexpr std::uint64_t synthetic = 4;
inline constexpr std::uint64_t probes = 5;
inline constexpr std::uint64_t augment = 6;
inline constexpr std::uint64_t subset = 7;
}  // namespace streams

}  // namespace s2c
