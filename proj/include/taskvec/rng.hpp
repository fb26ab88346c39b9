#pragma once

#include <cmath>
#include <cstdint>

namespace taskvec {

// Counter-style splittable generator built on splitmix64. Every consumer
// receives an explicit stream; there is no global RNG state anywhere in the
// library. split() derives an independent child without advancing the parent,
// so the same (seed, label) pair always yields the same stream.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(mix(seed ^ kSeedTag)) {}

  // Independent child stream keyed by label. Distinct labels give
  // decorrelated streams; reusing a label reproduces the same child.
  RngStream split(std::uint64_t label) const {
    return RngStream(mix(state_ ^ mix(label * kGamma + kSplitTag)));
  }

  std::uint64_t next_u64() {
    state_ += kGamma;
    return mix(state_);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be >= 1.
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(
        (static_cast<unsigned __int128>(next_u64()) *
         static_cast<unsigned __int128>(n)) >>
        64);
  }

  // Standard normal via Box-Muller; the paired draw is cached so consecutive
  // calls consume uniforms deterministically.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * kPi * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  static constexpr std::uint64_t kSeedTag = 0x5bf0363546df1f2full;
  static constexpr std::uint64_t kSplitTag = 0xd1b54a32d192ed03ull;
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace taskvec
