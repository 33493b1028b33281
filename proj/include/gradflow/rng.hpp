// Deterministic random number generation: xoshiro256++ streams with
// splitmix64-based key derivation and Box-Muller normals.
//
// Every stochastic operation in this library takes an explicit 64-bit seed;
// substreams are derived by hashing (seed, stream) so that per-item streams
// are independent of evaluation order.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace gradflow {

namespace detail {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t rotl64(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace detail

// Hash-combines a seed with a stream index into a fresh 64-bit key.
inline std::uint64_t mix64(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed + 0x9E3779B97F4A7C15ull * (stream + 0x632BE59BD9B4E019ull);
  std::uint64_t a = detail::splitmix64_next(s);
  std::uint64_t b = detail::splitmix64_next(s);
  return a ^ detail::rotl64(b, 32);
}

inline std::uint64_t mix64(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix64(mix64(seed, a), b);
}

// Counter-seeded xoshiro256++ generator. Bit-reproducible across platforms
// for a fixed (seed, stream) pair; no ambient state anywhere.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "xoshiro256++/splitmix64-streams/box-muller v1";

  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = detail::splitmix64_next(sm);
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  Rng(std::uint64_t seed, std::uint64_t stream) : Rng(mix64(seed, stream)) {}

  std::uint64_t next_u64() {
    const std::uint64_t result = detail::rotl64(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = detail::rotl64(state_[3], 45);
    return result;
  }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1]; safe as a log() argument.
  double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    const int k = static_cast<int>(uniform() * static_cast<double>(n));
    return k < n ? k : n - 1;
  }

  // Standard normal via Box-Muller; generated in pairs, one cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_pos();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  std::array<std::uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace gradflow
