#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace qndtomo {

/// SplitMix64 finalizer; mixes a 64-bit value into a well-distributed seed.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Sub-seed for (master seed, sequence id, stream) so every sequence and every
/// purpose within it draws from an independent, order-free stream.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t id, std::uint64_t stream = 0) noexcept {
  return mix64(mix64(mix64(master) ^ id) ^ (stream * 0xd1b54a32d192ed03ULL));
}

/// Random source with platform-independent output.
///
/// Draws come straight from the 64-bit Mersenne Twister bits rather than the
/// standard distributions, whose algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Exponential with the given rate.
  double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace qndtomo
