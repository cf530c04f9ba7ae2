#pragma once

#include <cstdint>
#include <random>

namespace bse {

/// SplitMix64 finaliser; used to derive independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed for stream `index` of a run seeded with `seed`.
constexpr std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632BE59BD9B4E019ULL));
}

/// Random source used throughout the library.
///
/// Work items that must be reproducible independent of scheduling get their
/// own `Rng::stream(seed, index)` rather than sharing one engine.
class Rng {
 public:
  using Engine = std::mt19937_64;

  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static Rng stream(std::uint64_t seed, std::uint64_t index) {
    return Rng(stream_seed(seed, index));
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal() { return normal_(engine_); }
  double normal(double mean, double stddev) { return mean + stddev * normal_(engine_); }
  bool bernoulli(double p) { return uniform() < p; }

  Engine& engine() noexcept { return engine_; }

 private:
  Engine engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace bse
