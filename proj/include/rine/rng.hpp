#pragma once

#include <cstdint>
#include <string_view>

namespace rine {

// Counter-based generator: draw i of a stream keyed by `seed` is
// splitmix64_finalize(seed + i * 0x9E3779B97F4A7C15). The whole state is
// (seed, counter), so a stream can be saved, restored, or skipped ahead, and
// the output is identical on every platform. Floating-point draws are built
// from the integer stream without std:: distributions, whose algorithms are
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  // Standard normal via Box-Muller; consumes two draws.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  bool bernoulli(double p) { return uniform() < p; }

  // Independent child stream keyed by this stream's seed and a tag.
  Rng derive(std::uint64_t tag) const;
  Rng derive(std::string_view tag) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  bool operator==(const Rng&) const = default;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

std::uint64_t splitmix64(std::uint64_t x);
// FNV-1a, used to key streams by string ids.
std::uint64_t hash_string(std::string_view text);

}  // namespace rine
