#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace somnolog {

// Seeded random stream. The distributions are implemented here rather than
// taken from <random> so that a given seed yields the same values on every
// standard library; only the mt19937_64 engine is used from the stdlib.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();
  // Gamma(shape, scale), Marsaglia-Tsang.
  double gamma(double shape, double scale);
  // Geometric number of trials >= 1 with the given mean.
  std::uint64_t geometric_length(double mean);

  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);
// Stable 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view text);
// Derives an independent stream seed from a master seed and a tag
// (subject id, stage name, sample index...).
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace somnolog
