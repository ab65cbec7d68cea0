#pragma once

#include <boost/random/mersenne_twister.hpp>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

#include "patchmoe/precision.hpp"

namespace patchmoe::inline PATCHMOE_PRECISION {

/// Seeded random stream. The engine is MT19937-64 and the distributions come
/// from Boost.Random, whose algorithms are fixed in source, so a seed yields
/// the same stream on every platform and standard library.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "mt19937_64+boost.random";

  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  double normal(double mean = 0.0, double stddev = 1.0);
  /// Beta(a, b); a, b > 0.
  double beta(double a, double b);
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  std::vector<std::size_t> permutation(std::size_t n);

  /// Independent child stream keyed by `stream`; does not advance this one.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  boost::random::mt19937_64 engine_;
};

}  // namespace patchmoe::inline PATCHMOE_PRECISION
