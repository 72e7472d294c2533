#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "reclab/common.hpp"

namespace reclab {

// Deterministic RNG. All randomness in a run flows from one root seed;
// components draw from named sub-streams so they can be reseeded
// independently without perturbing each other. Distributions are
// implemented here rather than with std:: ones, which are not specified
// bit-exactly across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix(seed)) {}
  Rng(std::uint64_t seed, const std::string& stream)
      : Rng(seed ^ fnv1a64(stream)) {}

  Rng stream(const std::string& name) const {
    return Rng(state_ ^ fnv1a64(name), name);
  }

  std::uint64_t next_u64() {
    // xorshift* keeps the generator header-only and platform-stable.
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  // Uniform integer in [0, n).
  std::uint64_t uniform_u64(std::uint64_t n) {
    require(n > 0, "uniform_u64: n must be positive");
    // Rejection sampling to avoid modulo bias.
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }
  Index uniform_index(Index n) {
    return static_cast<Index>(uniform_u64(static_cast<std::uint64_t>(n)));
  }

  double uniform() {  // [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // Box-Muller.
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Truncated normal in [-2, 2] sigmas, the usual weight init.
  double truncated_normal() {
    double x = normal();
    while (x < -2.0 || x > 2.0) x = normal();
    return x;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_u64(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), order arbitrary but deterministic.
  std::vector<Index> sample_without_replacement(Index n, Index k) {
    require(k <= n, "sample_without_replacement: k > n");
    // Floyd's algorithm keeps memory at O(k).
    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(k));
    std::vector<bool> seen;  // dense flags are fine at the catalog sizes here
    seen.assign(static_cast<std::size_t>(n), false);
    for (Index j = n - k; j < n; ++j) {
      Index t = uniform_index(j + 1);
      if (seen[static_cast<std::size_t>(t)]) t = j;
      seen[static_cast<std::size_t>(t)] = true;
      out.push_back(t);
    }
    return out;
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    x = x ^ (x >> 31);
    return x ? x : 0x9e3779b97f4a7c15ull;
  }

  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace reclab
