// Deterministic random number generation.
//
// All sampling goes through Rng so results depend only on the seed, not on
// libstdc++ distribution internals. splitmix64 drives the stream; normal
// variates come from a fixed Box-Muller implementation.

#pragma once

#include <cmath>
#include <cstdint>

#include "bevplan/tensor.hpp"

namespace bevplan {

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stable combination of seed components into a fresh stream seed.
inline uint64_t seed_combine(uint64_t a, uint64_t b) {
  uint64_t s = a;
  (void)splitmix64(s);
  s ^= b + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
  return s;
}

inline uint64_t seed_combine(uint64_t a, uint64_t b, uint64_t c) {
  return seed_combine(seed_combine(a, b), c);
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed ^ 0x6a09e667f3bcc909ULL) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename S>
  void fill_uniform(Tensor<S>& t, S lo, S hi) {
    for (int64_t i = 0; i < t.size(); ++i)
      t[i] = static_cast<S>(uniform(static_cast<double>(lo), static_cast<double>(hi)));
  }

  template <typename S>
  void fill_normal(Tensor<S>& t, S mean = S(0), S stddev = S(1)) {
    for (int64_t i = 0; i < t.size(); ++i)
      t[i] = static_cast<S>(static_cast<double>(mean) + static_cast<double>(stddev) * normal());
  }

  // Fisher-Yates shuffle of an index vector.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Sample an index from unnormalized nonnegative weights.
  int sample_weighted(const std::vector<double>& w) {
    double total = 0;
    for (double x : w) total += x;
    double r = uniform() * total;
    double acc = 0;
    for (size_t i = 0; i < w.size(); ++i) {
      acc += w[i];
      if (r < acc) return static_cast<int>(i);
    }
    return static_cast<int>(w.size()) - 1;
  }

 private:
  uint64_t state_;
};

}  // namespace bevplan
