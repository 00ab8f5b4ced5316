#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "versemi/error.hpp"

namespace versemi {

// splitmix64 step, also used to hash seed tuples into stream seeds.
inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix64(std::uint64_t a) {
  return splitmix64(a);
}
inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
  std::uint64_t h = splitmix64(x);
  x ^= b + 0x9e3779b97f4a7c15ULL;
  return h ^ splitmix64(x);
}
inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix64(mix64(a, b), c);
}

// xoshiro256** with hand-rolled distributions, so that streams are identical
// across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& si : s_) si = splitmix64(x);
  }

  std::uint64_t u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0,1) with 53 random bits
  double real() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * real(); }

  // unbiased integer in [0,n)
  std::int64_t index(std::int64_t n) {
    require(n > 0, ErrorCode::invalid_argument, "Rng::index needs n > 0");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t threshold = (0 - un) % un;
    for (;;) {
      const std::uint64_t x = u64();
      if (x >= threshold) return static_cast<std::int64_t>(x % un);
    }
  }

  // Box-Muller; the spare value is cached in the stream state.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = real();
    while (u1 <= 0.0) u1 = real();
    const double u2 = real();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return real() < p; }

  template <class V>
  void shuffle(V& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      const std::int64_t j = index(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

  // Independent child stream; deterministic in (state-seed, tag).
  Rng fork(std::uint64_t tag) { return Rng(mix64(u64(), tag)); }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<std::uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace versemi
