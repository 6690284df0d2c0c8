#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "texbridge/tensor.hpp"

namespace texbridge {

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

/// Deterministic random source. mt19937_64 for the raw stream, with our own
/// uniform/normal transforms so results do not depend on libstdc++'s
/// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : root_(detail::splitmix64(seed)), eng_(root_) {}

  /// Independent child stream, stable w.r.t. call order on other streams.
  Rng derive(const std::string& name) const { return Rng::mixed(detail::splitmix64(root_ ^ detail::fnv1a(name))); }
  Rng derive(uint64_t salt) const {
    return Rng::mixed(detail::splitmix64(root_ ^ (salt * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL)));
  }

  uint64_t next_u64() { return eng_(); }

  /// [0,1) with 53 random bits.
  double uniform01() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  int64_t uniform_int(int64_t n) {  // [0, n)
    return static_cast<int64_t>(eng_() % static_cast<uint64_t>(n));
  }

  /// Standard normal via Box-Muller (cached second draw).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform01(), u2 = uniform01();
    while (u1 <= 1e-300) u1 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double th = 2.0 * M_PI * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

  template <typename S>
  Tensor<S> normal_tensor(Shape shape, double stddev = 1.0) {
    Tensor<S> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(normal() * stddev);
    return t;
  }

  template <typename S>
  Tensor<S> uniform_tensor(Shape shape, double lo, double hi) {
    Tensor<S> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(uniform(lo, hi));
    return t;
  }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = last - first;
    for (decltype(n) i = n - 1; i > 0; --i) {
      auto j = uniform_int(i + 1);
      std::swap(first[i], first[j]);
    }
  }

 private:
  static Rng mixed(uint64_t m) {
    Rng r(0);
    r.root_ = m;
    r.eng_.seed(m);
    return r;
  }
  uint64_t root_;
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace texbridge
