#pragma once

#include <cstdint>
#include <cmath>
#include <numbers>
#include <string_view>
#include <vector>

namespace sae::rng {

/// splitmix64 finalizer; used both as a generator step and as a seed mixer.
inline std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d4ecda82f63d95ULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic counter-based stream (splitmix64). The same (seed, tag,
/// indices) derivation always yields the same draws, independent of any
/// other stream and of thread scheduling.
class Stream {
 public:
  explicit Stream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d4ecda82f63d95ULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0,1) with 53 bits of precision.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer on [0, n), rejection-sampled (no modulo bias).
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller; two uniforms per draw, no caching,
  /// so the draw sequence depends only on the call count.
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Fisher-Yates permutation of {0,...,n-1}.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = uniform_int(i);
      std::swap(idx[i - 1], idx[j]);
    }
    return idx;
  }

 private:
  std::uint64_t state_;
};

/// Named stream derivation: all randomness flows from one master seed
/// through string-keyed paths, e.g. derive(seed, "boot", b, c).
inline Stream derive(std::uint64_t master, std::string_view tag) {
  return Stream(mix(master ^ hash_tag(tag)));
}
inline Stream derive(std::uint64_t master, std::string_view tag,
                     std::uint64_t i) {
  return Stream(mix(mix(master ^ hash_tag(tag)) ^ i));
}
inline Stream derive(std::uint64_t master, std::string_view tag,
                     std::uint64_t i, std::uint64_t j) {
  return Stream(mix(mix(mix(master ^ hash_tag(tag)) ^ i) ^ j));
}

}  // namespace sae::rng
