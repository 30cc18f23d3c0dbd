#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace anchorlab {

/// Seeded random stream.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The standard distribution classes are not (their algorithms vary
/// between library vendors), so uniform and normal variates are derived here
/// from raw engine output:
///
///   uniform()  = (engine() >> 11) * 2^-53            in [0, 1)
///   normal()   = Box-Muller on two uniforms, cosine branch only
///
/// Child streams are derived with `split(tag)`: the child seed is
/// splitmix64(seed ^ splitmix64(tag + 1)). Every experiment cell, rollout
/// worker and evaluation pass gets its own tag so streams never overlap in
/// practice and results do not depend on scheduling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n) by rejection (no modulo bias).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  Rng split(std::uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag + 1))); }

  static constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace anchorlab
