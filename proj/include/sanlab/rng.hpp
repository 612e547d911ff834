#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace sanlab {

//! Seeded 64-bit Mersenne Twister with distribution code written out here, so
//! that a seed produces the same stream on every standard library.
class Rng
{
public:
  explicit Rng(std::uint64_t seed)
    : engine_(seed)
  {
  }

  //! Independent stream for a named purpose, e.g. Rng::derive(seed, "head").
  static auto derive(std::uint64_t seed, std::string_view tag,
                     std::uint64_t index = 0) -> Rng
  {
    // FNV-1a over the tag, mixed with seed and index by splitmix64.
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : tag)
      h = (h ^ c) * 1099511628211ull;
    return Rng(splitmix(seed ^ splitmix(h ^ splitmix(index))));
  }

  auto next_u64() -> std::uint64_t { return engine_(); }

  //! Uniform in [0, 1) with 53 random bits.
  auto uniform() -> double
  {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  auto uniform(double lo, double hi) -> double
  {
    return lo + (hi - lo) * uniform();
  }

  //! Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  auto below(std::uint64_t n) -> std::uint64_t
  {
    if (n == 0)
      return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r;
    do
      r = engine_();
    while (r >= limit);
    return r % n;
  }

  //! Standard normal via Box-Muller (one value per call, no caching).
  auto normal() -> double
  {
    double u1 = uniform();
    while (u1 <= 0.0)
      u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  auto normal(double mean, double stddev) -> double
  {
    return mean + stddev * normal();
  }

private:
  static auto splitmix(std::uint64_t x) -> std::uint64_t
  {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace sanlab
