#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace dcs {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Deterministic RNG stream. All transforms are built from raw mt19937_64
// output so identical seeds give identical draws on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(detail::splitmix64(seed)) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1), both ends excluded.
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, one value per call.
  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double gumbel() { return -std::log(-std::log(uniform_open())); }

 private:
  std::mt19937_64 eng_;
};

// Derives an independent child stream from (seed, path...). Used to give
// every (epoch, image, view) its own reproducible stream regardless of
// evaluation order.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = detail::splitmix64(seed);
  for (std::uint64_t p : path) h = detail::splitmix64(h ^ detail::splitmix64(p));
  return Rng(h);
}

}  // namespace dcs
