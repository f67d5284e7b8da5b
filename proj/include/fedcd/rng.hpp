#pragma once

// Deterministic random streams. Every stochastic component in the library
// (init, data synthesis, partitioning, batch order, Gibbs chains) draws from
// a Stream seeded through derive_seed, so runs are reproducible bit-for-bit
// and streams can be serialized into checkpoints. Standard-library
// distributions are avoided on purpose: their output is implementation
// defined, which would break the byte-identical rerun contract.

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace fedcd::rng {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Independent stream seed from a base seed plus up to two stream ids
// (e.g. silo index, chain index).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0) {
  std::uint64_t s = base;
  std::uint64_t h = splitmix64(s);
  s ^= a + 0x9e3779b97f4a7c15ull;
  h ^= splitmix64(s);
  s ^= b + 0x7f4a7c159e3779b9ull;
  h ^= splitmix64(s);
  return h;
}

// xoshiro256++ with explicit, serializable state.
class Stream {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Stream(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1), 53-bit resolution
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Unbiased integer in [0, n)
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("rng: next_below(0)");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via the polar method; the spare deviate is discarded so
  // the stream has no hidden state.
  double normal() {
    for (;;) {
      const double u = 2.0 * next_double() - 1.0;
      const double v = 2.0 * next_double() - 1.0;
      const double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
    }
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Gamma(alpha, 1) by Marsaglia-Tsang; alpha < 1 handled by the boost trick.
  double gamma(double alpha) {
    if (!(alpha > 0.0)) throw std::invalid_argument("rng: gamma needs alpha > 0");
    if (alpha < 1.0) {
      const double u = next_double();
      return gamma(alpha + 1.0) * std::pow(u > 0.0 ? u : 0x1.0p-53, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = next_double();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  std::vector<double> dirichlet(double alpha, std::size_t k) {
    std::vector<double> p(k);
    double total = 0.0;
    for (auto& x : p) {
      x = gamma(alpha);
      total += x;
    }
    if (total <= 0.0) {  // astronomically unlikely; fall back to uniform
      for (auto& x : p) x = 1.0 / static_cast<double>(k);
      return p;
    }
    for (auto& x : p) x /= total;
    return p;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  const State& state() const { return s_; }
  void set_state(const State& s) { s_ = s; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  State s_{};
};

}  // namespace fedcd::rng
