#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace worldgen {

// Deterministic RNG used everywhere in the project. std::mt19937 is fully
// specified by the standard; the distributions are hand-rolled because the
// standard library ones are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(static_cast<uint32_t>(mix(seed))) {}

  uint32_t next_u32() { return gen_(); }

  // [0, 1)
  double uniform() { return next_u32() * (1.0 / 4294967296.0); }

  // (0, 1), safe for log()
  double uniform_open() { return (next_u32() + 0.5) * (1.0 / 4294967296.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) { return static_cast<int>(uniform() * n); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform_open();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Independent stream derived from this generator's seed.
  Rng fork(uint64_t stream) const { return Rng(mix(seed_ ^ (0x9e3779b97f4a7c15ull * (stream + 1)))); }

  static uint64_t mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

 private:
  uint64_t seed_;
  std::mt19937 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace worldgen
