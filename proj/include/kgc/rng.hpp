#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace kgc {

// Deterministic random source. All randomness in the library flows through
// this wrapper; the double conversion is done by hand so that streams are
// bit-identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next() { return eng_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

  // Uniform index in [0, n). Modulo bias is irrelevant at the n used here.
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next() % n); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  // Derives an independent stream; used to decouple e.g. batching order
  // from weight initialization.
  Rng fork(std::uint64_t stream) { return Rng(next() ^ (0x9e3779b97f4a7c15ULL * (stream + 1))); }

 private:
  std::mt19937_64 eng_;
};

}  // namespace kgc
