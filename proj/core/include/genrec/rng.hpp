#pragma once

#include <cstdint>
#include <vector>

namespace genrec {

// Deterministic seeded generator (xoshiro256**). All stochastic code takes an
// Rng explicitly; there is no global generator. split() derives an independent
// child stream so parallel consumers stay reproducible.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Uniform integer in [0, n).
  int64_t randint(int64_t n);
  // Child generator for stream `id`, independent of this one's future output.
  Rng split(uint64_t id) const;

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = randint(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

 private:
  uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace genrec
