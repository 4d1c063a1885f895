#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace cvl {

// Deterministic random stream used everywhere in the project.
//
// Wraps std::mt19937_64 but derives all variates by hand so that a draw
// sequence depends only on the engine state, never on library-specific
// distribution internals. The full state round-trips through serialize()
// which is what makes checkpoint resume bit-exact.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  int uniform_int(int n);

  // Standard normal via Box-Muller. Stateless: the second variate of the
  // pair is discarded, so the draw count per call is always two.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::string serialize() const;
  static Rng deserialize(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

// splitmix64 finalizer; used to derive independent child seeds
// (per-study, per-resample) from a base seed and an index.
uint64_t mix_seed(uint64_t seed, uint64_t stream);

}  // namespace cvl
