#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace sidlab {

// Seeded random stream whose full state round-trips through a string, so
// runs can be checkpointed and resumed bit-exactly. Normal draws use
// Box-Muller without a cached spare value; the engine state is the whole
// state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1).
  double uniform();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  double normal();

  // Independent stream derived from this generator's seed material.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  std::string state() const;
  void set_state(const std::string& state);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace sidlab
