#pragma once

#include <cstdint>
#include <random>

namespace difproc {

// Counter-derived random substreams. A stream is addressed by
// (master seed, replication, item, purpose); the address is mixed through
// a splitmix64 chain into the mt19937_64 seed, so any (rep, item) cell can
// be generated independently of execution order and parallel runs
// reproduce the serial output exactly.
//
// Distribution transforms are fixed here rather than delegated to
// std::<distribution> types because libstdc++ does not pin their
// algorithms; the ones below are stable across platforms given the same
// engine output.
class Rng {
 public:
  // Purposes keep logically distinct draws on disjoint streams.
  enum Purpose : std::uint64_t {
    generate = 1,
    starts = 2,
    scratch = 3,
  };

  Rng(std::uint64_t master, std::uint64_t rep, std::uint64_t item, std::uint64_t purpose);

  // Raw 64-bit engine output.
  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller. Both factors are drawn every call (no
  // cached spare) so the stream position is a pure function of the call
  // count.
  double normal();

  // Exponential with unit rate.
  double exponential();

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// splitmix64 step; exposed for digesting and seed mixing.
std::uint64_t splitmix64(std::uint64_t& state);

// Collapse an address tuple into a single well-mixed 64-bit value.
std::uint64_t mix_seed(std::uint64_t master, std::uint64_t rep, std::uint64_t item,
                       std::uint64_t purpose);

}  // namespace difproc
