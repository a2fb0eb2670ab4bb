#include "difproc/rng.hpp"

#include <cmath>

namespace difproc {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t master, std::uint64_t rep, std::uint64_t item,
                       std::uint64_t purpose) {
  std::uint64_t s = master;
  std::uint64_t h = splitmix64(s);
  s ^= rep;
  h ^= splitmix64(s);
  s ^= item;
  h ^= splitmix64(s);
  s ^= purpose;
  h ^= splitmix64(s);
  return h;
}

Rng::Rng(std::uint64_t master, std::uint64_t rep, std::uint64_t item, std::uint64_t purpose)
    : engine_(mix_seed(master, rep, item, purpose)) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double Rng::normal() {
  // Guard u1 away from 0 so the log stays finite.
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
  const double r = std::sqrt(-2.0 * std::log(u1));
  return r * std::cos(2.0 * M_PI * u2);
}

double Rng::exponential() {
  double u = uniform();
  return -std::log1p(-u);
}

}  // namespace difproc
