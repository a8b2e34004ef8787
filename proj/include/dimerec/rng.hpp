#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace dimerec {

// All stochastic code takes an explicit engine so runs are reproducible from
// a seed. std::normal_distribution is only stable within one standard
// library, which is enough for the determinism guarantees here.
using Rng = std::mt19937_64;

inline std::vector<double> standard_normal(Rng& rng, std::size_t n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> out(n);
  for (double& v : out) v = dist(rng);
  return out;
}

// Derives an independent stream for a sub-task (per epoch, per user, ...).
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x9e3779b9u};
  return Rng(seq);
}

}  // namespace dimerec
