#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "dimerec/datapipe.hpp"
#include "dimerec/error.hpp"
#include "dimerec/rng.hpp"

// Clustered interaction generator used for end-to-end checks. Items are
// partitioned into latent interest clusters with Zipf popularity inside each
// cluster; every user mixes a few clusters and hops between them with a sticky
// Markov chain, never repeating an item.
namespace dimerec::synth {

using data::ItemId;

struct SyntheticSpec {
  std::size_t users = 5000;
  std::size_t items = 2000;
  std::size_t clusters = 8;
  std::size_t min_user_clusters = 2;
  std::size_t max_user_clusters = 3;
  std::size_t min_length = 10;
  std::size_t max_length = 30;
  double stay = 0.8;      // probability of staying in the current cluster
  double zipf = 1.0;      // popularity exponent within a cluster
  std::uint64_t seed = 2024;
};

struct SyntheticData {
  std::vector<std::vector<ItemId>> sequences;
  std::vector<std::size_t> item_cluster;
  std::vector<std::vector<std::size_t>> user_clusters;
  std::size_t item_count = 0;
};

inline void validate(const SyntheticSpec& s) {
  if (s.users == 0 || s.items == 0 || s.clusters == 0) throw ConfigError("synthetic: sizes must be positive");
  if (s.items < s.clusters) throw ConfigError("synthetic: fewer items than clusters");
  if (s.min_user_clusters == 0 || s.min_user_clusters > s.max_user_clusters || s.max_user_clusters > s.clusters) {
    throw ConfigError("synthetic: invalid clusters-per-user range");
  }
  if (s.min_length < 2 || s.min_length > s.max_length) throw ConfigError("synthetic: invalid length range");
  if (s.max_length > (s.items / s.clusters) * s.min_user_clusters) {
    throw ConfigError("synthetic: max_length exceeds the items reachable by a user");
  }
  if (s.stay < 0.0 || s.stay > 1.0) throw ConfigError("synthetic: stay must be in [0, 1]");
}

inline SyntheticData make_synthetic(const SyntheticSpec& spec) {
  validate(spec);
  Rng rng = derive_rng(spec.seed, 0);
  SyntheticData out;
  out.item_count = spec.items;

  std::vector<ItemId> perm(spec.items);
  std::iota(perm.begin(), perm.end(), ItemId{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<ItemId>> members(spec.clusters);
  out.item_cluster.resize(spec.items);
  for (std::size_t i = 0; i < spec.items; ++i) {
    members[i % spec.clusters].push_back(perm[i]);
    out.item_cluster[perm[i]] = i % spec.clusters;
  }
  std::vector<std::discrete_distribution<std::size_t>> popularity;
  for (const auto& m : members) {
    std::vector<double> w(m.size());
    for (std::size_t r = 0; r < m.size(); ++r) w[r] = 1.0 / std::pow(static_cast<double>(r + 1), spec.zipf);
    popularity.emplace_back(w.begin(), w.end());
  }

  std::uniform_int_distribution<std::size_t> n_clusters(spec.min_user_clusters, spec.max_user_clusters);
  std::uniform_int_distribution<std::size_t> length(spec.min_length, spec.max_length);
  std::bernoulli_distribution stay(spec.stay);
  std::vector<std::size_t> all(spec.clusters);
  std::iota(all.begin(), all.end(), std::size_t{0});
  out.sequences.reserve(spec.users);
  for (std::size_t u = 0; u < spec.users; ++u) {
    std::shuffle(all.begin(), all.end(), rng);
    std::vector<std::size_t> mine(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_clusters(rng)));
    const std::size_t len = length(rng);
    std::uniform_int_distribution<std::size_t> pick(0, mine.size() - 1);
    std::size_t current = pick(rng);
    std::vector<ItemId> seq;
    std::vector<char> seen(spec.items, 0);
    while (seq.size() < len) {
      if (!stay(rng)) current = pick(rng);
      const auto& m = members[mine[current]];
      ItemId item = m[popularity[mine[current]](rng)];
      // Fall back to the most popular unseen member after repeated collisions.
      for (int tries = 0; seen[item] && tries < 32; ++tries) item = m[popularity[mine[current]](rng)];
      if (seen[item]) {
        auto it = std::find_if(m.begin(), m.end(), [&](ItemId i) { return !seen[i]; });
        if (it == m.end()) continue;
        item = *it;
      }
      seen[item] = 1;
      seq.push_back(item);
    }
    out.sequences.push_back(std::move(seq));
    out.user_clusters.push_back(std::move(mine));
  }
  return out;
}

// `user \t item \t timestamp` rows with keys u<id> / i<id>.
inline void write_tsv(std::ostream& os, const SyntheticData& data) {
  for (std::size_t u = 0; u < data.sequences.size(); ++u) {
    for (std::size_t k = 0; k < data.sequences[u].size(); ++k) {
      os << 'u' << u << "\ti" << data.sequences[u][k] << '\t' << 1000000 + k << '\n';
    }
  }
}

// `item \t label` rows (cluster names) for the probe and diversity tools.
inline void write_categories(std::ostream& os, const SyntheticData& data) {
  for (std::size_t i = 0; i < data.item_cluster.size(); ++i) os << 'i' << i << "\tc" << data.item_cluster[i] << '\n';
}

inline std::vector<std::vector<std::string>> category_table(const SyntheticData& data) {
  std::vector<std::vector<std::string>> t(data.item_cluster.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = {"c" + std::to_string(data.item_cluster[i])};
  return t;
}

}  // namespace dimerec::synth
