#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "dimerec/model.hpp"

// Serving: reverse-process generation of the user embedding and brute-force
// inner-product retrieval over the item pool.
namespace dimerec::inference {

using data::ItemId;

struct Scored {
  ItemId item;
  double score;

  friend bool operator==(const Scored&, const Scored&) = default;
};

// Brute-force maximum inner product search over raw item embeddings.
class RetrievalIndex {
 public:
  explicit RetrievalIndex(Tensor items) : items_(std::move(items)) {
    if (items_.rank() != 2) throw DimensionError("RetrievalIndex: item matrix must be rank 2");
  }

  std::size_t size() const { return items_.rows(); }
  std::size_t dim() const { return items_.cols(); }
  const Tensor& items() const { return items_; }

  std::vector<double> scores(std::span<const double> query) const {
    if (query.size() != dim()) throw DimensionError("RetrievalIndex: query dimension mismatch");
    std::vector<double> s(size());
    ops::detail::ConstMap m = ops::detail::as_matrix(items_);
    Eigen::Map<const Eigen::VectorXd> q(query.data(), static_cast<Eigen::Index>(query.size()));
    Eigen::Map<Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size())).noalias() = m * q;
    return s;
  }

 private:
  Tensor items_;
};

// The n best (score desc, id asc) entries of `scores`, skipping ids in the
// sorted `excluded` list.
inline std::vector<Scored> rank_scores(std::span<const double> scores, std::size_t n,
                                       std::span<const ItemId> excluded = {}) {
  std::vector<Scored> cand;
  cand.reserve(scores.size());
  for (ItemId i = 0; i < scores.size(); ++i) {
    if (!excluded.empty() && std::binary_search(excluded.begin(), excluded.end(), i)) continue;
    cand.push_back({i, scores[i]});
  }
  if (n > cand.size()) {
    throw ContractError("requested top-" + std::to_string(n) + " from " + std::to_string(cand.size()) + " candidates");
  }
  auto better = [](const Scored& a, const Scored& b) { return a.score > b.score || (a.score == b.score && a.item < b.item); };
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n), cand.end(), better);
  cand.resize(n);
  return cand;
}

inline std::vector<Scored> top_n(const RetrievalIndex& index, std::span<const double> query, std::size_t n) {
  if (index.size() == 0) throw ContractError("top_n: empty index");
  if (n > index.size()) throw ContractError("top_n: n exceeds the item count");
  return rank_scores(index.scores(query), n);
}

// Multi-interest retrieval: an item's score is its best inner product over
// the query rows.
inline std::vector<double> max_scores(const RetrievalIndex& index, const Tensor& queries) {
  std::vector<double> best(index.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < queries.rows(); ++k) {
    const auto s = index.scores(queries.row(k));
    for (std::size_t i = 0; i < s.size(); ++i) best[i] = std::max(best[i], s[i]);
  }
  return best;
}

struct GenerationOptions {
  int steps = 0;  // 0: the schedule's T
  diffusion::ReverseNoise noise = diffusion::ReverseNoise::stddev;
  bool keep_trajectory = false;
};

struct Generation {
  Tensor e_u;  // B x d
  // trajectory[k] holds x_{s-k-1} for all rows, i.e. the state after k+1
  // reverse steps; the last entry equals e_u.
  std::vector<Tensor> trajectory;
  Tensor guidance;  // (B*K) x d
  std::size_t denoiser_calls = 0;
};

// Batched reverse process. Starts from x_s ~ N(0, I) projected onto the
// sphere, then for t = s..1 denoises with the (fixed) guidance and takes one
// ancestral step followed by L2 normalisation.
inline Generation generate(std::span<const std::vector<ItemId>> histories, const ModelParams& params,
                           const diffusion::NoiseSchedule& schedule, Rng& rng, const GenerationOptions& options = {},
                           bool on_sphere = true) {
  const int steps = options.steps == 0 ? schedule.steps() : options.steps;
  if (steps < 1 || steps > schedule.steps()) {
    throw ConfigError("generation steps " + std::to_string(steps) + " outside [1, " + std::to_string(schedule.steps()) + "]");
  }
  const std::size_t B = histories.size(), d = params.dim();
  Generation out;
  if (B == 0) return out;
  Tape tape(false);
  const BoundModel model = bind_constant(tape, params);
  gem::HistoryBatch batch;
  for (const auto& h : histories) batch.add(model_window(params, h));
  const Var g = guidance(model, batch).g;
  out.guidance = g.value();

  Tensor x(Shape{B, d});
  for (std::size_t b = 0; b < B; ++b) {
    const auto v = diffusion::normalized(standard_normal(rng, d));
    std::copy(v.begin(), v.end(), x.row(b).begin());
  }
  for (int t = steps; t >= 1; --t) {
    Tape step_tape(false);
    const auto dv = dam::bind_constant(step_tape, params.dam);
    const auto den = dam::denoise(step_tape.constant(x), std::vector<int>(B, t), step_tape.constant(out.guidance), dv, on_sphere);
    ++out.denoiser_calls;
    const Tensor& x0_hat = den.x0_hat.value();
    Tensor next(Shape{B, d});
    for (std::size_t b = 0; b < B; ++b) {
      const auto v = diffusion::reverse_step(x.row(b), x0_hat.row(b), t, schedule, rng, true, options.noise);
      std::copy(v.begin(), v.end(), next.row(b).begin());
    }
    x = std::move(next);
    if (options.keep_trajectory) out.trajectory.push_back(x);
  }
  out.e_u = std::move(x);
  return out;
}

// Single-history convenience wrapper.
inline std::vector<double> generate_user_embedding(std::span<const ItemId> history, const ModelParams& params,
                                                   const diffusion::NoiseSchedule& schedule, int steps, Rng& rng,
                                                   std::vector<std::vector<double>>* trajectory = nullptr,
                                                   diffusion::ReverseNoise noise = diffusion::ReverseNoise::stddev) {
  std::vector<std::vector<ItemId>> hs{std::vector<ItemId>(history.begin(), history.end())};
  const auto gen = generate(hs, params, schedule, rng, {steps, noise, trajectory != nullptr});
  if (trajectory) {
    trajectory->clear();
    for (const auto& s : gen.trajectory) trajectory->emplace_back(s.values().begin(), s.values().end());
  }
  return {gen.e_u.values().begin(), gen.e_u.values().end()};
}

// Guidance vectors (K x d) for one history, without diffusion.
inline Tensor guidance_for(std::span<const ItemId> history, const ModelParams& params) {
  Tape tape(false);
  const BoundModel model = bind_constant(tape, params);
  gem::HistoryBatch batch;
  batch.add(model_window(params, history));
  return guidance(model, batch).g.value();
}

// top_n with the history's items removed, backfilled to n from lower ranks.
inline std::vector<Scored> recommend_from_scores(std::span<const double> scores, std::span<const ItemId> history,
                                                 std::size_t n) {
  std::vector<ItemId> excluded(history.begin(), history.end());
  std::sort(excluded.begin(), excluded.end());
  excluded.erase(std::unique(excluded.begin(), excluded.end()), excluded.end());
  if (n + excluded.size() > scores.size()) {
    throw ContractError("recommend: n = " + std::to_string(n) + " exceeds the " +
                        std::to_string(scores.size() - excluded.size()) + " items outside the history");
  }
  return rank_scores(scores, n, excluded);
}

inline std::vector<Scored> recommend(std::span<const ItemId> history, const ModelParams& params,
                                     const diffusion::NoiseSchedule& schedule, std::size_t n, int steps, Rng& rng,
                                     Retrieval retrieval = Retrieval::diffusion) {
  const RetrievalIndex index(params.item_embedding.value);
  if (retrieval == Retrieval::gem) return recommend_from_scores(max_scores(index, guidance_for(history, params)), history, n);
  const auto e_u = generate_user_embedding(history, params, schedule, steps, rng);
  return recommend_from_scores(index.scores(e_u), history, n);
}

}  // namespace dimerec::inference
