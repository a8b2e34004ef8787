#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "dimerec/config.hpp"
#include "dimerec/numerics/ops.hpp"
#include "dimerec/rng.hpp"

// Guidance extraction: turns a behaviour sequence into K interest vectors,
// either by slicing the latest K items or with self-attentive pooling
// (ComiRec-SA style), and trains them with a sampled softmax against the
// next item.
namespace dimerec::gem {

// Self-attention weights and the positional table. Hidden width is 4d.
struct GemParams {
  Parameter positional;  // max_len x d
  Parameter w1;          // d x 4d
  Parameter b1;          // 4d
  Parameter w2;          // 4d x K
  Parameter b2;          // K

  std::size_t interests() const { return w2.value.cols(); }
  std::size_t max_len() const { return positional.value.rows(); }
};

inline Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor t(Shape{fan_in, fan_out});
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline GemParams init_gem_params(std::size_t d, std::size_t K, std::size_t max_len, Rng& rng) {
  GemParams p;
  p.positional = Parameter("gem.positional", gaussian(Shape{max_len, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
  p.w1 = Parameter("gem.w1", xavier_uniform(d, 4 * d, rng));
  p.b1 = Parameter("gem.b1", Tensor(Shape{4 * d}));
  p.w2 = Parameter("gem.w2", xavier_uniform(4 * d, K, rng));
  p.b2 = Parameter("gem.b2", Tensor(Shape{K}));
  return p;
}

struct GemVars {
  Var positional, w1, b1, w2, b2;
};

inline GemVars bind(Tape& tape, GemParams& p) {
  return {tape.param(p.positional), tape.param(p.w1), tape.param(p.b1), tape.param(p.w2), tape.param(p.b2)};
}

inline GemVars bind_constant(Tape& tape, const GemParams& p) {
  return {tape.constant(p.positional.value), tape.constant(p.w1.value), tape.constant(p.b1.value),
          tape.constant(p.w2.value), tape.constant(p.b2.value)};
}

// Variable-length histories packed row-wise for one batched forward pass.
struct HistoryBatch {
  std::vector<std::size_t> items;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> offsets{0};

  void add(std::span<const std::size_t> history) {
    if (history.empty()) throw ContractError("history must be non-empty");
    for (std::size_t i = 0; i < history.size(); ++i) {
      items.push_back(history[i]);
      positions.push_back(i);
    }
    offsets.push_back(items.size());
  }

  std::size_t size() const { return offsets.size() - 1; }
  std::size_t length(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
};

// g is (B*K) x d, interest k of sequence s at row s*K + k.
struct GuidanceVars {
  Var g;
  std::optional<Var> attention;  // (sum N) x K, self-attentive only
  std::size_t interests = 0;
};

// Core of the self-attentive extractor: scores from H + P, pooling over H.
inline GuidanceVars attend(Var encoded, Var encoded_with_positions, const GemVars& p,
                           const std::vector<std::size_t>& offsets) {
  const Var hidden = ops::tanh(ops::add_bias(ops::matmul(encoded_with_positions, p.w1), p.b1));
  const Var scores = ops::add_bias(ops::matmul(hidden, p.w2), p.b2);
  const Var attention = ops::segment_softmax(scores, offsets);
  return {ops::segment_weighted_sum(attention, encoded, offsets), attention, p.w2.value().cols()};
}

inline GuidanceVars self_attentive_guidance(Var item_table, const GemVars& p, const HistoryBatch& batch) {
  const Var h = ops::embedding_lookup(item_table, batch.items);
  const Var pos = ops::embedding_lookup(p.positional, batch.positions);
  return attend(h, ops::add(h, pos), p, batch.offsets);
}

// Item ids of the latest K entries of each history; shorter histories are
// front-padded with their earliest item.
inline std::vector<std::size_t> rule_based_rows(const HistoryBatch& batch, std::size_t K) {
  std::vector<std::size_t> ids;
  ids.reserve(batch.size() * K);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const std::size_t begin = batch.offsets[s], n = batch.length(s);
    for (std::size_t k = 0; k < K; ++k) {
      // Position in the history of interest row k: n-K+k, clamped at 0.
      const std::size_t pos = k + n >= K ? k + n - K : 0;
      ids.push_back(batch.items[begin + pos]);
    }
  }
  return ids;
}

inline GuidanceVars rule_based_guidance(Var item_table, const HistoryBatch& batch, std::size_t K) {
  return {ops::embedding_lookup(item_table, rule_based_rows(batch, K)), std::nullopt, K};
}

// Index of the guidance row with the largest inner product with `target`;
// ties go to the lowest index.
inline std::size_t select_index(std::span<const double> guidance, std::size_t K, std::span<const double> target) {
  if (K == 0) throw ContractError("select_guidance: K must be >= 1");
  const std::size_t d = target.size();
  if (guidance.size() != K * d) throw DimensionError("select_guidance: guidance is not K x d");
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < K; ++k) {
    const double s = dot(guidance.subspan(k * d, d), target);
    if (s > best_score) {
      best_score = s;
      best = k;
    }
  }
  return best;
}

// Row indices into the (B*K) x d guidance matrix chosen per batch element.
inline std::vector<std::size_t> select_rows(const Tensor& guidance, std::size_t K, const Tensor& targets) {
  const std::size_t d = guidance.cols();
  std::vector<std::size_t> rows(targets.rows());
  for (std::size_t b = 0; b < targets.rows(); ++b) {
    rows[b] = b * K + select_index(std::span(guidance.data() + b * K * d, K * d), K, targets.row(b));
  }
  return rows;
}

// Mean over the batch of -log(exp(q·e_a) / (exp(q·e_a) + Σ exp(q·e_neg))).
// Candidates for row b are [targets[b], negatives[b]...] looked up in `items`.
inline Var sampled_softmax_loss(Var query, Var items, const std::vector<std::size_t>& targets,
                                const std::vector<std::vector<std::size_t>>& negatives) {
  const std::size_t B = targets.size();
  if (negatives.size() != B) throw DimensionError("sampled_softmax_loss: one negative list per row required");
  if (query.value().rows() != B) throw DimensionError("sampled_softmax_loss: query rows differ from target count");
  const std::size_t m = 1 + (B ? negatives.front().size() : 0);
  if (m < 2) throw ContractError("sampled_softmax_loss: at least one negative required");
  std::vector<std::size_t> cand, rep;
  cand.reserve(B * m);
  rep.reserve(B * m);
  for (std::size_t b = 0; b < B; ++b) {
    if (negatives[b].size() + 1 != m) throw DimensionError("sampled_softmax_loss: ragged negative lists");
    cand.push_back(targets[b]);
    cand.insert(cand.end(), negatives[b].begin(), negatives[b].end());
    rep.insert(rep.end(), m, b);
  }
  const Var logits = ops::reshape(ops::row_dot(ops::gather_rows(query, rep), ops::gather_rows(items, cand)), Shape{B, m});
  return ops::softmax_cross_entropy(logits, std::vector<std::size_t>(B, 0));
}

// ---------------------------------------------------------------------------
// Single-sequence helpers (no gradients). These route through the batched
// code above with a batch of one.

struct GuidanceSequence {
  Tensor g;                              // K x d
  std::optional<Tensor> attention;       // N x K
  std::optional<std::size_t> selected_index;
};

// Row i = item_table[history[i]] + positional[i].
inline Tensor encode_history(std::span<const std::size_t> history, const Tensor& item_table, const Tensor& positional) {
  if (history.size() > positional.rows()) {
    throw DimensionError("encode_history: history of length " + std::to_string(history.size()) + " exceeds max_len " +
                         std::to_string(positional.rows()));
  }
  Tape tape(false);
  HistoryBatch batch;
  batch.add(history);
  const Var h = ops::embedding_lookup(tape.constant(item_table), batch.items);
  const Var pos = ops::embedding_lookup(tape.constant(positional), batch.positions);
  return ops::add(h, pos).value();
}

// encoded: H (N x d); encoded_with_positions: H + P. Attention scores use
// H + P while the pooled interests are Aᵀ H.
inline GuidanceSequence self_attentive_guidance(const Tensor& encoded, const Tensor& encoded_with_positions,
                                                const GemParams& params) {
  if (encoded.rows() == 0) throw ContractError("self_attentive_guidance: empty sequence");
  Tape tape(false);
  const GemVars p = bind_constant(tape, params);
  const auto gv = attend(tape.constant(encoded), tape.constant(encoded_with_positions), p, {0, encoded.rows()});
  return {gv.g.value(), gv.attention->value(), std::nullopt};
}

inline GuidanceSequence rule_based_guidance(std::span<const std::size_t> history, std::size_t K, const Tensor& item_table) {
  Tape tape(false);
  HistoryBatch batch;
  batch.add(history);
  return {rule_based_guidance(tape.constant(item_table), batch, K).g.value(), std::nullopt, std::nullopt};
}

struct Selection {
  std::vector<double> g_u;
  std::size_t index;
};

inline Selection select_guidance(const Tensor& g, std::span<const double> target) {
  const std::size_t K = g.rows();
  if (g.cols() != target.size()) throw DimensionError("select_guidance: dimension mismatch");
  const std::size_t idx = select_index(g.values(), K, target);
  const auto row = g.row(idx);
  return {std::vector<double>(row.begin(), row.end()), idx};
}

// Sampled softmax for one query against one positive and its negatives.
inline double gem_loss(std::span<const double> g_u, std::span<const double> target,
                       const std::vector<std::vector<double>>& negatives) {
  if (negatives.empty()) throw ContractError("gem_loss: at least one negative required");
  const std::size_t d = g_u.size();
  std::vector<double> table(target.begin(), target.end());
  std::vector<std::size_t> neg_ids;
  for (const auto& n : negatives) {
    if (n.size() != d) throw DimensionError("gem_loss: negative dimension mismatch");
    table.insert(table.end(), n.begin(), n.end());
    neg_ids.push_back(neg_ids.size() + 1);
  }
  Tape tape(false);
  const Var q = tape.constant(Tensor(Shape{1, d}, std::vector<double>(g_u.begin(), g_u.end())));
  const Var items = tape.constant(Tensor(Shape{negatives.size() + 1, d}, std::move(table)));
  return sampled_softmax_loss(q, items, {0}, {neg_ids}).value().item();
}

}  // namespace dimerec::gem
