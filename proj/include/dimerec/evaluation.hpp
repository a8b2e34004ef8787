#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dimerec/datapipe.hpp"
#include "dimerec/inference.hpp"

namespace dimerec::eval {

using data::ItemId;

// Fraction of the target set found in the first n recommendations. HR in
// the reported tables is this per-user recall, averaged over users.
inline double recall_at_n(std::span<const ItemId> recommended, std::span<const ItemId> targets, std::size_t n) {
  if (n > recommended.size()) throw ContractError("recall_at_n: n exceeds the recommendation list");
  if (targets.empty()) throw ContractError("recall_at_n: empty target set");
  std::set<ItemId> t(targets.begin(), targets.end());
  std::size_t hits = 0;
  std::set<ItemId> seen;
  for (std::size_t r = 0; r < n; ++r) {
    if (t.count(recommended[r]) && seen.insert(recommended[r]).second) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(t.size());
}

// Binary-gain NDCG with the 1/log2(rank+1) discount.
inline double ndcg_at_n(std::span<const ItemId> recommended, std::span<const ItemId> targets, std::size_t n) {
  if (n > recommended.size()) throw ContractError("ndcg_at_n: n exceeds the recommendation list");
  if (targets.empty()) throw ContractError("ndcg_at_n: empty target set");
  std::set<ItemId> t(targets.begin(), targets.end());
  std::set<ItemId> seen;
  double dcg = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (t.count(recommended[r]) && seen.insert(recommended[r]).second) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  }
  double idcg = 0.0;
  for (std::size_t r = 0; r < std::min(n, t.size()); ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

struct MetricSummary {
  std::map<std::size_t, double> recall;  // keyed by N
  std::map<std::size_t, double> ndcg;
};

struct UserRow {
  data::UserId user;
  std::vector<ItemId> recommended;
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> ndcg;
};

struct EvalResult {
  MetricSummary metrics;
  std::vector<UserRow> users;
  std::size_t skipped_users = 0;
};

struct EvalOptions {
  std::vector<std::size_t> at{10, 20, 50};
  int steps = 0;  // 0: full schedule
  std::uint64_t seed = 7;
  Retrieval retrieval = Retrieval::diffusion;
  diffusion::ReverseNoise noise = diffusion::ReverseNoise::stddev;
  std::size_t batch = 256;
  bool keep_user_rows = true;
  bool output_on_sphere = true;  // denoiser output normalisation of the model
  // If > max(at), also keeps this many recommendations per user (diversity).
  std::size_t keep_top = 0;
};

inline MetricSummary score_lists(const std::vector<std::vector<ItemId>>& lists, std::span<const data::EvalCase> cases,
                                 const std::vector<std::size_t>& at, std::vector<UserRow>* rows = nullptr) {
  MetricSummary s;
  for (std::size_t n : at) s.recall[n] = s.ndcg[n] = 0.0;
  std::size_t counted = 0;
  for (std::size_t u = 0; u < cases.size(); ++u) {
    if (cases[u].targets.empty()) continue;
    ++counted;
    UserRow row{cases[u].user, lists[u], {}, {}};
    for (std::size_t n : at) {
      const std::size_t cut = std::min(n, lists[u].size());
      const double r = recall_at_n(lists[u], cases[u].targets, cut);
      const double g = ndcg_at_n(lists[u], cases[u].targets, cut);
      s.recall[n] += r;
      s.ndcg[n] += g;
      row.recall[n] = r;
      row.ndcg[n] = g;
    }
    if (rows) rows->push_back(std::move(row));
  }
  if (counted) {
    for (std::size_t n : at) {
      s.recall[n] /= static_cast<double>(counted);
      s.ndcg[n] /= static_cast<double>(counted);
    }
  }
  return s;
}

// Top-n lists (history excluded) for every eval case.
inline std::vector<std::vector<ItemId>> recommend_lists(const ModelParams& params, const diffusion::NoiseSchedule& schedule,
                                                        std::span<const data::EvalCase> cases, std::size_t n,
                                                        const EvalOptions& options) {
  const inference::RetrievalIndex index(params.item_embedding.value);
  std::vector<std::vector<ItemId>> lists(cases.size());
  Rng rng = derive_rng(options.seed, 0xe7a1);
  for (std::size_t start = 0; start < cases.size(); start += options.batch) {
    const std::size_t end = std::min(cases.size(), start + options.batch);
    std::vector<std::vector<ItemId>> histories;
    for (std::size_t u = start; u < end; ++u) histories.push_back(cases[u].history);
    Tensor queries;
    if (options.retrieval == Retrieval::diffusion) {
      queries = inference::generate(histories, params, schedule, rng, {options.steps, options.noise, false},
                                    options.output_on_sphere).e_u;
    }
    for (std::size_t u = start; u < end; ++u) {
      std::vector<double> scores;
      if (options.retrieval == Retrieval::diffusion) {
        scores = index.scores(queries.row(u - start));
      } else {
        scores = inference::max_scores(index, inference::guidance_for(cases[u].history, params));
      }
      const std::size_t avail = std::min(n, scores.size() - data::interacted_set(cases[u].history).size());
      for (const auto& s : inference::recommend_from_scores(scores, cases[u].history, avail)) lists[u].push_back(s.item);
    }
  }
  return lists;
}

inline EvalResult evaluate(const ModelParams& params, const diffusion::NoiseSchedule& schedule,
                           std::span<const data::EvalCase> cases, const EvalOptions& options = {}) {
  if (options.at.empty()) throw ConfigError("evaluate: no cutoffs given");
  const std::size_t n = std::max(*std::max_element(options.at.begin(), options.at.end()), options.keep_top);
  EvalResult res;
  std::vector<data::EvalCase> usable;
  for (const auto& c : cases) {
    if (c.targets.empty()) {
      ++res.skipped_users;
    } else {
      usable.push_back(c);
    }
  }
  const auto lists = recommend_lists(params, schedule, usable, n, options);
  res.metrics = score_lists(lists, usable, options.at, options.keep_user_rows ? &res.users : nullptr);
  return res;
}

// HR@n of every intermediate reverse-process state: element k is computed
// from the embedding after k+1 denoising steps.
inline std::vector<double> intermediate_recall(const ModelParams& params, const diffusion::NoiseSchedule& schedule,
                                               std::span<const data::EvalCase> cases, std::size_t n,
                                               const EvalOptions& options) {
  const inference::RetrievalIndex index(params.item_embedding.value);
  Rng rng = derive_rng(options.seed, 0x57e9);
  std::vector<double> totals;
  std::size_t counted = 0;
  for (std::size_t start = 0; start < cases.size(); start += options.batch) {
    const std::size_t end = std::min(cases.size(), start + options.batch);
    std::vector<std::vector<ItemId>> histories;
    for (std::size_t u = start; u < end; ++u) histories.push_back(cases[u].history);
    const auto gen = inference::generate(histories, params, schedule, rng, {options.steps, options.noise, true},
                                           options.output_on_sphere);
    totals.resize(gen.trajectory.size(), 0.0);
    for (std::size_t u = start; u < end; ++u) {
      if (cases[u].targets.empty()) continue;
      ++counted;
      for (std::size_t k = 0; k < gen.trajectory.size(); ++k) {
        const auto ranked = inference::recommend_from_scores(index.scores(gen.trajectory[k].row(u - start)), cases[u].history, n);
        std::vector<ItemId> ids;
        for (const auto& s : ranked) ids.push_back(s.item);
        totals[k] += recall_at_n(ids, cases[u].targets, n);
      }
    }
  }
  for (double& t : totals) t /= static_cast<double>(std::max<std::size_t>(counted, 1));
  return totals;
}

// ---------------------------------------------------------------------------
// Representation probes.

// item -> category labels (first label is the primary one).
using CategoryTable = std::vector<std::vector<std::string>>;

struct DiversityResult {
  double mean_categories = 0.0;
  std::size_t users = 0;
  std::size_t unlabeled_items = 0;  // skipped occurrences
  std::size_t short_lists = 0;      // users with fewer than `depth` items
};

// Average number of distinct categories among each user's top `depth` items.
inline DiversityResult category_diversity(const std::vector<std::vector<ItemId>>& lists, const CategoryTable& table,
                                          std::size_t depth = 100) {
  DiversityResult r;
  double total = 0.0;
  for (const auto& list : lists) {
    if (list.size() < depth) ++r.short_lists;
    std::set<std::string> cats;
    for (std::size_t i = 0; i < std::min(depth, list.size()); ++i) {
      const ItemId it = list[i];
      if (it >= table.size() || table[it].empty()) {
        ++r.unlabeled_items;
        continue;
      }
      cats.insert(table[it].begin(), table[it].end());
    }
    total += static_cast<double>(cats.size());
    ++r.users;
  }
  r.mean_categories = r.users ? total / static_cast<double>(r.users) : 0.0;
  return r;
}

struct ProbeOptions {
  int epochs = 200;
  double lr = 0.1;
  double train_fraction = 0.8;
  std::uint64_t seed = 11;
};

struct ProbeResult {
  double accuracy = 0.0;
  std::size_t classes = 0;
  std::size_t train_items = 0;
  std::size_t test_items = 0;
  std::size_t unlabeled_items = 0;
  bool degenerate = false;  // single class
};

// Linear probe on frozen embeddings: one softmax layer trained by full-batch
// gradient descent on 80% of the labelled items, top-1 accuracy on the rest.
// Multi-label items use their first label.
inline ProbeResult linear_probe(const Tensor& embeddings, const CategoryTable& labels, const ProbeOptions& options = {}) {
  ProbeResult res;
  std::vector<std::size_t> items;
  std::map<std::string, std::size_t> class_ids;
  std::vector<std::size_t> item_class(embeddings.rows(), 0);
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    if (i >= labels.size() || labels[i].empty()) {
      ++res.unlabeled_items;
      continue;
    }
    auto [it, _] = class_ids.try_emplace(labels[i].front(), class_ids.size());
    item_class[i] = it->second;
    items.push_back(i);
  }
  res.classes = class_ids.size();
  if (items.size() < 2) throw DatasetError("linear_probe: need at least two labelled items");
  Rng rng = derive_rng(options.seed, 0x9b0be);
  std::shuffle(items.begin(), items.end(), rng);
  const std::size_t n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(options.train_fraction * static_cast<double>(items.size()))), 1, items.size() - 1);
  const std::vector<std::size_t> train(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_train));
  const std::vector<std::size_t> test(items.begin() + static_cast<std::ptrdiff_t>(n_train), items.end());
  res.train_items = train.size();
  res.test_items = test.size();
  if (res.classes < 2) {
    res.degenerate = true;
    res.accuracy = 1.0;
    return res;
  }
  const std::size_t d = embeddings.cols(), C = res.classes;
  Parameter w("probe.w", Tensor(Shape{d, C}));
  Parameter b("probe.b", Tensor(Shape{C}));
  std::vector<std::size_t> train_labels;
  for (std::size_t i : train) train_labels.push_back(item_class[i]);
  Tape data_tape(false);
  const Tensor x_train = ops::gather_rows(data_tape.constant(embeddings), train).value();
  for (int e = 0; e < options.epochs; ++e) {
    w.zero_grad();
    b.zero_grad();
    Tape tape;
    const Var logits = ops::add_bias(ops::matmul(tape.constant(x_train), tape.param(w)), tape.param(b));
    tape.backward(ops::softmax_cross_entropy(logits, train_labels));
    for (std::size_t i = 0; i < w.value.size(); ++i) w.value[i] -= options.lr * w.grad[i];
    for (std::size_t i = 0; i < b.value.size(); ++i) b.value[i] -= options.lr * b.grad[i];
  }
  std::size_t correct = 0;
  for (std::size_t i : test) {
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      double s = b.value[c];
      for (std::size_t j = 0; j < d; ++j) s += embeddings(i, j) * w.value(j, c);
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    if (best == item_class[i]) ++correct;
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  return res;
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, xs.size() > 1 ? std::sqrt(v / static_cast<double>(xs.size() - 1)) : 0.0};
}

}  // namespace dimerec::eval
