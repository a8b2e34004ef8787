#include <gtest/gtest.h>

#include <cmath>

#include "support/oracles.hpp"

using namespace dimerec;

namespace {

gem::GemParams zero_params(std::size_t d, std::size_t K, std::size_t max_len) {
  gem::GemParams p;
  p.positional = Parameter("gem.positional", Tensor(Shape{max_len, d}));
  p.w1 = Parameter("gem.w1", Tensor(Shape{d, 4 * d}));
  p.b1 = Parameter("gem.b1", Tensor(Shape{4 * d}));
  p.w2 = Parameter("gem.w2", Tensor(Shape{4 * d, K}));
  p.b2 = Parameter("gem.b2", Tensor(Shape{K}));
  return p;
}

// Plain loops: scores = tanh((H+P) W1 + b1) W2 + b2, softmax down each
// column, g = Aᵀ H.
Tensor scripted_guidance(const Tensor& H, const Tensor& HP, const gem::GemParams& p) {
  const std::size_t N = H.rows(), d = H.cols(), hid = p.w1.value.cols(), K = p.w2.value.cols();
  std::vector<std::vector<double>> scores(N, std::vector<double>(K));
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> h(hid);
    for (std::size_t j = 0; j < hid; ++j) {
      double s = p.b1.value[j];
      for (std::size_t i = 0; i < d; ++i) s += HP(n, i) * p.w1.value(i, j);
      h[j] = std::tanh(s);
    }
    for (std::size_t k = 0; k < K; ++k) {
      double s = p.b2.value[k];
      for (std::size_t j = 0; j < hid; ++j) s += h[j] * p.w2.value(j, k);
      scores[n][k] = s;
    }
  }
  Tensor g(Shape{K, d});
  for (std::size_t k = 0; k < K; ++k) {
    double z = 0.0;
    for (std::size_t n = 0; n < N; ++n) z += std::exp(scores[n][k]);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < d; ++i) g(k, i) += std::exp(scores[n][k]) / z * H(n, i);
  }
  return g;
}

}  // namespace

TEST(EncodeHistory, ZeroPositionalGivesRawRows) {
  const Tensor items = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  const auto out = gem::encode_history(std::vector<std::size_t>{2, 0}, items, Tensor(Shape{4, 2}));
  EXPECT_EQ(out, Tensor::matrix({{5, 6}, {1, 2}}));
  EXPECT_EQ(gem::encode_history(std::vector<std::size_t>{1}, items, Tensor(Shape{4, 2})).rows(), 1u);
}

TEST(EncodeHistory, HandSums) {
  const Tensor items = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  const Tensor pos = Tensor::matrix({{0.1, 0.2}, {0.3, 0.4}, {0.5, 0.6}});
  const auto out = gem::encode_history(std::vector<std::size_t>{1, 1, 0}, items, pos);
  const Tensor expect = Tensor::matrix({{3.1, 4.2}, {3.3, 4.4}, {1.5, 2.6}});
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out[i], expect[i], 1e-15);
}

TEST(EncodeHistory, Errors) {
  const Tensor items = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_THROW(gem::encode_history(std::vector<std::size_t>{5}, items, Tensor(Shape{4, 2})), DimensionError);
  EXPECT_THROW(gem::encode_history(std::vector<std::size_t>{0, 1, 0}, items, Tensor(Shape{2, 2})), DimensionError);
}

TEST(SelfAttentive, SingleItemCopiesIt) {
  Rng rng(1);
  auto p = gem::init_gem_params(3, 4, 5, rng);
  const Tensor H = Tensor::matrix({{0.5, -1.0, 2.0}});
  const auto g = gem::self_attentive_guidance(H, H, p);
  ASSERT_EQ(g.g.rows(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_DOUBLE_EQ((*g.attention)(0, k), 1.0);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g.g(k, i), H(0, i));
  }
}

TEST(SelfAttentive, ZeroOutputLayerAveragesRows) {
  Rng rng(2);
  auto p = zero_params(2, 3, 4);
  p.w1.value = oracle::random_tensor(Shape{2, 8}, rng);
  const Tensor H = Tensor::matrix({{1, 2}, {3, 4}, {5, 9}});
  const auto g = gem::self_attentive_guidance(H, H, p);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(g.g(k, 0), 3.0, 1e-14);
    EXPECT_NEAR(g.g(k, 1), 5.0, 1e-14);
  }
}

TEST(SelfAttentive, MatchesScriptedCalculation) {
  Rng rng(3);
  auto p = gem::init_gem_params(2, 2, 3, rng);
  p.b1.value = oracle::random_tensor(Shape{8}, rng, 0.3);
  p.b2.value = oracle::random_tensor(Shape{2}, rng, 0.3);
  const Tensor items = oracle::random_tensor(Shape{5, 2}, rng);
  const std::vector<std::size_t> history{4, 0, 2};
  Tensor H(Shape{3, 2});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 2; ++i) H(n, i) = items(history[n], i);
  const auto HP = gem::encode_history(history, items, p.positional.value);
  const auto got = gem::self_attentive_guidance(H, HP, p);
  const auto want = scripted_guidance(H, HP, p);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.g[i], want[i], 1e-13);
}

TEST(SelfAttentive, AttentionColumnsAreDistributions) {
  Rng rng(4);
  auto p = gem::init_gem_params(8, 4, 20, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto H = oracle::random_tensor(Shape{1 + static_cast<std::size_t>(trial % 20), 8}, rng, 3.0);
    const auto A = *gem::self_attentive_guidance(H, H, p).attention;
    for (std::size_t k = 0; k < 4; ++k) {
      double s = 0.0;
      for (std::size_t n = 0; n < A.rows(); ++n) {
        EXPECT_GE(A(n, k), 0.0);
        s += A(n, k);
      }
      EXPECT_NEAR(s, 1.0, 1e-10);
    }
  }
}

TEST(SelfAttentive, BatchedMatchesPerSequence) {
  Rng rng(5);
  auto p = gem::init_gem_params(4, 3, 6, rng);
  Parameter items("item_embedding", oracle::random_tensor(Shape{10, 4}, rng));
  const std::vector<std::vector<std::size_t>> hs{{1, 2, 3}, {9}, {0, 5, 5, 7, 8, 2}};
  Tape tape(false);
  gem::HistoryBatch batch;
  for (const auto& h : hs) batch.add(h);
  const auto gv = gem::self_attentive_guidance(tape.constant(items.value), gem::bind_constant(tape, p), batch);
  for (std::size_t s = 0; s < hs.size(); ++s) {
    Tensor H(Shape{hs[s].size(), 4});
    for (std::size_t n = 0; n < hs[s].size(); ++n)
      for (std::size_t i = 0; i < 4; ++i) H(n, i) = items.value(hs[s][n], i);
    const auto want = scripted_guidance(H, gem::encode_history(hs[s], items.value, p.positional.value), p);
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(gv.g.value()(s * 3 + k, i), want(k, i), 1e-13);
  }
}

TEST(RuleBased, LastKInOrder) {
  Rng rng(6);
  const auto items = oracle::random_tensor(Shape{12, 3}, rng);
  std::vector<std::size_t> h{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto g = gem::rule_based_guidance(h, 4, items).g;
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(g(k, i), items(6 + k, i));
}

TEST(RuleBased, ShortHistoryPadsWithEarliest) {
  const Tensor items = Tensor::matrix({{1, 1}, {2, 2}, {3, 3}});
  const auto g = gem::rule_based_guidance(std::vector<std::size_t>{2, 0}, 4, items).g;
  EXPECT_EQ(g, Tensor::matrix({{3, 3}, {3, 3}, {3, 3}, {1, 1}}));
}

TEST(RuleBased, MatchesSliceOracle) {
  Rng rng(7);
  const auto items = oracle::random_tensor(Shape{30, 2}, rng);
  std::uniform_int_distribution<std::size_t> id(0, 29), len(1, 15), kk(1, 6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> h(len(rng));
    for (auto& v : h) v = id(rng);
    const std::size_t K = kk(rng);
    std::vector<std::size_t> slice;
    if (h.size() >= K) {
      slice.assign(h.end() - static_cast<std::ptrdiff_t>(K), h.end());
    } else {
      slice.assign(K - h.size(), h.front());
      slice.insert(slice.end(), h.begin(), h.end());
    }
    const auto g = gem::rule_based_guidance(h, K, items).g;
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t i = 0; i < 2; ++i) ASSERT_EQ(g(k, i), items(slice[k], i));
  }
  EXPECT_THROW(gem::rule_based_guidance(std::vector<std::size_t>{}, 2, items), ContractError);
}

TEST(Select, SingleRowAndTies) {
  const std::vector<double> target{0.3, -0.2};
  EXPECT_EQ(gem::select_guidance(Tensor::matrix({{5, 5}}), target).index, 0u);
  EXPECT_EQ(gem::select_guidance(Tensor::matrix({{1, 0}, {1, 0}}), target).index, 0u);
  const auto s = gem::select_guidance(Tensor::matrix({{0, 1}, {1, 0}, {1, 0}}), target);
  EXPECT_EQ(s.index, 1u);
  EXPECT_EQ(s.g_u, (std::vector<double>{1, 0}));
}

TEST(Select, BruteForceAndScaleInvariance) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const auto g = oracle::random_tensor(Shape{4, 5}, rng);
    const auto e = oracle::random_tensor(Shape{5}, rng);
    std::size_t best = 0;
    double bs = -1e300;
    for (std::size_t k = 0; k < 4; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < 5; ++i) s += g(k, i) * e[i];
      if (s > bs) {
        bs = s;
        best = k;
      }
    }
    EXPECT_EQ(gem::select_guidance(g, e.values()).index, best);
    std::vector<double> scaled(e.values().begin(), e.values().end());
    for (double& v : scaled) v *= 7.5;
    EXPECT_EQ(gem::select_guidance(g, scaled).index, best);
  }
}

TEST(GemLoss, SymmetricNegativeIsLn2) {
  const std::vector<double> g{0.4, -1.3}, e{2.0, 0.5};
  EXPECT_NEAR(gem::gem_loss(g, e, {e}), std::log(2.0), 1e-15);
}

TEST(GemLoss, DominantPositiveGoesToZero) {
  const std::vector<double> g{1.0, 0.0};
  EXPECT_LT(gem::gem_loss(g, std::vector<double>{50.0, 0.0}, {{0.0, 1.0}, {-1.0, 0.0}}), 1e-20);
}

// Direct evaluation: logits 1, 0, -1 give -log(e / (e + 1 + 1/e)).
TEST(GemLoss, DirectEvaluation) {
  const std::vector<double> g{1.0, 0.0}, pos{1.0, 0.0};
  const double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0 + std::exp(-1.0)));
  EXPECT_NEAR(want, 0.407606, 1e-6);
  EXPECT_NEAR(gem::gem_loss(g, pos, {{0.0, 1.0}, {-1.0, 0.0}}), want, 1e-14);
}

TEST(GemLoss, StrictlyDecreasingInPositiveLogit) {
  const std::vector<double> g{1.0, 0.5};
  const std::vector<std::vector<double>> negs{{0.2, 0.1}, {-0.3, 0.9}};
  double prev = 1e300;
  for (double a = -3.0; a <= 3.0; a += 0.25) {
    const double l = gem::gem_loss(g, std::vector<double>{a, 0.0}, negs);
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(GemLoss, Errors) {
  const std::vector<double> g{1.0, 0.0};
  EXPECT_THROW(gem::gem_loss(g, g, {}), ContractError);
  EXPECT_THROW(gem::gem_loss(g, std::vector<double>{std::nan(""), 0.0}, {{0.0, 1.0}}), NumericError);
}

TEST(GemLoss, BatchMeanMatchesPerRow) {
  Rng rng(9);
  const auto items = oracle::random_tensor(Shape{6, 3}, rng);
  const auto q = oracle::random_tensor(Shape{2, 3}, rng);
  const std::vector<std::size_t> targets{1, 4};
  const std::vector<std::vector<std::size_t>> negs{{0, 2}, {5, 3}};
  Tape tape(false);
  const double batch = gem::sampled_softmax_loss(tape.constant(q), tape.constant(items), targets, negs).value().item();
  double mean = 0.0;
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<std::vector<double>> ne;
    for (auto n : negs[b]) ne.emplace_back(items.row(n).begin(), items.row(n).end());
    mean += gem::gem_loss(q.row(b), items.row(targets[b]), ne) / 2.0;
  }
  EXPECT_NEAR(batch, mean, 1e-14);
}

TEST(GemLoss, OnlySelectedInterestReceivesGradient) {
  Rng rng(10);
  Parameter g("g", oracle::random_tensor(Shape{4, 3}, rng));
  const auto items = oracle::random_tensor(Shape{5, 3}, rng);
  Tape tape;
  const Var gv = tape.param(g);
  const auto rows = gem::select_rows(g.value, 4, Tensor(Shape{1, 3}, std::vector<double>(items.row(2).begin(), items.row(2).end())));
  const Var loss = gem::sampled_softmax_loss(ops::gather_rows(gv, rows), tape.constant(items), {2}, {{0, 1}});
  tape.backward(loss);
  for (std::size_t k = 0; k < 4; ++k) {
    double s = 0.0;
    for (double v : g.grad.row(k)) s += std::abs(v);
    if (k == rows[0]) {
      EXPECT_GT(s, 0.0);
    } else {
      EXPECT_EQ(s, 0.0);
    }
  }
}
