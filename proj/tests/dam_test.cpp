#include <gtest/gtest.h>

#include <cmath>

#include "support/oracles.hpp"

using namespace dimerec;

namespace {

dam::DamParams zero_dam(std::size_t d, std::size_t K) {
  const std::size_t in = 2 * d + K * d, h = 4 * d;
  dam::DamParams p;
  p.w1 = Parameter("dam.w1", Tensor(Shape{in, h}));
  p.b1 = Parameter("dam.b1", Tensor(Shape{h}));
  p.w2 = Parameter("dam.w2", Tensor(Shape{h, h}));
  p.b2 = Parameter("dam.b2", Tensor(Shape{h}));
  p.w3 = Parameter("dam.w3", Tensor(Shape{h, d}));
  p.b3 = Parameter("dam.b3", Tensor(Shape{d}));
  return p;
}

std::vector<double> affine(const std::vector<double>& x, const Tensor& w, const Tensor& b, bool squash) {
  std::vector<double> y(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w(i, j);
    y[j] = squash ? std::tanh(s) : s;
  }
  return y;
}

}  // namespace

TEST(StepEmbedding, ZeroStepAlternates) {
  const auto e = dam::step_embedding(0, 8);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(e[i], i % 2 == 0 ? 0.0 : 1.0);
}

TEST(StepEmbedding, DirectEvaluation) {
  const auto e = dam::step_embedding(1, 4);
  EXPECT_DOUBLE_EQ(e[0], std::sin(1.0));
  EXPECT_DOUBLE_EQ(e[1], std::cos(1.0));
  EXPECT_NEAR(e[2], std::sin(1e-2), 1e-16);
  EXPECT_NEAR(e[3], std::cos(1e-2), 1e-16);
  EXPECT_EQ(dam::step_embedding(7, 16), dam::step_embedding(7, 16));
  EXPECT_THROW(dam::step_embedding(1, 5), ConfigError);
}

TEST(Denoise, ZeroWeightsGiveNormalizedBias) {
  auto p = zero_dam(2, 1);
  p.b3.value = Tensor::vector({3.0, 4.0});
  const auto out = dam::denoise(std::vector<double>{0.1, 0.2}, 5, Tensor::matrix({{1, 1}}), p);
  EXPECT_DOUBLE_EQ(out.raw[0], 3.0);
  EXPECT_DOUBLE_EQ(out.raw[1], 4.0);
  EXPECT_NEAR(out.x0_hat[0], 0.6, 1e-15);
  EXPECT_NEAR(out.x0_hat[1], 0.8, 1e-15);
  const auto euclid = dam::denoise(std::vector<double>{0.1, 0.2}, 5, Tensor::matrix({{1, 1}}), p, false);
  EXPECT_EQ(euclid.x0_hat, euclid.raw);
}

TEST(Denoise, ZeroedInputBlockIgnoresXt) {
  Rng rng(1);
  auto p = dam::init_dam_params(4, 2, rng);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < p.w1.value.cols(); ++j) p.w1.value(i, j) = 0.0;
  const auto g = oracle::random_tensor(Shape{2, 4}, rng);
  const auto a = dam::denoise(oracle::random_tensor(Shape{4}, rng).values(), 3, g, p);
  const auto b = dam::denoise(oracle::random_tensor(Shape{4}, rng).values(), 3, g, p);
  EXPECT_EQ(a.raw, b.raw);
}

TEST(Denoise, MatchesScriptedForward) {
  Rng rng(2);
  auto p = dam::init_dam_params(2, 1, rng);
  p.b1.value = oracle::random_tensor(Shape{8}, rng, 0.5);
  p.b2.value = oracle::random_tensor(Shape{8}, rng, 0.5);
  p.b3.value = oracle::random_tensor(Shape{2}, rng, 0.5);
  const std::vector<double> x{0.6, -0.8};
  const Tensor g = Tensor::matrix({{0.25, 1.5}});
  const int t = 7;
  std::vector<double> in{x[0], x[1], std::sin(7.0), std::cos(7.0), 0.25, 1.5};
  const auto raw = affine(affine(affine(in, p.w1.value, p.b1.value, true), p.w2.value, p.b2.value, true), p.w3.value,
                          p.b3.value, false);
  const double n = std::hypot(raw[0], raw[1]);
  const auto out = dam::denoise(x, t, g, p);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(out.raw[i], raw[i], 1e-12);
    EXPECT_NEAR(out.x0_hat[i], raw[i] / n, 1e-12);
  }
}

TEST(Denoise, UnitNormAndDeterministic) {
  Rng rng(3);
  auto p = dam::init_dam_params(8, 4, rng);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = oracle::random_tensor(Shape{8}, rng);
    const auto g = oracle::random_tensor(Shape{4, 8}, rng);
    const auto a = dam::denoise(x.values(), 1 + trial % 20, g, p);
    EXPECT_NEAR(norm(a.x0_hat), 1.0, 1e-9);
    EXPECT_EQ(a.x0_hat, dam::denoise(x.values(), 1 + trial % 20, g, p).x0_hat);
  }
}

TEST(Denoise, ShapeErrors) {
  Rng rng(4);
  auto p = dam::init_dam_params(4, 2, rng);
  Tape tape(false);
  const auto vars = dam::bind_constant(tape, p);
  const Var x = tape.constant(Tensor(Shape{3, 4}));
  EXPECT_THROW(dam::denoise(x, {1, 2}, tape.constant(Tensor(Shape{6, 4})), vars, true), DimensionError);
  EXPECT_THROW(dam::denoise(x, {1, 2, 3}, tape.constant(Tensor(Shape{5, 4})), vars, true), DimensionError);
  EXPECT_THROW(dam::denoise(x, {1, 2, 3}, tape.constant(Tensor(Shape{6, 3})), vars, true), DimensionError);
}

TEST(ReconLoss, SphereExamples) {
  const std::vector<double> a{1, 0}, b{-1, 0}, c{0, 1};
  EXPECT_EQ(dam::recon_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(dam::recon_loss(a, b), 4.0);
  EXPECT_DOUBLE_EQ(dam::recon_loss(a, c), 2.0);
}

TEST(ReconLoss, ChordIdentityOnRandomPairs) {
  Rng rng(5);
  Tape tape(false);
  for (int trial = 0; trial < 200; ++trial) {
    auto u = oracle::random_tensor(Shape{1, 16}, rng), v = oracle::random_tensor(Shape{1, 16}, rng);
    const auto un = ops::l2_normalize(tape.constant(u)).value(), vn = ops::l2_normalize(tape.constant(v)).value();
    const double l = dam::recon_loss(ops::l2_normalize(tape.constant(u)), ops::l2_normalize(tape.constant(v))).value().item();
    EXPECT_NEAR(l, 2.0 - 2.0 * dot(un.values(), vn.values()), 1e-12);
  }
}

TEST(SsmLoss, Examples) {
  const std::vector<double> q{0.6, 0.8}, e{1.0, 2.0};
  EXPECT_NEAR(dam::ssm_loss(q, e, {e}), std::log(2.0), 1e-15);
  EXPECT_LT(dam::ssm_loss(q, std::vector<double>{60.0, 80.0}, {{0.0, 0.0}}), 1e-30);
  // Shared softmax oracle on a fixed 2-d instance.
  const std::vector<std::vector<double>> negs{{0.5, -1.0}, {-2.0, 0.25}};
  const double lp = 0.6 * 1.0 + 0.8 * 2.0, l1 = 0.6 * 0.5 - 0.8, l2 = -1.2 + 0.2;
  const double want = -lp + std::log(std::exp(lp) + std::exp(l1) + std::exp(l2));
  EXPECT_NEAR(dam::ssm_loss(q, e, negs), want, 1e-14);
  EXPECT_EQ(dam::ssm_loss(q, e, negs), gem::gem_loss(q, e, negs));
}

TEST(SsmLoss, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto items = oracle::random_tensor(Shape{7, 5}, rng);
    const auto r = oracle::check_op(
        [&](Tape& t, std::vector<Var>& in) {
          const Var x0 = ops::l2_normalize(in[0]);
          return dam::ssm_loss(x0, t.constant(items), {0, 3}, {{1, 2, 4}, {5, 6, 1}});
        },
        {oracle::random_tensor(Shape{2, 5}, rng)}, rng);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(TotalLoss, Arithmetic) {
  EXPECT_DOUBLE_EQ(dam::total_loss(1.0, 2.0, 3.0, 0.0, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(dam::total_loss(1.0, 2.0, 3.0, 0.1, 10.0), 31.2);
  EXPECT_THROW(dam::total_loss(1.0, 2.0, 3.0, -0.1, 1.0), ConfigError);
  // Linear in each component.
  const double base = dam::total_loss(1.0, 2.0, 3.0, 0.1, 1.0);
  EXPECT_NEAR(dam::total_loss(1.0, 3.0, 3.0, 0.1, 1.0) - base, 0.1, 1e-15);
  EXPECT_NEAR(dam::total_loss(1.0, 2.0, 4.0, 0.1, 1.0) - base, 1.0, 1e-15);
}

TEST(TotalLoss, DefaultCoefficients) {
  TrainConfig c;
  EXPECT_EQ(c.lambda, 0.1);
  EXPECT_EQ(c.mu, 1.0);
}
