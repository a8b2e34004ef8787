#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dimerec/gem.hpp"

// Diffusion aggregation: the conditional denoiser x̂0 = f(x_t, t, g^u) and its
// reconstruction / sampled-softmax losses.
namespace dimerec::dam {

// Sinusoidal step encoding: [sin(t/10000^(2i/d)), cos(t/10000^(2i/d))]_i.
inline std::vector<double> step_embedding(int t, std::size_t d) {
  if (d % 2 != 0) throw ConfigError("step_embedding: dimension must be even, got " + std::to_string(d));
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double freq = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
    out[2 * i] = std::sin(t / freq);
    out[2 * i + 1] = std::cos(t / freq);
  }
  return out;
}

// MLP (d + d + K*d) -> 4d (tanh) -> 4d (tanh) -> d.
struct DamParams {
  Parameter w1, b1, w2, b2, w3, b3;

  std::size_t dim() const { return w3.value.cols(); }
  std::size_t interests() const { return (w1.value.rows() - 2 * dim()) / dim(); }
};

inline DamParams init_dam_params(std::size_t d, std::size_t K, Rng& rng) {
  const std::size_t in = 2 * d + K * d, hidden = 4 * d;
  DamParams p;
  p.w1 = Parameter("dam.w1", gem::xavier_uniform(in, hidden, rng));
  p.b1 = Parameter("dam.b1", Tensor(Shape{hidden}));
  p.w2 = Parameter("dam.w2", gem::xavier_uniform(hidden, hidden, rng));
  p.b2 = Parameter("dam.b2", Tensor(Shape{hidden}));
  p.w3 = Parameter("dam.w3", gem::xavier_uniform(hidden, d, rng));
  p.b3 = Parameter("dam.b3", Tensor(Shape{d}));
  return p;
}

struct DamVars {
  Var w1, b1, w2, b2, w3, b3;
};

inline DamVars bind(Tape& tape, DamParams& p) {
  return {tape.param(p.w1), tape.param(p.b1), tape.param(p.w2), tape.param(p.b2), tape.param(p.w3), tape.param(p.b3)};
}

inline DamVars bind_constant(Tape& tape, const DamParams& p) {
  return {tape.constant(p.w1.value), tape.constant(p.b1.value), tape.constant(p.w2.value),
          tape.constant(p.b2.value), tape.constant(p.w3.value), tape.constant(p.b3.value)};
}

inline Tensor step_embeddings(const std::vector<int>& steps, std::size_t d) {
  Tensor out(Shape{steps.size(), d});
  for (std::size_t b = 0; b < steps.size(); ++b) {
    const auto e = step_embedding(steps[b], d);
    std::copy(e.begin(), e.end(), out.row(b).begin());
  }
  return out;
}

struct DenoiseVars {
  Var raw;     // B x d
  Var x0_hat;  // raw, L2-normalized when on the sphere
};

// x_t: B x d; guidance: (B*K) x d; steps: one t per row.
inline DenoiseVars denoise(Var x_t, const std::vector<int>& steps, Var guidance, const DamVars& p, bool on_sphere) {
  const std::size_t B = x_t.value().rows(), d = x_t.value().cols();
  if (steps.size() != B) throw DimensionError("denoise: one step per row required");
  if (guidance.value().cols() != d || guidance.value().rows() % B != 0) {
    throw DimensionError("denoise: guidance " + shape_string(guidance.shape()) + " incompatible with x_t " +
                         shape_string(x_t.shape()));
  }
  const std::size_t K = guidance.value().rows() / B;
  Tape& tape = x_t.tape();
  const Var input = ops::concat_cols(
      {x_t, tape.constant(step_embeddings(steps, d)), ops::reshape(guidance, Shape{B, K * d})});
  const Var h1 = ops::tanh(ops::add_bias(ops::matmul(input, p.w1), p.b1));
  const Var h2 = ops::tanh(ops::add_bias(ops::matmul(h1, p.w2), p.b2));
  const Var raw = ops::add_bias(ops::matmul(h2, p.w3), p.b3);
  return {raw, on_sphere ? ops::l2_normalize(raw) : raw};
}

// ‖x0 - x̂0‖² averaged over rows.
inline Var recon_loss(Var x0_hat, Var x0) { return ops::mean_squared_distance(x0, x0_hat); }

// Sampled softmax with x̂0 as the query against raw item embeddings.
inline Var ssm_loss(Var x0_hat, Var items, const std::vector<std::size_t>& targets,
                    const std::vector<std::vector<std::size_t>>& negatives) {
  return gem::sampled_softmax_loss(x0_hat, items, targets, negatives);
}

inline double total_loss(double gem, double recon, double ssm, double lambda, double mu) {
  if (lambda < 0.0 || mu < 0.0) throw ConfigError("total_loss: coefficients must be non-negative");
  return gem + lambda * recon + mu * ssm;
}

// ---------------------------------------------------------------------------
// Single-sample helpers.

struct DenoiserOutput {
  std::vector<double> x0_hat;
  std::vector<double> raw;
};

inline DenoiserOutput denoise(std::span<const double> x_t, int t, const Tensor& guidance, const DamParams& params,
                              bool on_sphere = true) {
  Tape tape(false);
  const DamVars p = bind_constant(tape, params);
  const Var x = tape.constant(Tensor(Shape{1, x_t.size()}, std::vector<double>(x_t.begin(), x_t.end())));
  const Var g = tape.constant(guidance.reshaped(Shape{guidance.size() / x_t.size(), x_t.size()}));
  const auto out = denoise(x, {t}, g, p, on_sphere);
  const auto r = out.raw.value().values();
  const auto h = out.x0_hat.value().values();
  return {std::vector<double>(h.begin(), h.end()), std::vector<double>(r.begin(), r.end())};
}

inline double recon_loss(std::span<const double> x0_hat, std::span<const double> x0) {
  if (x0_hat.size() != x0.size()) throw DimensionError("recon_loss: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) s += (x0[i] - x0_hat[i]) * (x0[i] - x0_hat[i]);
  return s;
}

inline double ssm_loss(std::span<const double> x0_hat, std::span<const double> target,
                       const std::vector<std::vector<double>>& negatives) {
  return gem::gem_loss(x0_hat, target, negatives);
}

}  // namespace dimerec::dam
