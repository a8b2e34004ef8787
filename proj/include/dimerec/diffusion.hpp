#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dimerec/error.hpp"
#include "dimerec/numerics/ops.hpp"
#include "dimerec/rng.hpp"

namespace dimerec::diffusion {

enum class ScheduleKind { linear };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::linear:
      return "linear";
  }
  return "linear";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  throw ConfigError("unknown schedule kind '" + s + "'");
}

// What gets written into checkpoints; enough to rebuild the schedule.
struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::linear;
  int steps = 20;
  double beta_start = 0.005;
  double beta_end = 0.999;

  friend bool operator==(const ScheduleSpec&, const ScheduleSpec&) = default;
};

// Beta bounds of the default linear schedule: the 1000-step DDPM endpoints
// (1e-4, 0.02) rescaled by 1000/T and capped at 0.999.
inline ScheduleSpec default_schedule_spec(int steps) {
  if (steps < 1) throw ConfigError("diffusion steps must be >= 1");
  const double scale = 1000.0 / steps;
  return ScheduleSpec{ScheduleKind::linear, steps, std::min(1e-4 * scale, 0.999), std::min(0.02 * scale, 0.999)};
}

// Variance schedule indexed by t in [1, T]; alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  // Arbitrary betas in [0, 1). Zero betas are accepted for degenerate tests.
  static NoiseSchedule from_betas(std::vector<double> betas, ScheduleSpec spec = {}) {
    if (betas.empty()) throw ConfigError("noise schedule needs at least one step");
    for (double b : betas) {
      if (!(b >= 0.0 && b < 1.0)) throw ConfigError("beta outside [0, 1): " + std::to_string(b));
    }
    NoiseSchedule s;
    s.spec_ = spec;
    s.spec_.steps = static_cast<int>(betas.size());
    const std::size_t T = betas.size();
    s.beta_.assign(T + 1, 0.0);
    s.alpha_bar_.assign(T + 1, 1.0);
    s.one_minus_alpha_bar_.assign(T + 1, 0.0);
    s.beta_tilde_.assign(T + 1, 0.0);
    for (std::size_t t = 1; t <= T; ++t) {
      s.beta_[t] = betas[t - 1];
      s.alpha_bar_[t] = s.alpha_bar_[t - 1] * (1.0 - betas[t - 1]);
      // 1 - ᾱ_t accumulated directly so that 1 - ᾱ_1 == β_1 bit for bit.
      s.one_minus_alpha_bar_[t] = s.one_minus_alpha_bar_[t - 1] + s.alpha_bar_[t - 1] * betas[t - 1];
      const double denom = s.one_minus_alpha_bar_[t];
      s.beta_tilde_[t] = denom > 0.0 ? s.one_minus_alpha_bar_[t - 1] / denom * betas[t - 1] : 0.0;
    }
    return s;
  }

  int steps() const { return spec_.steps; }
  const ScheduleSpec& spec() const { return spec_; }

  double beta(int t) const { return beta_.at(check(t, 1)); }
  double alpha_bar(int t) const { return alpha_bar_.at(check(t, 0)); }
  double one_minus_alpha_bar(int t) const { return one_minus_alpha_bar_.at(check(t, 0)); }
  double beta_tilde(int t) const { return beta_tilde_.at(check(t, 1)); }

  std::span<const double> betas() const { return std::span(beta_).subspan(1); }
  std::span<const double> alpha_bars() const { return std::span(alpha_bar_).subspan(1); }
  std::span<const double> beta_tildes() const { return std::span(beta_tilde_).subspan(1); }

  // Coefficients (on x_t, on x0) of the posterior mean μ̃_t.
  std::pair<double, double> posterior_coefficients(int t) const {
    check(t, 1);
    const double denom = one_minus_alpha_bar_[t];
    if (denom == 0.0) return {1.0, 0.0};
    return {std::sqrt(1.0 - beta_[t]) * one_minus_alpha_bar_[t - 1] / denom,
            std::sqrt(alpha_bar_[t - 1]) * beta_[t] / denom};
  }

 private:
  std::size_t check(int t, int lo) const {
    if (t < lo || t > spec_.steps) {
      throw DimensionError("diffusion step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                           std::to_string(spec_.steps) + "]");
    }
    return static_cast<std::size_t>(t);
  }

  ScheduleSpec spec_;
  std::vector<double> beta_, alpha_bar_, one_minus_alpha_bar_, beta_tilde_;
};

inline NoiseSchedule build_schedule(ScheduleKind kind, int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("diffusion steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("invalid beta bounds: need 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) +
                      ", " + std::to_string(beta_end));
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
    betas[static_cast<std::size_t>(t)] = beta_start + frac * (beta_end - beta_start);
  }
  return NoiseSchedule::from_betas(std::move(betas), ScheduleSpec{kind, steps, beta_start, beta_end});
}

inline NoiseSchedule build_schedule(const ScheduleSpec& spec) {
  return build_schedule(spec.kind, spec.steps, spec.beta_start, spec.beta_end);
}

using Vec = std::vector<double>;

// x_t = √ᾱ_t x0 + √(1-ᾱ_t) ε
inline Vec euclidean_forward(std::span<const double> x0, int t, const NoiseSchedule& schedule,
                             std::span<const double> eps) {
  if (x0.size() != eps.size()) throw DimensionError("euclidean_forward: noise dimension differs from x0");
  const double a = std::sqrt(schedule.alpha_bar(t));
  const double b = std::sqrt(schedule.one_minus_alpha_bar(t));
  Vec out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

inline constexpr double kUnitTolerance = 1e-9;
inline constexpr double kTangentTolerance = 1e-6;
inline constexpr double kZeroTangent = 1e-12;

// Sphere exponential map exp_x[v] = cos(‖v‖) x + sin(‖v‖) v/‖v‖.
inline Vec exp_map(std::span<const double> x, std::span<const double> v) {
  if (x.size() != v.size()) throw DimensionError("exp_map: dimension mismatch");
  const double xn = norm(x);
  if (std::abs(xn - 1.0) > kUnitTolerance) throw ContractError("exp_map: base point is not unit norm (" + std::to_string(xn) + ")");
  if (std::abs(dot(x, v)) > kTangentTolerance) throw ContractError("exp_map: v is not tangent at x");
  const double n = norm(v);
  if (n < kZeroTangent) return Vec(x.begin(), x.end());
  const double c = std::cos(n), s = std::sin(n) / n;
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = c * x[i] + s * v[i];
  return out;
}

// Removes the component of eps along the unit vector x.
inline Vec project_tangent(std::span<const double> x, std::span<const double> eps) {
  const double along = dot(eps, x);
  Vec out(eps.begin(), eps.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= along * x[i];
  return out;
}

inline Vec normalized(std::span<const double> x) {
  const double n = norm(x);
  if (!(n >= ops::kMinNormalizeNorm)) throw DegenerateInputError("cannot normalize a vector of norm " + std::to_string(n));
  Vec out(x.begin(), x.end());
  for (double& v : out) v /= n;
  return out;
}

struct NoisedState {
  Vec x_t;
  int t = 0;
  bool on_sphere = false;
};

// Geodesic random walk noising with a caller-supplied ambient Gaussian draw.
inline NoisedState grw_forward_with_noise(std::span<const double> x0_raw, int t, const NoiseSchedule& schedule,
                                          std::span<const double> eps) {
  if (x0_raw.size() != eps.size()) throw DimensionError("grw_forward: noise dimension differs from x0");
  const Vec x0 = normalized(x0_raw);
  Vec v = project_tangent(x0, eps);
  const double sigma = std::sqrt(schedule.one_minus_alpha_bar(t));
  for (double& e : v) e *= sigma;
  return NoisedState{exp_map(x0, v), t, true};
}

inline NoisedState grw_forward(std::span<const double> x0_raw, int t, const NoiseSchedule& schedule, Rng& rng) {
  const Vec eps = standard_normal(rng, x0_raw.size());
  return grw_forward_with_noise(x0_raw, t, schedule, eps);
}

// μ̃_t(x_t, x0)
inline Vec posterior_mean(std::span<const double> x_t, std::span<const double> x0, int t, const NoiseSchedule& schedule) {
  if (x_t.size() != x0.size()) throw DimensionError("posterior_mean: dimension mismatch");
  const auto [cx, c0] = schedule.posterior_coefficients(t);
  Vec out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = cx * x_t[i] + c0 * x0[i];
  return out;
}

// How β̃_t scales the reverse-step Gaussian: as a variance (noise scaled by
// √β̃_t) or literally (noise scaled by β̃_t).
enum class ReverseNoise { stddev, variance };

inline ReverseNoise reverse_noise_from_string(const std::string& s) {
  if (s == "stddev") return ReverseNoise::stddev;
  if (s == "variance") return ReverseNoise::variance;
  throw ConfigError("reverse.noise_scale must be 'stddev' or 'variance', got '" + s + "'");
}

inline std::string to_string(ReverseNoise r) { return r == ReverseNoise::stddev ? "stddev" : "variance"; }

inline double reverse_noise_scale(const NoiseSchedule& schedule, int t, ReverseNoise mode) {
  const double bt = schedule.beta_tilde(t);
  return mode == ReverseNoise::stddev ? std::sqrt(bt) : bt;
}

inline Vec reverse_step_with_noise(std::span<const double> x_t, std::span<const double> x0_hat, int t,
                                   const NoiseSchedule& schedule, std::span<const double> eps, bool spherical,
                                   ReverseNoise mode = ReverseNoise::stddev) {
  if (t < 1) throw DimensionError("reverse_step: t must be >= 1");
  Vec out = posterior_mean(x_t, x0_hat, t, schedule);
  const double s = reverse_noise_scale(schedule, t, mode);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * eps[i];
  return spherical ? normalized(out) : out;
}

// One ancestral step x_t -> x_{t-1}. One Gaussian vector is drawn per call,
// including t = 1 where β̃_1 = 0 makes the step deterministic.
inline Vec reverse_step(std::span<const double> x_t, std::span<const double> x0_hat, int t,
                        const NoiseSchedule& schedule, Rng& rng, bool spherical,
                        ReverseNoise mode = ReverseNoise::stddev) {
  const Vec eps = standard_normal(rng, x_t.size());
  return reverse_step_with_noise(x_t, x0_hat, t, schedule, eps, spherical, mode);
}

// Differentiable, row-batched exp map for the training tape. Rows of x must
// be unit norm and rows of v tangent at them.
inline Var exp_map_rows(Var x, Var v) {
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  if (xv.shape() != vv.shape()) {
    throw DimensionError("exp_map_rows: shape mismatch " + shape_string(xv.shape()) + " vs " + shape_string(vv.shape()));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out = xv;
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    norms[r] = norm(vv.row(r));
    if (norms[r] < kZeroTangent) continue;
    const double c = std::cos(norms[r]), s = std::sin(norms[r]) / norms[r];
    for (std::size_t i = 0; i < cols; ++i) out(r, i) = c * xv(r, i) + s * vv(r, i);
  }
  return x.tape().record(std::move(out), {x.id(), v.id()}, [norms, rows, cols](const Tensor& g, GradContext& ctx) {
    const Tensor& xv = ctx.input_value(0);
    const Tensor& vv = ctx.input_value(1);
    Tensor* gx = ctx.input_grad(0);
    Tensor* gv = ctx.input_grad(1);
    for (std::size_t r = 0; r < rows; ++r) {
      const double n = norms[r];
      const auto gr = g.row(r);
      if (n < kZeroTangent) {
        for (std::size_t i = 0; i < cols; ++i) {
          if (gx) (*gx)(r, i) += gr[i];
          if (gv) (*gv)(r, i) += gr[i];
        }
        continue;
      }
      const double c = std::cos(n), sn = std::sin(n);
      const double s = sn / n;
      const double ds = (n * c - sn) / (n * n);
      const double gxdot = dot(gr, xv.row(r));
      const double gvdot = dot(gr, vv.row(r));
      for (std::size_t i = 0; i < cols; ++i) {
        if (gx) (*gx)(r, i) += c * gr[i];
        if (gv) (*gv)(r, i) += -sn * gxdot * vv(r, i) / n + s * gr[i] + ds * gvdot * vv(r, i) / n;
      }
    }
  });
}

}  // namespace dimerec::diffusion
