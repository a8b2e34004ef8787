#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <vector>

#include "dimerec/evaluation.hpp"
#include "dimerec/model.hpp"

namespace dimerec::train {

using data::ItemId;
using data::SequenceSample;

// Random inputs of one training step, drawn up front so a step is a pure
// function of (params, batch, draw).
struct NoiseDraw {
  std::vector<int> steps;  // t_b ~ Uniform{1..T}
  Tensor eps;              // B x d standard Gaussian
};

inline NoiseDraw draw_noise(std::size_t batch, std::size_t d, int T, Rng& rng) {
  NoiseDraw draw;
  std::uniform_int_distribution<int> step(1, T);
  draw.steps.resize(batch);
  for (int& t : draw.steps) t = step(rng);
  draw.eps = Tensor(Shape{batch, d}, standard_normal(rng, batch * d));
  return draw;
}

struct LossTerms {
  double gem = 0.0;
  double recon = 0.0;
  double ssm = 0.0;
  double total = 0.0;  // weighted sum of the enabled terms only
  // max over the batch of |‖x0 - x̂0‖² - (2 - 2 cos(x̂0, x0))|
  double identity_gap = 0.0;
};

inline std::string describe(const LossTerms& t) {
  std::ostringstream os;
  os << "L_gem=" << t.gem << " L_recon=" << t.recon << " L_ssm=" << t.ssm << " total=" << t.total;
  return os.str();
}

struct Forward {
  std::optional<Var> total;  // empty when every loss is disabled
  LossTerms terms;
};

// Builds the three losses for one batch on `tape`. All three are evaluated
// for monitoring; only the enabled ones enter the total (and so receive
// gradients).
inline Forward forward_losses(Tape& tape, ModelParams& params, std::span<const SequenceSample> batch,
                              const TrainConfig& config, const diffusion::NoiseSchedule& schedule,
                              const NoiseDraw& draw) {
  const std::size_t B = batch.size(), d = params.dim(), K = params.interests();
  if (B == 0) throw ContractError("train_step: empty batch");
  if (draw.steps.size() != B || draw.eps.rows() != B || draw.eps.cols() != d) {
    throw DimensionError("train_step: noise draw does not match the batch");
  }
  const BoundModel model = bind(tape, params);

  gem::HistoryBatch histories;
  std::vector<std::size_t> targets;
  std::vector<std::vector<std::size_t>> negatives;
  for (const auto& s : batch) {
    histories.add(model_window(params, s.history));
    targets.push_back(s.target);
    negatives.push_back(s.negatives);
  }

  // GEM: guidance, hard routing to the best-matching interest, sampled softmax.
  const gem::GuidanceVars gv = guidance(model, histories);
  const Var target_emb = ops::embedding_lookup(model.items, targets);
  const Var g_u = ops::gather_rows(gv.g, gem::select_rows(gv.g.value(), K, target_emb.value()));
  Forward out;
  // Ops reject non-finite inputs; report which term failed and the terms so far.
  auto term = [&](const char* name, auto&& f) -> Var {
    try {
      return f();
    } catch (const NumericError& e) {
      throw NumericError(std::string("non-finite ") + name + " (" + e.what() + "); " + describe(out.terms));
    }
  };
  const Var l_gem = term("L_gem", [&] { return gem::sampled_softmax_loss(g_u, model.items, targets, negatives); });
  out.terms.gem = l_gem.value().item();

  // DAM: noise the target, reconstruct it, score the reconstruction.
  const Var eps = tape.constant(draw.eps);
  Var x0, x_t;
  if (config.flags.use_grw) {
    x0 = ops::l2_normalize(target_emb);
    const Var tangent = ops::sub(eps, ops::mul_rows(x0, ops::row_dot(x0, eps)));
    std::vector<double> sigma(B);
    for (std::size_t b = 0; b < B; ++b) sigma[b] = std::sqrt(schedule.one_minus_alpha_bar(draw.steps[b]));
    x_t = diffusion::exp_map_rows(x0, ops::scale_rows(tangent, std::move(sigma)));
  } else {
    x0 = target_emb;
    std::vector<double> signal(B), noise(B);
    for (std::size_t b = 0; b < B; ++b) {
      signal[b] = std::sqrt(schedule.alpha_bar(draw.steps[b]));
      noise[b] = std::sqrt(schedule.one_minus_alpha_bar(draw.steps[b]));
    }
    x_t = ops::add(ops::scale_rows(target_emb, std::move(signal)), ops::scale_rows(eps, std::move(noise)));
  }
  const dam::DenoiseVars den = dam::denoise(x_t, draw.steps, gv.g, model.dam, config.output_on_sphere());
  const Var l_recon = term("L_recon", [&] { return dam::recon_loss(den.x0_hat, x0); });
  out.terms.recon = l_recon.value().item();
  const Var l_ssm = term("L_ssm", [&] { return dam::ssm_loss(den.x0_hat, model.items, targets, negatives); });

  out.terms.ssm = l_ssm.value().item();
  const Tensor& xh = den.x0_hat.value();
  const Tensor& xv = x0.value();
  for (std::size_t b = 0; b < B; ++b) {
    double sq = 0.0;
    for (std::size_t i = 0; i < d; ++i) sq += (xv(b, i) - xh(b, i)) * (xv(b, i) - xh(b, i));
    const double cos = dot(xh.row(b), xv.row(b)) / (norm(xh.row(b)) * norm(xv.row(b)));
    out.terms.identity_gap = std::max(out.terms.identity_gap, std::abs(sq - (2.0 - 2.0 * cos)));
  }

  auto accumulate = [&](Var term) { out.total = out.total ? ops::add(*out.total, term) : term; };
  if (config.flags.use_gem_loss) accumulate(l_gem);
  if (config.flags.use_recon_loss) accumulate(ops::scale(l_recon, config.lambda));
  if (config.flags.use_ssm_loss) accumulate(ops::scale(l_ssm, config.mu));
  out.terms.total = out.total ? out.total->value().item() : 0.0;
  return out;
}

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  explicit Adam(const TrainConfig& c) : Adam(c.lr, c.adam_beta1, c.adam_beta2, c.adam_eps) {}

  void step(const std::vector<Parameter*>& params) {
    if (m_.empty()) {
      for (const Parameter* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
    if (m_.size() != params.size()) throw ContractError("Adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = *params[k];
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

  long steps() const { return t_; }
  double lr() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

inline double global_grad_norm(const std::vector<Parameter*>& params) {
  double s = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->grad.values()) s += g * g;
  }
  return std::sqrt(s);
}

struct StepResult {
  LossTerms terms;
  double grad_norm = 0.0;
  bool clipped = false;
};


// One optimisation step: forward, backward, global-norm clipping, Adam.
inline StepResult train_step(std::span<const SequenceSample> batch, ModelParams& params, const TrainConfig& config,
                             const diffusion::NoiseSchedule& schedule, Adam& optimizer, Rng& rng) {
  const NoiseDraw draw = draw_noise(batch.size(), params.dim(), schedule.steps(), rng);
  params.zero_grad();
  Tape tape;
  const Forward fwd = forward_losses(tape, params, batch, config, schedule, draw);
  StepResult res{fwd.terms, 0.0, false};
  const auto& t = fwd.terms;
  if (!std::isfinite(t.gem) || !std::isfinite(t.recon) || !std::isfinite(t.ssm) || !std::isfinite(t.total)) {
    throw NumericError("non-finite loss: " + describe(t));
  }
  if (!fwd.total) return res;
  tape.backward(*fwd.total);
  const auto ps = params.parameters();
  res.grad_norm = global_grad_norm(ps);
  if (!std::isfinite(res.grad_norm)) throw NumericError("non-finite gradient: " + describe(t));
  if (res.grad_norm > config.clip_norm) {
    const double s = config.clip_norm / res.grad_norm;
    for (Parameter* p : ps) {
      for (double& g : p->grad.values()) g *= s;
    }
    res.clipped = true;
  }
  optimizer.step(ps);
  return res;
}

// A prepared dataset: dense sequences plus the user split.
struct Dataset {
  std::size_t item_count = 0;
  std::vector<std::vector<ItemId>> sequences;
  data::DatasetSplit split;
  std::string vocab_hash;
};

struct StepRecord {
  std::size_t step = 0;
  int epoch = 0;
  LossTerms terms;
  double grad_norm = 0.0;
  bool clipped = false;
  double lr = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double gem = 0.0, recon = 0.0, ssm = 0.0, total = 0.0;  // means over the epoch's steps
  double max_identity_gap = 0.0;
  std::optional<double> valid_recall;  // Recall@20 on the validation users
  std::size_t clipped_steps = 0;
  double seconds = 0.0;
};

struct FitOptions {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
  bool validate = true;
  bool keep_steps = true;
  std::size_t valid_at = 20;
};

struct FitResult {
  ModelParams params;  // best validation checkpoint (last epoch without validation)
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  std::optional<double> best_valid_recall;
  bool early_stopped = false;
  std::size_t skipped_users = 0;
};

inline constexpr double kDivergenceThreshold = 1e6;

inline eval::EvalOptions eval_options_for(const TrainConfig& config) {
  eval::EvalOptions o;
  o.retrieval = config.retrieval;
  o.noise = config.reverse_noise;
  o.output_on_sphere = config.output_on_sphere();
  return o;
}

// Epoch loop over the train users' sliding samples with per-epoch negative
// resampling, validation Recall@20 after each epoch, and early stopping.
inline FitResult fit(const Dataset& dataset, const TrainConfig& config, const FitOptions& options = {}) {
  config.validate();
  const auto schedule = diffusion::build_schedule(config.schedule_spec());
  Rng init_rng = derive_rng(config.seed, 1);
  ModelParams params = init_model(config, dataset.item_count, init_rng);
  Adam optimizer(config);

  FitResult result;
  auto samples = data::make_training_samples(dataset.sequences, dataset.split.train_users, config.max_len,
                                             &result.skipped_users);
  if (samples.empty()) throw DatasetError("fit: no training samples");
  std::vector<std::vector<ItemId>> exclusion(dataset.sequences.size());
  for (data::UserId u : dataset.split.train_users) exclusion[u] = data::interacted_set(dataset.sequences[u]);
  const auto valid_cases = data::make_eval_cases(dataset.sequences, dataset.split.valid_users, config.max_len);
  const bool validate = options.validate && !valid_cases.empty();

  auto eval_opts = eval_options_for(config);
  eval_opts.at = {options.valid_at};
  eval_opts.keep_user_rows = false;
  eval_opts.seed = config.seed;

  std::size_t global_step = 0;
  int since_best = 0;
  result.params = params;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    Rng rng = derive_rng(config.seed, 100 + static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t n_steps = 0;
    std::vector<SequenceSample> batch;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch); ++i) {
        SequenceSample s = samples[order[i]];
        s.negatives = data::sample_negatives(exclusion[s.user], dataset.item_count, config.negatives, rng);
        batch.push_back(std::move(s));
      }
      const StepResult step = train_step(batch, params, config, schedule, optimizer, rng);
      if (step.terms.total > kDivergenceThreshold) {
        throw NumericError("training diverged at step " + std::to_string(global_step) + ": " + describe(step.terms));
      }
      ++global_step;
      ++n_steps;
      rec.gem += step.terms.gem;
      rec.recon += step.terms.recon;
      rec.ssm += step.terms.ssm;
      rec.total += step.terms.total;
      rec.max_identity_gap = std::max(rec.max_identity_gap, step.terms.identity_gap);
      rec.clipped_steps += step.clipped;
      StepRecord sr{global_step, epoch, step.terms, step.grad_norm, step.clipped, config.lr};
      if (options.on_step) options.on_step(sr);
      if (options.keep_steps) result.steps.push_back(sr);
    }
    const double n = static_cast<double>(std::max<std::size_t>(n_steps, 1));
    rec.gem /= n;
    rec.recon /= n;
    rec.ssm /= n;
    rec.total /= n;
    bool improved = true;
    if (validate) {
      const auto res = eval::evaluate(params, schedule, valid_cases, eval_opts);
      rec.valid_recall = res.metrics.recall.at(options.valid_at);
      improved = !result.best_valid_recall || *rec.valid_recall > *result.best_valid_recall;
    }
    if (improved) {
      result.params = params;
      result.best_epoch = epoch;
      result.best_valid_recall = rec.valid_recall;
      since_best = 0;
    } else {
      ++since_best;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (options.on_epoch) options.on_epoch(rec);
    result.epochs.push_back(rec);
    if (validate && since_best >= config.patience) {
      result.early_stopped = true;
      break;
    }
  }
  if (!validate) result.params = params;
  return result;
}

}  // namespace dimerec::train
