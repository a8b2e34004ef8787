#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dimerec/config.hpp"
#include "dimerec/dam.hpp"
#include "dimerec/datapipe.hpp"
#include "dimerec/diffusion.hpp"
#include "dimerec/gem.hpp"

namespace dimerec {

// Every trainable tensor of a DimeRec model. The item table is shared by
// history encoding, the diffusion target, and both softmax heads.
struct ModelParams {
  Parameter item_embedding;       // |I| x d
  std::optional<gem::GemParams> gem;  // absent for the rule-based extractor
  dam::DamParams dam;

  std::size_t dim() const { return item_embedding.value.cols(); }
  std::size_t item_count() const { return item_embedding.value.rows(); }
  std::size_t interests() const { return dam.interests(); }
  GemKind gem_kind() const { return gem ? GemKind::self_attentive : GemKind::rule_based; }
  std::size_t max_len() const { return gem ? gem->max_len() : 0; }

  // Stable order used by checkpoints and the optimizer.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&item_embedding};
    if (gem) {
      for (Parameter* p : {&gem->positional, &gem->w1, &gem->b1, &gem->w2, &gem->b2}) out.push_back(p);
    }
    for (Parameter* p : {&dam.w1, &dam.b1, &dam.w2, &dam.b2, &dam.w3, &dam.b3}) out.push_back(p);
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<ModelParams*>(this)->parameters()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }
};

// Item and positional tables ~ N(0, 1/d) (std 1/√d); dense layers Xavier
// uniform; biases zero.
inline ModelParams init_model(const TrainConfig& config, std::size_t item_count, Rng& rng) {
  if (item_count == 0) throw ConfigError("init_model: empty item vocabulary");
  ModelParams m;
  m.item_embedding = Parameter("item_embedding", gem::gaussian(Shape{item_count, config.d},
                                                               1.0 / std::sqrt(static_cast<double>(config.d)), rng));
  if (config.gem_kind == GemKind::self_attentive) m.gem = gem::init_gem_params(config.d, config.K, config.max_len, rng);
  m.dam = dam::init_dam_params(config.d, config.K, rng);
  return m;
}

struct BoundModel {
  Var items;
  std::optional<gem::GemVars> gem;
  dam::DamVars dam;
  std::size_t interests = 0;
};

inline BoundModel bind(Tape& tape, ModelParams& m) {
  BoundModel b{tape.param(m.item_embedding), std::nullopt, dam::bind(tape, m.dam), m.interests()};
  if (m.gem) b.gem = gem::bind(tape, *m.gem);
  return b;
}

inline BoundModel bind_constant(Tape& tape, const ModelParams& m) {
  BoundModel b{tape.constant(m.item_embedding.value), std::nullopt, dam::bind_constant(tape, m.dam), m.interests()};
  if (m.gem) b.gem = gem::bind_constant(tape, *m.gem);
  return b;
}

inline gem::GuidanceVars guidance(const BoundModel& m, const gem::HistoryBatch& batch) {
  if (m.gem) return gem::self_attentive_guidance(m.items, *m.gem, batch);
  return gem::rule_based_guidance(m.items, batch, m.interests);
}

// Truncates to the latest max_len items (self-attentive extractor only).
inline std::span<const std::size_t> model_window(const ModelParams& m, std::span<const std::size_t> history) {
  const std::size_t cap = m.max_len();
  if (cap && history.size() > cap) return history.subspan(history.size() - cap);
  return history;
}

}  // namespace dimerec
