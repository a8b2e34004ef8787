// Trains a small model on synthetic clustered sessions and prints test metrics
// for diffusion retrieval and for the guidance vectors alone.

#include <iostream>

#include "dimerec/dimerec.hpp"

using namespace dimerec;

int main() {
  synth::SyntheticSpec spec;
  spec.users = 1500;
  spec.items = 400;
  spec.min_length = 8;
  spec.max_length = 20;
  const auto synthetic = synth::make_synthetic(spec);

  train::Dataset data;
  data.item_count = synthetic.item_count;
  data.sequences = synthetic.sequences;
  data.split = data::split_users(data.sequences.size(), {0.8, 0.1, 0.1}, 42);

  TrainConfig config;
  config.d = 32;
  config.batch = 128;
  config.max_len = 10;
  config.epochs = 8;

  train::FitOptions options;
  options.keep_steps = false;
  options.on_epoch = [](const train::EpochRecord& e) {
    std::cout << "epoch " << e.epoch << "  gem " << e.gem << "  recon " << e.recon << "  ssm " << e.ssm;
    if (e.valid_recall) std::cout << "  valid R@20 " << *e.valid_recall;
    std::cout << '\n';
  };
  const auto fit = train::fit(data, config, options);

  const auto schedule = diffusion::build_schedule(config.schedule_spec());
  const auto cases = data::make_eval_cases(data.sequences, data.split.test_users, config.max_len);
  auto eval_options = train::eval_options_for(config);
  for (Retrieval r : {Retrieval::diffusion, Retrieval::gem}) {
    eval_options.retrieval = r;
    const auto res = eval::evaluate(fit.params, schedule, cases, eval_options);
    std::cout << to_string(r) << ":";
    for (const auto& [n, v] : res.metrics.recall) std::cout << "  R@" << n << " " << v;
    for (const auto& [n, v] : res.metrics.ndcg) std::cout << "  N@" << n << " " << v;
    std::cout << '\n';
  }
  return 0;
}
