// dimerec: command-line front end (synth, prepare, train, eval, recommend,
// probe, sweep).
//
// Exit codes: 0 ok, 2 input/config error, 3 checkpoint or dataset mismatch,
// 4 numeric failure, 1 anything else.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dimerec/dimerec.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dimerec;

namespace {

enum Exit { kOk = 0, kFailure = 1, kInput = 2, kMismatch = 3, kNumeric = 4 };

// ---------------------------------------------------------------------------
// Run directories.

fs::path output_root() {
  const char* env = std::getenv("DIMEREC_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  localtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

// <root>/<stamp>-<command>, suffixed until unused; `explicit_dir` wins.
fs::path make_run_dir(const std::string& command, const std::string& explicit_dir) {
  fs::path dir;
  if (!explicit_dir.empty()) {
    dir = explicit_dir;
  } else {
    const fs::path base = output_root() / (timestamp() + "-" + command);
    dir = base;
    for (int n = 2; fs::exists(dir); ++n) dir = base.string() + "-" + std::to_string(n);
  }
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// FNV-1a, continued from `h`.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string checkpoint_hash(const fs::path& dir) {
  std::uint64_t h = 1469598103934665603ull;
  for (const char* name : {ckpt::kManifestName, ckpt::kPayloadName}) {
    std::ifstream in(dir / name, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), {});
    h = fnv1a(bytes, h);
  }
  return data::hash_hex(h);
}

std::vector<std::size_t> parse_cutoffs(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("--at: expected positive integers, got '" + tok + "'");
    }
  }
  if (out.empty()) throw ConfigError("--at: no cutoffs given");
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

json metrics_json(const eval::MetricSummary& m) {
  json j = json::object();
  for (const auto& [n, v] : m.recall) j["recall@" + std::to_string(n)] = v;
  for (const auto& [n, v] : m.ndcg) j["ndcg@" + std::to_string(n)] = v;
  return j;
}

// ---------------------------------------------------------------------------
// Training configuration from file + flags.

struct TrainFlags {
  std::string config_file;
  std::string data;
  std::string variant;
  std::map<std::string, bool> flag_values;  // filled from the bool flags actually given
  std::vector<std::string> sets;            // key=value overrides
  bool full = false;
  // Typed shortcuts for the common keys.
  std::optional<std::size_t> d, K, batch, negatives, max_len;
  std::optional<double> lr, lambda, mu;
  std::optional<int> T, epochs, patience;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> gem_kind, retrieval, noise_scale;
};

struct BoolFlag {
  const char* option;
  const char* key;
  bool value = false;
  CLI::Option* handle = nullptr;
};

struct TrainFlagSet {
  TrainFlags flags;
  bool max_len_set = false;  // otherwise the dataset's recorded window is used
  std::vector<BoolFlag> bools{{"--use-gem-loss", "use_gem_loss"},
                              {"--use-recon-loss", "use_recon_loss"},
                              {"--use-ssm-loss", "use_ssm_loss"},
                              {"--use-grw", "use_grw"}};

  void attach(CLI::App* app) {
    auto& f = flags;
    app->add_option("--config", f.config_file, "Key-value config file (flags override it)");
    app->add_option("--data", f.data, "Prepared dataset directory");
    app->add_option("--variant", f.variant, "Ablation preset")->check(CLI::IsMember({"full", "v1", "v2", "v3", "v4"}));
    for (auto& b : bools) {
      b.handle = app->add_flag(std::string(b.option), b.value, std::string("Set ") + b.key + " (accepts =true/=false)");
    }
    app->add_option("--set", f.sets, "Extra key=value override (repeatable)");
    app->add_flag("--full", f.full, "Full-scale recipe: long epoch budget, stop on validation");
    app->add_option("--d", f.d, "Embedding dimension");
    app->add_option("--K", f.K, "Number of interests");
    app->add_option("--batch", f.batch, "Batch size");
    app->add_option("--negatives", f.negatives, "Sampled negatives per target");
    app->add_option("--max-len", f.max_len, "History window");
    app->add_option("--lr", f.lr, "Adam learning rate");
    app->add_option("--lambda", f.lambda, "Reconstruction loss weight");
    app->add_option("--mu", f.mu, "Diffusion softmax loss weight");
    app->add_option("--T", f.T, "Diffusion steps");
    app->add_option("--epochs", f.epochs, "Maximum epochs");
    app->add_option("--patience", f.patience, "Early-stopping patience");
    app->add_option("--seed", f.seed, "Random seed");
    app->add_option("--gem-kind", f.gem_kind, "self_attentive | rule_based");
    app->add_option("--retrieval", f.retrieval, "diffusion | gem");
    app->add_option("--noise-scale", f.noise_scale, "Reverse-step noise: stddev | variance");
  }

  // File, then typed flags, then --set, then variant/flag resolution.
  std::pair<TrainConfig, std::string> resolve() {
    auto& f = flags;
    for (auto& b : bools) {
      if (b.handle->count()) f.flag_values[b.key] = b.value;
    }
    KeyValues kv;
    if (!f.config_file.empty()) kv = load_key_values(f.config_file);
    for (const auto& s : f.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      kv[s.substr(0, eq)] = s.substr(eq + 1);
    }
    std::string data = f.data;
    if (data.empty() && kv.count("data")) data = kv.at("data");
    std::optional<std::string> variant;
    if (!f.variant.empty()) variant = f.variant;
    else if (kv.count("variant")) variant = kv.at("variant");
    // Flags named in the file take part in the conflict check like CLI flags.
    std::map<std::string, bool> explicit_flags;
    for (const char* k : {"use_gem_loss", "use_recon_loss", "use_ssm_loss", "use_grw"}) {
      if (kv.count(k)) {
        explicit_flags[k] = detail::parse_bool(k, kv.at(k));
        if (variant) kv.erase(k);
      }
    }
    for (const auto& [k, v] : f.flag_values) explicit_flags[k] = v;

    max_len_set = f.max_len.has_value() || kv.count("max_len") > 0;
    TrainConfig c = config_from_key_values(kv, {"data", "variant"});
    if (f.full) {
      c.epochs = 1000;
      c.patience = 5;
    }
    if (f.d) c.d = *f.d;
    if (f.K) c.K = *f.K;
    if (f.batch) c.batch = *f.batch;
    if (f.negatives) c.negatives = *f.negatives;
    if (f.max_len) c.max_len = *f.max_len;
    if (f.lr) c.lr = *f.lr;
    if (f.lambda) c.lambda = *f.lambda;
    if (f.mu) c.mu = *f.mu;
    if (f.T) c.T = *f.T;
    if (f.epochs) c.epochs = *f.epochs;
    if (f.patience) c.patience = *f.patience;
    if (f.seed) c.seed = *f.seed;
    if (f.gem_kind) c.gem_kind = gem_kind_from_string(*f.gem_kind);
    if (f.retrieval) c.retrieval = retrieval_from_string(*f.retrieval);
    if (f.noise_scale) c.reverse_noise = diffusion::reverse_noise_from_string(*f.noise_scale);
    c.flags = resolve_flags(c.flags, variant, explicit_flags);
    c.validate();
    return {c, data};
  }
};

void adopt_dataset_window(TrainConfig& c, const store::PreparedDataset& data, bool max_len_set) {
  if (!max_len_set && data.manifest.contains("max_len")) {
    c.max_len = data.manifest.at("max_len").get<std::size_t>();
    c.validate();
  }
}

store::PreparedDataset load_data(const std::string& dir) {
  if (dir.empty()) throw ConfigError("no dataset given (--data or `data` in the config file)");
  return store::load_prepared(dir);
}

// Loads a checkpoint and checks it against the dataset it will be used with.
ckpt::Checkpoint load_for(const std::string& checkpoint, const store::PreparedDataset& data, bool allow_mismatch) {
  auto ck = ckpt::load_checkpoint(checkpoint, data.dataset.vocab_hash);
  if (ck.params.item_count() != data.dataset.item_count) {
    throw StateMismatchError("checkpoint has " + std::to_string(ck.params.item_count()) + " items, dataset has " +
                             std::to_string(data.dataset.item_count));
  }
  for (const auto& w : ck.warnings) {
    if (!allow_mismatch) throw StateMismatchError(w + " (pass --allow-vocab-mismatch to continue)");
    std::cerr << "warning: " << w << '\n';
  }
  return ck;
}

std::vector<data::EvalCase> cases_for(const store::PreparedDataset& data, const std::string& split, std::size_t max_len,
                                      std::size_t* dropped = nullptr) {
  const auto& s = data.dataset.split;
  if (split == "test") return data::make_eval_cases(data.dataset.sequences, s.test_users, max_len, dropped);
  if (split == "valid") return data::make_eval_cases(data.dataset.sequences, s.valid_users, max_len, dropped);
  throw ConfigError("--split must be test or valid");
}

// ---------------------------------------------------------------------------
// Commands.

struct TrainOutcome {
  train::FitResult fit;
  json summary;
};

TrainOutcome run_training(const store::PreparedDataset& data, const std::string& data_dir, const TrainConfig& config,
                          const fs::path& dir, bool quiet) {
  KeyValues resolved = to_key_values(config);
  resolved["data"] = fs::absolute(data_dir).string();
  {
    std::ofstream out(dir / "config.toml");
    out << format_key_values(resolved);
  }
  std::ofstream log(dir / "train_log.jsonl");
  std::ofstream curve(dir / "loss_curve.csv");
  curve << "epoch,gem,recon,ssm,total,valid_recall20,max_identity_gap,clipped_steps,seconds\n";
  curve.precision(10);
  train::FitOptions fo;
  fo.keep_steps = false;
  fo.on_step = [&](const train::StepRecord& s) {
    log << json{{"step", s.step},          {"epoch", s.epoch},         {"gem", s.terms.gem},
                {"recon", s.terms.recon},  {"ssm", s.terms.ssm},       {"total", s.terms.total},
                {"lr", s.lr},              {"grad_norm", s.grad_norm}, {"clipped", s.clipped}}
               .dump()
        << '\n';
  };
  fo.on_epoch = [&](const train::EpochRecord& e) {
    curve << e.epoch << ',' << e.gem << ',' << e.recon << ',' << e.ssm << ',' << e.total << ','
          << (e.valid_recall ? std::to_string(*e.valid_recall) : "") << ',' << e.max_identity_gap << ','
          << e.clipped_steps << ',' << e.seconds << '\n';
    curve.flush();
    if (!quiet) {
      std::cerr << "epoch " << e.epoch << "  gem " << e.gem << "  recon " << e.recon << "  ssm " << e.ssm;
      if (e.valid_recall) std::cerr << "  valid R@20 " << *e.valid_recall;
      if (e.clipped_steps) std::cerr << "  clipped " << e.clipped_steps;
      std::cerr << "  (" << std::fixed << std::setprecision(1) << e.seconds << "s)" << std::defaultfloat
                << std::setprecision(6) << '\n';
    }
  };
  TrainOutcome out;
  out.fit = train::fit(data.dataset, config, fo);
  ckpt::save_checkpoint(dir / "checkpoint", out.fit.params, config, data.dataset.vocab_hash);
  out.summary = {{"epochs_run", out.fit.epochs.size()},
                 {"best_epoch", out.fit.best_epoch},
                 {"early_stopped", out.fit.early_stopped},
                 {"skipped_train_users", out.fit.skipped_users},
                 {"checkpoint", (dir / "checkpoint").string()}};
  if (out.fit.best_valid_recall) out.summary["best_valid_recall20"] = *out.fit.best_valid_recall;
  write_json(dir / "summary.json", out.summary);
  return out;
}

int cmd_synth(const synth::SyntheticSpec& spec, const std::string& out_dir) {
  const fs::path dir = make_run_dir("synth", out_dir);
  const auto data = synth::make_synthetic(spec);
  {
    std::ofstream out(dir / "interactions.tsv");
    synth::write_tsv(out, data);
  }
  {
    std::ofstream out(dir / "categories.tsv");
    synth::write_categories(out, data);
  }
  std::size_t events = 0;
  for (const auto& s : data.sequences) events += s.size();
  write_json(dir / "synthetic.json", {{"users", spec.users},
                                      {"items", spec.items},
                                      {"clusters", spec.clusters},
                                      {"events", events},
                                      {"seed", spec.seed}});
  std::cout << dir.string() << '\n';
  return kOk;
}

int cmd_prepare(const std::string& input, const std::string& format, const store::PrepareOptions& base,
                const std::string& categories, const std::string& out_dir) {
  store::PrepareOptions o = base;
  o.format = data::input_format_from_string(format);
  if (!categories.empty()) o.categories = categories;
  if (!fs::exists(input)) throw DatasetError("input file not found: " + input);
  const fs::path dir = make_run_dir("prepare", out_dir);
  const json manifest = store::prepare(input, dir, o);
  std::cout << dir.string() << '\n';
  std::cerr << "users " << manifest.at("users") << "  items " << manifest.at("items") << "  events "
            << manifest.at("events") << '\n';
  return kOk;
}

int cmd_train(TrainFlagSet& flags, const std::string& out_dir) {
  auto [config, data_dir] = flags.resolve();
  const auto data = load_data(data_dir);
  adopt_dataset_window(config, data, flags.max_len_set);
  const fs::path dir = make_run_dir("train", out_dir);
  run_training(data, data_dir, config, dir, false);
  std::cout << dir.string() << '\n';
  return kOk;
}

struct EvalFlags {
  std::string checkpoint, data, at = "10,20,50", split = "test", retrieval, noise_scale, out;
  int steps = 0;
  int repeats = 1;
  std::uint64_t seed = 7;
  bool allow_mismatch = false;
};

int cmd_eval(const EvalFlags& f) {
  const auto data = load_data(f.data);
  const auto ck = load_for(f.checkpoint, data, f.allow_mismatch);
  const auto schedule = diffusion::build_schedule(ck.schedule);
  std::size_t dropped = 0;
  const auto cases = cases_for(data, f.split, ck.config.max_len, &dropped);
  auto opts = train::eval_options_for(ck.config);
  opts.at = parse_cutoffs(f.at);
  opts.steps = f.steps;
  if (!f.retrieval.empty()) opts.retrieval = retrieval_from_string(f.retrieval);
  if (!f.noise_scale.empty()) opts.noise = diffusion::reverse_noise_from_string(f.noise_scale);
  if (f.repeats < 1) throw ConfigError("--repeats must be >= 1");
  const fs::path dir = make_run_dir("eval", f.out);

  std::map<std::string, std::vector<double>> per_metric;
  eval::EvalResult first;
  for (int r = 0; r < f.repeats; ++r) {
    opts.seed = f.seed + static_cast<std::uint64_t>(r);
    auto res = eval::evaluate(ck.params, schedule, cases, opts);
    const json m = metrics_json(res.metrics);
    for (const auto& [k, v] : m.items()) per_metric[k].push_back(v.get<double>());
    if (r == 0) first = std::move(res);
  }
  json metrics = json::object(), spread = json::object();
  for (const auto& [k, vs] : per_metric) {
    const auto [m, s] = eval::mean_std(vs);
    metrics[k] = m;
    spread[k] = s;
  }
  json report = {{"metrics", metrics},
                 {"std", spread},
                 {"repeats", f.repeats},
                 {"split", f.split},
                 {"users", first.users.size()},
                 {"skipped_users_without_targets", first.skipped_users},
                 {"dropped_short_users", dropped},
                 {"retrieval", to_string(opts.retrieval)},
                 {"steps", f.steps == 0 ? schedule.steps() : f.steps},
                 {"seed", f.seed},
                 {"checkpoint", fs::absolute(f.checkpoint).string()},
                 {"vocab_hash", data.dataset.vocab_hash},
                 {"checkpoint_hash", checkpoint_hash(f.checkpoint)},
                 {"config_hash", data::hash_hex(fnv1a(format_key_values(to_key_values(ck.config))))},
                 {"config", to_key_values(ck.config)}};
  write_json(dir / "report.json", report);
  {
    std::ofstream out(dir / "users.tsv");
    out << "user";
    for (std::size_t n : opts.at) out << "\trecall@" << n << "\tndcg@" << n;
    out << '\n';
    for (const auto& row : first.users) {
      out << data.user_keys.at(row.user);
      for (std::size_t n : opts.at) out << '\t' << row.recall.at(n) << '\t' << row.ndcg.at(n);
      out << '\n';
    }
  }
  std::cout << metrics.dump() << '\n';
  std::cerr << dir.string() << '\n';
  return kOk;
}

struct RecommendFlags {
  std::string checkpoint, data, input, output, out;
  std::size_t n = 50;
  int steps = 0;
  std::uint64_t seed = 7;
  bool allow_mismatch = false;
};

int cmd_recommend(const RecommendFlags& f) {
  const auto data = load_data(f.data);
  const auto ck = load_for(f.checkpoint, data, f.allow_mismatch);
  const auto schedule = diffusion::build_schedule(ck.schedule);
  std::map<std::string, std::size_t> item_ids;
  for (std::size_t i = 0; i < data.item_keys.size(); ++i) item_ids[data.item_keys[i]] = i;

  // user key -> history (item ids, time order).
  std::vector<std::pair<std::string, std::vector<data::ItemId>>> requests;
  if (f.input.empty()) {
    for (const auto& c : cases_for(data, "test", ck.config.max_len)) requests.push_back({data.user_keys.at(c.user), c.history});
  } else {
    std::ifstream in(f.input);
    if (!in) throw DatasetError("history file not found: " + f.input);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw ParseError("line " + std::to_string(line_no) + ": expected user \\t items");
      std::istringstream ss(line.substr(tab + 1));
      std::vector<data::ItemId> h;
      std::string key;
      while (ss >> key) {
        const auto it = item_ids.find(key);
        if (it == item_ids.end()) throw ParseError("line " + std::to_string(line_no) + ": unknown item '" + key + "'");
        h.push_back(it->second);
      }
      if (h.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty history");
      requests.push_back({line.substr(0, tab), std::move(h)});
    }
  }
  const fs::path out_path = f.output.empty() ? make_run_dir("recommend", f.out) / "recommendations.tsv" : fs::path(f.output);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  std::ofstream out(out_path);
  if (!out) throw Error("cannot write " + out_path.string());
  out << "user\trank\titem\tscore\n";
  out.precision(9);
  Rng rng = derive_rng(f.seed, 0x5e7);
  const inference::RetrievalIndex index(ck.params.item_embedding.value);
  const std::size_t batch = 256;
  for (std::size_t start = 0; start < requests.size(); start += batch) {
    const std::size_t end = std::min(requests.size(), start + batch);
    std::vector<std::vector<data::ItemId>> hs;
    for (std::size_t i = start; i < end; ++i) hs.push_back(requests[i].second);
    Tensor queries;
    if (ck.config.retrieval == Retrieval::diffusion) {
      queries = inference::generate(hs, ck.params, schedule, rng, {f.steps, ck.config.reverse_noise, false},
                                    ck.config.output_on_sphere())
                    .e_u;
    }
    for (std::size_t i = start; i < end; ++i) {
      const auto scores = ck.config.retrieval == Retrieval::diffusion
                              ? index.scores(queries.row(i - start))
                              : inference::max_scores(index, inference::guidance_for(requests[i].second, ck.params));
      const auto recs = inference::recommend_from_scores(scores, requests[i].second, f.n);
      for (std::size_t r = 0; r < recs.size(); ++r) {
        out << requests[i].first << '\t' << r + 1 << '\t' << data.item_keys.at(recs[r].item) << '\t' << recs[r].score << '\n';
      }
    }
  }
  std::cout << out_path.string() << '\n';
  return kOk;
}

struct ProbeFlags {
  std::string checkpoint, data, out;
  eval::ProbeOptions probe;
  std::size_t depth = 100;
  bool allow_mismatch = false;
};

int cmd_probe(const ProbeFlags& f) {
  const auto data = load_data(f.data);
  if (data.categories.empty()) throw DatasetError("dataset has no categories.tsv (prepare with --categories)");
  const auto ck = load_for(f.checkpoint, data, f.allow_mismatch);
  const auto schedule = diffusion::build_schedule(ck.schedule);
  const auto probe = eval::linear_probe(ck.params.item_embedding.value, data.categories, f.probe);
  if (probe.degenerate) std::cerr << "warning: a single category; probe accuracy is trivially 1\n";

  const auto cases = cases_for(data, "test", ck.config.max_len);
  auto opts = train::eval_options_for(ck.config);
  std::size_t depth = f.depth;
  for (const auto& c : cases) depth = std::min(depth, data.dataset.item_count - data::interacted_set(c.history).size());
  if (depth < f.depth) std::cerr << "note: diversity depth reduced to " << depth << " (item pool)\n";
  const auto lists = eval::recommend_lists(ck.params, schedule, cases, depth, opts);
  const auto div = eval::category_diversity(lists, data.categories, depth);

  const fs::path dir = make_run_dir("probe", f.out);
  const json report = {{"probe_accuracy", probe.accuracy},
                       {"classes", probe.classes},
                       {"train_items", probe.train_items},
                       {"test_items", probe.test_items},
                       {"unlabeled_items", probe.unlabeled_items},
                       {"degenerate", probe.degenerate},
                       {"diversity_depth", depth},
                       {"category_diversity", div.mean_categories},
                       {"diversity_users", div.users},
                       {"diversity_unlabeled_items", div.unlabeled_items}};
  write_json(dir / "probe.json", report);
  std::cout << report.dump() << '\n';
  return kOk;
}

struct SweepFlags {
  std::string param, values, checkpoint, at = "10,20,50", out;
  int parallel = 1;
  bool allow_mismatch = false;
};

// Trains (or, for param=steps with --checkpoint, only evaluates) one grid
// point and returns its summary row.
json sweep_point(TrainFlagSet& base, const SweepFlags& f, const std::string& value, const fs::path& dir) {
  fs::create_directories(dir);
  const auto cutoffs = parse_cutoffs(f.at);
  json row = {{"param", f.param}, {"value", value}};
  if (f.param == "steps") {
    auto [config, data_dir] = base.resolve();
    const auto data = load_data(data_dir);
    adopt_dataset_window(config, data, base.max_len_set);
    ckpt::Checkpoint ck;
    if (f.checkpoint.empty()) {
      const auto outcome = run_training(data, data_dir, config, dir, true);
      ck.params = outcome.fit.params;
      ck.config = config;
      ck.schedule = config.schedule_spec();
    } else {
      ck = load_for(f.checkpoint, data, f.allow_mismatch);
    }
    auto opts = train::eval_options_for(ck.config);
    opts.at = cutoffs;
    opts.steps = static_cast<int>(detail::parse_int("steps", value));
    opts.keep_user_rows = false;
    const auto res = eval::evaluate(ck.params, diffusion::build_schedule(ck.schedule), cases_for(data, "test", ck.config.max_len), opts);
    row["metrics"] = metrics_json(res.metrics);
  } else {
    base.flags.sets.push_back(f.param + "=" + value);
    auto [config, data_dir] = base.resolve();
    base.flags.sets.pop_back();
    const auto data = load_data(data_dir);
    adopt_dataset_window(config, data, base.max_len_set);
    const auto outcome = run_training(data, data_dir, config, dir, true);
    auto opts = train::eval_options_for(config);
    opts.at = cutoffs;
    opts.keep_user_rows = false;
    const auto res = eval::evaluate(outcome.fit.params, diffusion::build_schedule(config.schedule_spec()),
                                    cases_for(data, "test", config.max_len), opts);
    row["metrics"] = metrics_json(res.metrics);
    row["best_epoch"] = outcome.fit.best_epoch;
  }
  write_json(dir / "row.json", row);
  return row;
}

int exit_code_for(const std::exception& e);

int cmd_sweep(TrainFlagSet& base, const SweepFlags& f) {
  const auto values = split_list(f.values);
  if (values.empty()) throw ConfigError("--values is empty");
  if (f.param.empty()) throw ConfigError("--param is required");
  if (f.param != "steps") {
    TrainConfig probe;
    apply_key_values(probe, {{f.param, values.front()}});  // rejects unknown keys up front
  }
  base.resolve();  // validate the base configuration before forking
  const fs::path dir = make_run_dir("sweep", f.out);
  std::vector<fs::path> point_dirs;
  for (std::size_t i = 0; i < values.size(); ++i) point_dirs.push_back(dir / ("point-" + std::to_string(i) + "-" + values[i]));

  std::vector<json> rows(values.size());
  if (f.parallel <= 1) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::cerr << f.param << " = " << values[i] << '\n';
      rows[i] = sweep_point(base, f, values[i], point_dirs[i]);
    }
  } else {
    // Independent child processes, at most `parallel` at a time.
    std::map<pid_t, std::size_t> running;
    std::size_t next = 0;
    int worst = kOk;
    auto reap = [&] {
      int status = 0;
      const pid_t pid = ::wait(&status);
      if (pid <= 0) return;
      const int code = WIFEXITED(status) ? WEXITSTATUS(status) : kFailure;
      if (code != kOk) {
        std::cerr << "grid point " << values[running[pid]] << " failed with exit code " << code << '\n';
        worst = worst == kOk ? code : worst;
      }
      running.erase(pid);
    };
    while (next < values.size() || !running.empty()) {
      if (next < values.size() && static_cast<int>(running.size()) < f.parallel) {
        std::cout.flush();
        std::cerr.flush();
        const pid_t pid = ::fork();
        if (pid < 0) throw Error("fork failed");
        if (pid == 0) {
          int code = kOk;
          try {
            sweep_point(base, f, values[next], point_dirs[next]);
          } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << '\n';
            code = exit_code_for(e);
          }
          std::_Exit(code);
        }
        running[pid] = next++;
      } else {
        reap();
      }
    }
    if (worst != kOk) return worst;
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::ifstream in(point_dirs[i] / "row.json");
      rows[i] = json::parse(in);
    }
  }

  std::ofstream table(dir / "summary.tsv");
  std::vector<std::string> keys;
  for (const auto& [k, v] : rows.front().at("metrics").items()) keys.push_back(k);
  table << f.param;
  for (const auto& k : keys) table << '\t' << k;
  table << '\n';
  for (const auto& row : rows) {
    table << row.at("value").get<std::string>();
    for (const auto& k : keys) table << '\t' << row.at("metrics").at(k).get<double>();
    table << '\n';
  }
  write_json(dir / "summary.json", rows);
  std::cout << dir.string() << '\n';
  return kOk;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const CheckpointError*>(&e) || dynamic_cast<const StateMismatchError*>(&e)) return kMismatch;
  if (dynamic_cast<const NumericError*>(&e)) return kNumeric;
  if (dynamic_cast<const ParseError*>(&e) || dynamic_cast<const DatasetError*>(&e) ||
      dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const json::exception*>(&e)) {
    return kInput;
  }
  return kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DimeRec: multi-interest guided diffusion for sequential recommendation"};
  app.require_subcommand(1);
  std::string out_dir;

  auto* synth_cmd = app.add_subcommand("synth", "Generate a clustered synthetic interaction log");
  synth::SyntheticSpec spec;
  spec.min_length = 8;
  spec.max_length = 20;
  synth_cmd->add_option("--users", spec.users);
  synth_cmd->add_option("--items", spec.items);
  synth_cmd->add_option("--clusters", spec.clusters);
  synth_cmd->add_option("--min-length", spec.min_length);
  synth_cmd->add_option("--max-length", spec.max_length);
  synth_cmd->add_option("--stay", spec.stay, "Probability of staying in the current cluster");
  synth_cmd->add_option("--seed", spec.seed);
  synth_cmd->add_option("--out", out_dir, "Output directory (default: timestamped run directory)");

  auto* prepare_cmd = app.add_subcommand("prepare", "Parse an interaction log and write a dataset directory");
  std::string input, format = "tsv", categories;
  store::PrepareOptions prep;
  prepare_cmd->add_option("--input", input, "Interaction file")->required();
  prepare_cmd->add_option("--format", format, "tsv | ml10m | yoochoose");
  prepare_cmd->add_option("--max-len", prep.max_len, "History window recorded in the manifest");
  prepare_cmd->add_option("--seed", prep.seed, "User split seed");
  prepare_cmd->add_option("--categories", categories, "item \\t label[|label] file");
  prepare_cmd->add_option("--out", out_dir);

  auto* train_cmd = app.add_subcommand("train", "Train a model");
  TrainFlagSet train_flags;
  train_flags.attach(train_cmd);
  train_cmd->add_option("--out", out_dir);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  EvalFlags ef;
  eval_cmd->add_option("--checkpoint", ef.checkpoint)->required();
  eval_cmd->add_option("--data", ef.data)->required();
  eval_cmd->add_option("--at", ef.at, "Comma-separated cutoffs");
  eval_cmd->add_option("--split", ef.split, "test | valid");
  eval_cmd->add_option("--steps", ef.steps, "Reverse steps (0: T)");
  eval_cmd->add_option("--retrieval", ef.retrieval, "diffusion | gem");
  eval_cmd->add_option("--noise-scale", ef.noise_scale, "stddev | variance");
  eval_cmd->add_option("--repeats", ef.repeats, "Repeat with seeds seed..seed+n-1, report mean and std");
  eval_cmd->add_option("--seed", ef.seed);
  eval_cmd->add_flag("--allow-vocab-mismatch", ef.allow_mismatch);
  eval_cmd->add_option("--out", ef.out);

  auto* rec_cmd = app.add_subcommand("recommend", "Batch top-n recommendation");
  RecommendFlags rf;
  rec_cmd->add_option("--checkpoint", rf.checkpoint)->required();
  rec_cmd->add_option("--data", rf.data)->required();
  rec_cmd->add_option("--input", rf.input, "user \\t item item ... (default: the test users)");
  rec_cmd->add_option("--output", rf.output, "Output TSV (default: <run dir>/recommendations.tsv)");
  rec_cmd->add_option("--n", rf.n);
  rec_cmd->add_option("--steps", rf.steps, "Reverse steps (0: T)");
  rec_cmd->add_option("--seed", rf.seed);
  rec_cmd->add_flag("--allow-vocab-mismatch", rf.allow_mismatch);
  rec_cmd->add_option("--out", rf.out);

  auto* probe_cmd = app.add_subcommand("probe", "Linear probe and category diversity");
  ProbeFlags pf;
  probe_cmd->add_option("--checkpoint", pf.checkpoint)->required();
  probe_cmd->add_option("--data", pf.data)->required();
  probe_cmd->add_option("--epochs", pf.probe.epochs);
  probe_cmd->add_option("--lr", pf.probe.lr);
  probe_cmd->add_option("--depth", pf.depth, "Recommendation depth for diversity");
  probe_cmd->add_flag("--allow-vocab-mismatch", pf.allow_mismatch);
  probe_cmd->add_option("--out", pf.out);

  auto* sweep_cmd = app.add_subcommand("sweep", "Train and evaluate over a parameter grid");
  TrainFlagSet sweep_base;
  sweep_base.attach(sweep_cmd);
  SweepFlags sf;
  sweep_cmd->add_option("--param", sf.param, "Config key, or `steps` for reverse steps")->required();
  sweep_cmd->add_option("--values", sf.values, "Comma-separated values")->required();
  sweep_cmd->add_option("--checkpoint", sf.checkpoint, "With --param steps: evaluate this checkpoint instead of training");
  sweep_cmd->add_option("--at", sf.at);
  sweep_cmd->add_option("--parallel", sf.parallel, "Grid points run as independent processes");
  sweep_cmd->add_flag("--allow-vocab-mismatch", sf.allow_mismatch);
  sweep_cmd->add_option("--out", sf.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInput;
  }

  try {
    if (*synth_cmd) return cmd_synth(spec, out_dir);
    if (*prepare_cmd) return cmd_prepare(input, format, prep, categories, out_dir);
    if (*train_cmd) return cmd_train(train_flags, out_dir);
    if (*eval_cmd) return cmd_eval(ef);
    if (*rec_cmd) return cmd_recommend(rf);
    if (*probe_cmd) return cmd_probe(pf);
    if (*sweep_cmd) return cmd_sweep(sweep_base, sf);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kFailure;
}
