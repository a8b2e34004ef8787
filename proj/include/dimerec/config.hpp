#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dimerec/diffusion.hpp"
#include "dimerec/error.hpp"

namespace dimerec {

enum class GemKind { self_attentive, rule_based };

inline std::string to_string(GemKind k) { return k == GemKind::self_attentive ? "self_attentive" : "rule_based"; }

inline GemKind gem_kind_from_string(const std::string& s) {
  if (s == "self_attentive") return GemKind::self_attentive;
  if (s == "rule_based") return GemKind::rule_based;
  throw ConfigError("gem.kind must be self_attentive or rule_based, got '" + s + "'");
}

// How a trained model produces the query for top-N retrieval.
//   diffusion: reverse process from noise to e_u
//   gem:       multi-interest retrieval by the guidance vectors (an item's
//              score is its best inner product over the K interests)
enum class Retrieval { diffusion, gem };

inline std::string to_string(Retrieval r) { return r == Retrieval::diffusion ? "diffusion" : "gem"; }

inline Retrieval retrieval_from_string(const std::string& s) {
  if (s == "diffusion") return Retrieval::diffusion;
  if (s == "gem") return Retrieval::gem;
  throw ConfigError("retrieval must be diffusion or gem, got '" + s + "'");
}

// Ablation switches. The named presets are the four ablation variants.
struct AblationFlags {
  bool use_gem_loss = true;
  bool use_recon_loss = true;
  bool use_ssm_loss = true;
  bool use_grw = true;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

inline AblationFlags variant_flags(const std::string& variant) {
  if (variant == "full") return {true, true, true, true};
  if (variant == "v1") return {false, true, true, true};
  if (variant == "v2") return {false, false, true, true};
  if (variant == "v3") return {false, false, true, false};
  if (variant == "v4") return {false, true, false, true};
  throw ConfigError("unknown variant '" + variant + "' (expected full, v1, v2, v3, v4)");
}

inline bool& flag_ref(AblationFlags& f, const std::string& name) {
  if (name == "use_gem_loss") return f.use_gem_loss;
  if (name == "use_recon_loss") return f.use_recon_loss;
  if (name == "use_ssm_loss") return f.use_ssm_loss;
  if (name == "use_grw") return f.use_grw;
  throw ConfigError("unknown ablation flag '" + name + "'");
}

// Combines an optional variant preset with explicitly given flags. A flag
// that contradicts the preset is an error; agreeing flags are accepted.
inline AblationFlags resolve_flags(AblationFlags base, const std::optional<std::string>& variant,
                                   const std::map<std::string, bool>& explicit_flags) {
  AblationFlags out = variant ? variant_flags(*variant) : base;
  for (const auto& [name, value] : explicit_flags) {
    bool& slot = flag_ref(out, name);
    if (variant && slot != value) {
      throw ConfigError("conflicting flags: variant " + *variant + " sets " + name + "=" + (slot ? "true" : "false") +
                        " but " + name + "=" + (value ? "true" : "false") + " was given");
    }
    slot = value;
  }
  return out;
}

struct TrainConfig {
  std::size_t d = 64;
  std::size_t batch = 256;
  std::size_t K = 4;
  double lr = 0.005;
  std::size_t negatives = 10;
  int T = 20;
  double lambda = 0.1;
  double mu = 1.0;
  std::size_t max_len = 20;
  diffusion::ScheduleKind schedule_kind = diffusion::ScheduleKind::linear;
  std::optional<double> beta_start;  // unset: default_schedule_spec(T)
  std::optional<double> beta_end;
  AblationFlags flags;
  std::optional<bool> normalize_output;  // unset: follows flags.use_grw
  GemKind gem_kind = GemKind::self_attentive;
  diffusion::ReverseNoise reverse_noise = diffusion::ReverseNoise::stddev;
  Retrieval retrieval = Retrieval::diffusion;
  std::uint64_t seed = 42;
  int epochs = 10;
  int patience = 5;
  double clip_norm = 5.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  bool output_on_sphere() const { return normalize_output.value_or(flags.use_grw); }

  diffusion::ScheduleSpec schedule_spec() const {
    diffusion::ScheduleSpec spec = diffusion::default_schedule_spec(T);
    spec.kind = schedule_kind;
    if (beta_start) spec.beta_start = *beta_start;
    if (beta_end) spec.beta_end = *beta_end;
    return spec;
  }

  void validate() const {
    if (d == 0 || d % 2 != 0) throw ConfigError("d must be a positive even number");
    if (batch == 0) throw ConfigError("batch must be positive");
    if (K == 0) throw ConfigError("K must be positive");
    if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
    if (negatives == 0) throw ConfigError("negatives must be positive");
    if (T < 1) throw ConfigError("T must be >= 1");
    if (!(lambda >= 0.0) || !(mu >= 0.0)) throw ConfigError("lambda and mu must be non-negative");
    if (max_len == 0) throw ConfigError("max_len must be positive");
    if (epochs < 0 || patience < 1) throw ConfigError("epochs must be >= 0 and patience >= 1");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    const auto spec = schedule_spec();
    diffusion::build_schedule(spec);
  }
};

// Flat `key = value` text, a TOML-compatible subset: one assignment per line,
// `#` comments, optional double quotes around string values.
using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    std::string body = line;
    bool quoted = false;
    for (std::size_t i = 0; i < body.size(); ++i) {
      if (body[i] == '"') quoted = !quoted;
      if (body[i] == '#' && !quoted) {
        body.resize(i);
        break;
      }
    }
    body = trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ParseError("config line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(body.substr(0, eq));
    std::string value = trim(body.substr(eq + 1));
    if (key.empty()) throw ParseError("config line " + std::to_string(line_no) + ": empty key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    kv[key] = value;
  }
  return kv;
}

inline KeyValues load_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  return parse_key_values(in);
}

inline std::string format_key_values(const KeyValues& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) {
    const bool bare = !v.empty() && v.find_first_not_of("0123456789.eE+-") == std::string::npos;
    const bool boolean = v == "true" || v == "false";
    os << k << " = " << ((bare || boolean) ? v : "\"" + v + "\"") << '\n';
  }
  return os.str();
}

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  const long long out = parse_int(key, v);
  if (out < 0) throw ConfigError(key + ": must be non-negative");
  return static_cast<std::size_t>(out);
}

}  // namespace detail

inline KeyValues to_key_values(const TrainConfig& c) {
  using detail::fmt_double;
  const auto spec = c.schedule_spec();
  KeyValues kv;
  kv["d"] = std::to_string(c.d);
  kv["batch"] = std::to_string(c.batch);
  kv["K"] = std::to_string(c.K);
  kv["lr"] = fmt_double(c.lr);
  kv["negatives"] = std::to_string(c.negatives);
  kv["T"] = std::to_string(c.T);
  kv["lambda"] = fmt_double(c.lambda);
  kv["mu"] = fmt_double(c.mu);
  kv["max_len"] = std::to_string(c.max_len);
  kv["schedule.kind"] = diffusion::to_string(c.schedule_kind);
  kv["schedule.beta_start"] = fmt_double(spec.beta_start);
  kv["schedule.beta_end"] = fmt_double(spec.beta_end);
  kv["use_gem_loss"] = c.flags.use_gem_loss ? "true" : "false";
  kv["use_recon_loss"] = c.flags.use_recon_loss ? "true" : "false";
  kv["use_ssm_loss"] = c.flags.use_ssm_loss ? "true" : "false";
  kv["use_grw"] = c.flags.use_grw ? "true" : "false";
  kv["normalize_output"] = c.output_on_sphere() ? "true" : "false";
  kv["gem.kind"] = to_string(c.gem_kind);
  kv["reverse.noise_scale"] = diffusion::to_string(c.reverse_noise);
  kv["retrieval"] = to_string(c.retrieval);
  kv["seed"] = std::to_string(c.seed);
  kv["epochs"] = std::to_string(c.epochs);
  kv["patience"] = std::to_string(c.patience);
  kv["clip_norm"] = fmt_double(c.clip_norm);
  kv["adam.beta1"] = fmt_double(c.adam_beta1);
  kv["adam.beta2"] = fmt_double(c.adam_beta2);
  kv["adam.eps"] = fmt_double(c.adam_eps);
  return kv;
}

// Applies known keys onto `c`. Unknown keys are an error unless listed in
// `passthrough` (e.g. dataset paths that the CLI handles itself).
inline void apply_key_values(TrainConfig& c, const KeyValues& kv, const std::vector<std::string>& passthrough = {}) {
  using namespace detail;
  for (const auto& [k, v] : kv) {
    if (k == "d") c.d = parse_size(k, v);
    else if (k == "batch") c.batch = parse_size(k, v);
    else if (k == "K") c.K = parse_size(k, v);
    else if (k == "lr") c.lr = parse_double(k, v);
    else if (k == "negatives") c.negatives = parse_size(k, v);
    else if (k == "T") c.T = static_cast<int>(parse_int(k, v));
    else if (k == "lambda") c.lambda = parse_double(k, v);
    else if (k == "mu") c.mu = parse_double(k, v);
    else if (k == "max_len") c.max_len = parse_size(k, v);
    else if (k == "schedule.kind") c.schedule_kind = diffusion::schedule_kind_from_string(v);
    else if (k == "schedule.beta_start") c.beta_start = parse_double(k, v);
    else if (k == "schedule.beta_end") c.beta_end = parse_double(k, v);
    else if (k == "use_gem_loss") c.flags.use_gem_loss = parse_bool(k, v);
    else if (k == "use_recon_loss") c.flags.use_recon_loss = parse_bool(k, v);
    else if (k == "use_ssm_loss") c.flags.use_ssm_loss = parse_bool(k, v);
    else if (k == "use_grw") c.flags.use_grw = parse_bool(k, v);
    else if (k == "normalize_output") c.normalize_output = parse_bool(k, v);
    else if (k == "gem.kind") c.gem_kind = gem_kind_from_string(v);
    else if (k == "reverse.noise_scale") c.reverse_noise = diffusion::reverse_noise_from_string(v);
    else if (k == "retrieval") c.retrieval = retrieval_from_string(v);
    else if (k == "seed") c.seed = static_cast<std::uint64_t>(parse_int(k, v));
    else if (k == "epochs") c.epochs = static_cast<int>(parse_int(k, v));
    else if (k == "patience") c.patience = static_cast<int>(parse_int(k, v));
    else if (k == "clip_norm") c.clip_norm = parse_double(k, v);
    else if (k == "adam.beta1") c.adam_beta1 = parse_double(k, v);
    else if (k == "adam.beta2") c.adam_beta2 = parse_double(k, v);
    else if (k == "adam.eps") c.adam_eps = parse_double(k, v);
    else if (std::find(passthrough.begin(), passthrough.end(), k) == passthrough.end()) {
      throw ConfigError("unknown config key '" + k + "'");
    }
  }
}

inline TrainConfig config_from_key_values(const KeyValues& kv, const std::vector<std::string>& passthrough = {}) {
  TrainConfig c;
  apply_key_values(c, kv, passthrough);
  return c;
}

}  // namespace dimerec
