#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dimerec/error.hpp"
#include "dimerec/rng.hpp"

namespace dimerec::data {

using ItemId = std::size_t;
using UserId = std::size_t;

// Insertion-ordered string <-> dense id map.
class Vocabulary {
 public:
  std::size_t intern(const std::string& key) {
    auto [it, inserted] = index_.try_emplace(key, keys_.size());
    if (inserted) keys_.push_back(key);
    return it->second;
  }

  std::optional<std::size_t> find(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& key(std::size_t id) const { return keys_.at(id); }
  std::size_t size() const { return keys_.size(); }
  const std::vector<std::string>& keys() const { return keys_; }

  // FNV-1a over the keys in id order.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& k : keys_) {
      for (unsigned char c : k) {
        h ^= c;
        h *= 1099511628211ull;
      }
      h ^= 0xff;
      h *= 1099511628211ull;
    }
    return h;
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> keys_;
};

inline std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

struct Interaction {
  UserId user;
  ItemId item;
  std::int64_t timestamp;
};

enum class InputFormat {
  tsv,        // user \t item \t timestamp
  ml10m,      // user::item::rating::timestamp
  yoochoose,  // session,ISO-timestamp,item,... (clicks or buys file)
};

inline InputFormat input_format_from_string(const std::string& s) {
  if (s == "tsv") return InputFormat::tsv;
  if (s == "ml10m") return InputFormat::ml10m;
  if (s == "yoochoose") return InputFormat::yoochoose;
  throw ConfigError("unknown input format '" + s + "' (expected tsv, ml10m or yoochoose)");
}

inline std::string to_string(InputFormat f) {
  switch (f) {
    case InputFormat::tsv:
      return "tsv";
    case InputFormat::ml10m:
      return "ml10m";
    case InputFormat::yoochoose:
      return "yoochoose";
  }
  return "tsv";
}

struct InteractionLog {
  Vocabulary users;
  Vocabulary items;
  // Per-user item ids in non-decreasing timestamp order (ties keep input order).
  std::vector<std::vector<ItemId>> sequences;
  std::vector<std::vector<std::int64_t>> timestamps;
  std::size_t event_count = 0;
  InputFormat format = InputFormat::tsv;
  // For YooChoose: "clicks" or "buys", detected from the column layout.
  std::string source_kind;

  std::size_t user_count() const { return users.size(); }
  std::size_t item_count() const { return items.size(); }
};

namespace detail {

inline std::vector<std::string> split(const std::string& line, const std::string& delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + delim.size();
  }
}

inline std::int64_t parse_int(const std::string& s, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("line " + std::to_string(line_no) + ": invalid integer '" + s + "'");
  }
}

// "2014-04-07T10:51:09.277Z" -> seconds since epoch (UTC).
inline std::int64_t parse_iso_timestamp(const std::string& s, std::size_t line_no) {
  std::tm tm{};
  std::istringstream is(s);
  is >> std::get_time(&tm, "%Y-%m-%dT%H:%M:%S");
  if (is.fail()) throw ParseError("line " + std::to_string(line_no) + ": invalid timestamp '" + s + "'");
  return static_cast<std::int64_t>(timegm(&tm));
}

inline std::string trim_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace detail

// Parses an interaction log, builds dense vocabularies in order of first
// appearance, and sorts each user's events by timestamp (stable).
inline InteractionLog parse_interactions(std::istream& in, InputFormat format) {
  InteractionLog log;
  log.format = format;
  struct Event {
    std::int64_t ts;
    ItemId item;
  };
  std::vector<std::vector<Event>> per_user;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim_cr(line);
    if (line.empty()) continue;
    std::string user, item;
    std::int64_t ts = 0;
    switch (format) {
      case InputFormat::tsv: {
        const auto f = detail::split(line, "\t");
        if (f.size() != 3) {
          throw ParseError("line " + std::to_string(line_no) + ": expected 3 tab-separated fields, got " +
                           std::to_string(f.size()));
        }
        user = f[0], item = f[1], ts = detail::parse_int(f[2], line_no);
        break;
      }
      case InputFormat::ml10m: {
        const auto f = detail::split(line, "::");
        if (f.size() != 4) {
          throw ParseError("line " + std::to_string(line_no) + ": expected user::item::rating::timestamp");
        }
        user = f[0], item = f[1], ts = detail::parse_int(f[3], line_no);
        break;
      }
      case InputFormat::yoochoose: {
        const auto f = detail::split(line, ",");
        if (f.size() != 4 && f.size() != 5) {
          throw ParseError("line " + std::to_string(line_no) + ": expected a YooChoose clicks (4) or buys (5) row");
        }
        const std::string kind = f.size() == 4 ? "clicks" : "buys";
        if (log.source_kind.empty()) log.source_kind = kind;
        if (log.source_kind != kind) throw ParseError("line " + std::to_string(line_no) + ": mixed clicks/buys rows");
        user = f[0], item = f[2], ts = detail::parse_iso_timestamp(f[1], line_no);
        break;
      }
    }
    if (user.empty() || item.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty user or item");
    const UserId u = log.users.intern(user);
    const ItemId i = log.items.intern(item);
    if (u >= per_user.size()) per_user.resize(u + 1);
    per_user[u].push_back(Event{ts, i});
    ++log.event_count;
  }
  if (log.event_count == 0) throw DatasetError("empty dataset: no interactions found");
  log.sequences.resize(per_user.size());
  log.timestamps.resize(per_user.size());
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    auto& ev = per_user[u];
    std::stable_sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.ts < b.ts; });
    for (const auto& e : ev) {
      log.sequences[u].push_back(e.item);
      log.timestamps[u].push_back(e.ts);
    }
  }
  return log;
}

inline InteractionLog load_interactions(const std::string& path, InputFormat format) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open interaction file: " + path);
  return parse_interactions(in, format);
}

struct DatasetSplit {
  std::vector<UserId> train_users;
  std::vector<UserId> valid_users;
  std::vector<UserId> test_users;
};

// User-level random partition. Sizes are round(n*r_train) and
// round(n*r_valid); test takes the remainder.
inline DatasetSplit split_users(std::size_t user_count, std::array<double, 3> ratios, std::uint64_t seed) {
  if (user_count < 3) throw DatasetError("split_users: need at least 3 users, got " + std::to_string(user_count));
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  std::vector<UserId> order(user_count);
  std::iota(order.begin(), order.end(), UserId{0});
  Rng rng = derive_rng(seed, 0x5b117);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<double>(user_count);
  std::size_t n_train = static_cast<std::size_t>(std::llround(n * ratios[0]));
  std::size_t n_valid = static_cast<std::size_t>(std::llround(n * ratios[1]));
  n_train = std::min(n_train, user_count);
  n_valid = std::min(n_valid, user_count - n_train);
  DatasetSplit split;
  split.train_users.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.valid_users.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                           order.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  split.test_users.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), order.end());
  return split;
}

inline DatasetSplit split_users(const InteractionLog& log, std::array<double, 3> ratios, std::uint64_t seed) {
  return split_users(log.user_count(), ratios, seed);
}

struct SequenceSample {
  UserId user = 0;
  std::vector<ItemId> history;
  ItemId target = 0;
  std::vector<ItemId> negatives;
};

// Sliding next-item samples over the train users: for each position i >= 1
// the history is the (at most max_len) items before i and the target is the
// item at i. Negatives are filled in later per epoch.
inline std::vector<SequenceSample> make_training_samples(const std::vector<std::vector<ItemId>>& sequences,
                                                         const std::vector<UserId>& users, std::size_t max_len,
                                                         std::size_t* skipped_users = nullptr) {
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  std::vector<SequenceSample> out;
  std::size_t skipped = 0;
  for (UserId u : users) {
    const auto& seq = sequences.at(u);
    if (seq.size() < 2) {
      ++skipped;
      continue;
    }
    for (std::size_t i = 1; i < seq.size(); ++i) {
      const std::size_t begin = i > max_len ? i - max_len : 0;
      SequenceSample s;
      s.user = u;
      s.history.assign(seq.begin() + static_cast<std::ptrdiff_t>(begin), seq.begin() + static_cast<std::ptrdiff_t>(i));
      s.target = seq[i];
      out.push_back(std::move(s));
    }
  }
  if (skipped_users) *skipped_users = skipped;
  return out;
}

inline std::vector<SequenceSample> make_training_samples(const InteractionLog& log, const DatasetSplit& split,
                                                         std::size_t max_len, std::size_t* skipped_users = nullptr) {
  return make_training_samples(log.sequences, split.train_users, max_len, skipped_users);
}

// k distinct items drawn uniformly from [0, item_count) \ excluded.
// `excluded` must be sorted.
inline std::vector<ItemId> sample_negatives(const std::vector<ItemId>& excluded, std::size_t item_count, std::size_t k,
                                            Rng& rng) {
  if (!std::is_sorted(excluded.begin(), excluded.end())) throw ContractError("sample_negatives: excluded set must be sorted");
  std::size_t distinct_excluded = 0;
  for (std::size_t i = 0; i < excluded.size(); ++i) {
    if (excluded[i] < item_count && (i == 0 || excluded[i] != excluded[i - 1])) ++distinct_excluded;
  }
  const std::size_t pool = item_count - distinct_excluded;
  if (pool < k) {
    throw SamplingError("sample_negatives: only " + std::to_string(pool) + " candidates for " + std::to_string(k) +
                        " negatives");
  }
  std::vector<ItemId> out;
  out.reserve(k);
  auto taken = [&](ItemId c) {
    return std::binary_search(excluded.begin(), excluded.end(), c) || std::find(out.begin(), out.end(), c) != out.end();
  };
  if (pool <= 4 * k) {
    // Small pool: enumerate and partially shuffle.
    std::vector<ItemId> cand;
    for (ItemId c = 0; c < item_count; ++c) {
      if (!std::binary_search(excluded.begin(), excluded.end(), c)) cand.push_back(c);
    }
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, cand.size() - 1);
      std::swap(cand[i], cand[pick(rng)]);
      out.push_back(cand[i]);
    }
    return out;
  }
  std::uniform_int_distribution<ItemId> dist(0, item_count - 1);
  while (out.size() < k) {
    const ItemId c = dist(rng);
    if (!taken(c)) out.push_back(c);
  }
  return out;
}

// One held-out user under the 80/20 protocol.
struct EvalCase {
  UserId user = 0;
  std::vector<ItemId> history;  // last max_len items of the first 80%
  std::vector<ItemId> targets;  // distinct items of the remaining 20%
};

inline constexpr std::size_t kMinEvalInteractions = 5;

// First floor(0.8 n) interactions are the input, the rest the target set.
// Users with fewer than 5 interactions are dropped and counted.
inline std::vector<EvalCase> make_eval_cases(const std::vector<std::vector<ItemId>>& sequences,
                                             const std::vector<UserId>& users, std::size_t max_len,
                                             std::size_t* dropped = nullptr) {
  std::vector<EvalCase> out;
  std::size_t drop = 0;
  for (UserId u : users) {
    const auto& seq = sequences.at(u);
    if (seq.size() < kMinEvalInteractions) {
      ++drop;
      continue;
    }
    const std::size_t cut = seq.size() * 4 / 5;
    EvalCase c;
    c.user = u;
    const std::size_t begin = cut > max_len ? cut - max_len : 0;
    c.history.assign(seq.begin() + static_cast<std::ptrdiff_t>(begin), seq.begin() + static_cast<std::ptrdiff_t>(cut));
    for (std::size_t i = cut; i < seq.size(); ++i) {
      if (std::find(c.targets.begin(), c.targets.end(), seq[i]) == c.targets.end()) c.targets.push_back(seq[i]);
    }
    out.push_back(std::move(c));
  }
  if (dropped) *dropped = drop;
  return out;
}

// Sorted distinct items of a user's full sequence (the negative-sampling exclusion set).
inline std::vector<ItemId> interacted_set(const std::vector<ItemId>& seq) {
  std::vector<ItemId> s = seq;
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

}  // namespace dimerec::data
