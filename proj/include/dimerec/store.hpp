#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dimerec/datapipe.hpp"
#include "dimerec/evaluation.hpp"
#include "dimerec/trainer.hpp"

// Prepared-dataset directory:
//   dataset.json    counts, vocab hashes, split sizes, provenance
//   items.tsv       id \t item key
//   users.tsv       id \t user key
//   sequences.tsv   user id \t space-separated item ids (time order)
//   split.tsv       user id \t train|valid|test
//   categories.tsv  optional, item id \t label[|label...]
namespace dimerec::store {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct PrepareOptions {
  data::InputFormat format = data::InputFormat::tsv;
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 42;
  std::size_t max_len = 20;
  std::optional<fs::path> categories;  // item key \t label[|label...]
};

struct PreparedDataset {
  train::Dataset dataset;
  std::vector<std::string> item_keys;
  std::vector<std::string> user_keys;
  eval::CategoryTable categories;  // empty when none were supplied
  json manifest;
};

namespace detail {

inline void write_vocab(const fs::path& path, const std::vector<std::string>& keys) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write " + path.string());
  for (std::size_t i = 0; i < keys.size(); ++i) out << i << '\t' << keys[i] << '\n';
}

inline std::vector<std::string> read_vocab(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("missing " + path.string());
  std::vector<std::string> keys;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || std::stoul(line.substr(0, tab)) != keys.size()) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed vocabulary row");
    }
    keys.push_back(line.substr(tab + 1));
  }
  return keys;
}

inline std::uint64_t hash_keys(const std::vector<std::string>& keys) {
  data::Vocabulary v;
  for (const auto& k : keys) v.intern(k);
  return v.hash();
}

inline std::vector<std::string> split_labels(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string label;
  while (std::getline(ss, label, '|')) {
    if (!label.empty()) out.push_back(label);
  }
  return out;
}

}  // namespace detail

// Parses the interaction file, splits users, and writes the dataset directory.
inline json prepare(const fs::path& input, const fs::path& out_dir, const PrepareOptions& options) {
  if (!fs::exists(input)) throw DatasetError("input file not found: " + input.string());
  const data::InteractionLog log = data::load_interactions(input.string(), options.format);
  const data::DatasetSplit split = data::split_users(log, options.ratios, options.seed);
  fs::create_directories(out_dir);
  detail::write_vocab(out_dir / "items.tsv", log.items.keys());
  detail::write_vocab(out_dir / "users.tsv", log.users.keys());
  {
    std::ofstream out(out_dir / "sequences.tsv");
    for (std::size_t u = 0; u < log.sequences.size(); ++u) {
      out << u << '\t';
      for (std::size_t k = 0; k < log.sequences[u].size(); ++k) out << (k ? " " : "") << log.sequences[u][k];
      out << '\n';
    }
  }
  {
    std::ofstream out(out_dir / "split.tsv");
    for (auto u : split.train_users) out << u << "\ttrain\n";
    for (auto u : split.valid_users) out << u << "\tvalid\n";
    for (auto u : split.test_users) out << u << "\ttest\n";
  }
  std::size_t labelled = 0, unknown_items = 0;
  if (options.categories) {
    std::ifstream in(*options.categories);
    if (!in) throw DatasetError("category file not found: " + options.categories->string());
    std::ofstream out(out_dir / "categories.tsv");
    std::string line;
    while (std::getline(in, line)) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) continue;
      const auto id = log.items.find(line.substr(0, tab));
      if (!id) {
        ++unknown_items;
        continue;
      }
      out << *id << '\t' << line.substr(tab + 1) << '\n';
      ++labelled;
    }
  }
  std::size_t train_samples = 0, dropped_valid = 0, dropped_test = 0;
  for (auto u : split.train_users) train_samples += log.sequences[u].size() > 1 ? log.sequences[u].size() - 1 : 0;
  data::make_eval_cases(log.sequences, split.valid_users, options.max_len, &dropped_valid);
  data::make_eval_cases(log.sequences, split.test_users, options.max_len, &dropped_test);

  json manifest = {
      {"source", fs::absolute(input).string()},
      {"format", data::to_string(options.format)},
      {"users", log.user_count()},
      {"items", log.item_count()},
      {"events", log.event_count},
      {"item_vocab_hash", data::hash_hex(log.items.hash())},
      {"user_vocab_hash", data::hash_hex(log.users.hash())},
      {"split", {{"train", split.train_users.size()}, {"valid", split.valid_users.size()}, {"test", split.test_users.size()}}},
      {"split_ratios", options.ratios},
      {"seed", options.seed},
      {"max_len", options.max_len},
      {"train_samples", train_samples},
      {"eval_users_dropped", {{"valid", dropped_valid}, {"test", dropped_test}}},
  };
  if (!log.source_kind.empty()) manifest["source_kind"] = log.source_kind;
  if (options.categories) manifest["categories"] = {{"labelled_items", labelled}, {"unknown_items", unknown_items}};
  std::ofstream out(out_dir / "dataset.json");
  out << manifest.dump(2) << '\n';
  return manifest;
}

inline PreparedDataset load_prepared(const fs::path& dir) {
  PreparedDataset p;
  {
    std::ifstream in(dir / "dataset.json");
    if (!in) throw DatasetError("not a prepared dataset (missing dataset.json): " + dir.string());
    try {
      p.manifest = json::parse(in);
    } catch (const json::exception& e) {
      throw ParseError("corrupt dataset.json: " + std::string(e.what()));
    }
  }
  p.item_keys = detail::read_vocab(dir / "items.tsv");
  p.user_keys = detail::read_vocab(dir / "users.tsv");
  p.dataset.item_count = p.item_keys.size();
  p.dataset.vocab_hash = data::hash_hex(detail::hash_keys(p.item_keys));
  if (p.manifest.value("item_vocab_hash", std::string{}) != p.dataset.vocab_hash) {
    throw DatasetError("items.tsv does not match the hash recorded in dataset.json");
  }
  p.dataset.sequences.resize(p.user_keys.size());
  {
    std::ifstream in(dir / "sequences.tsv");
    if (!in) throw DatasetError("missing sequences.tsv in " + dir.string());
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ss(line);
      std::size_t u = 0, item = 0;
      if (!(ss >> u) || u >= p.user_keys.size()) throw ParseError("sequences.tsv: bad user id in '" + line + "'");
      while (ss >> item) {
        if (item >= p.dataset.item_count) throw ParseError("sequences.tsv: item id out of range in '" + line + "'");
        p.dataset.sequences[u].push_back(item);
      }
    }
  }
  {
    std::ifstream in(dir / "split.tsv");
    if (!in) throw DatasetError("missing split.tsv in " + dir.string());
    std::size_t u = 0;
    std::string part;
    while (in >> u >> part) {
      if (u >= p.user_keys.size()) throw ParseError("split.tsv: user id out of range");
      if (part == "train") p.dataset.split.train_users.push_back(u);
      else if (part == "valid") p.dataset.split.valid_users.push_back(u);
      else if (part == "test") p.dataset.split.test_users.push_back(u);
      else throw ParseError("split.tsv: unknown partition '" + part + "'");
    }
  }
  if (fs::exists(dir / "categories.tsv")) {
    p.categories.resize(p.dataset.item_count);
    std::ifstream in(dir / "categories.tsv");
    std::string line;
    while (std::getline(in, line)) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) continue;
      p.categories.at(std::stoul(line.substr(0, tab))) = detail::split_labels(line.substr(tab + 1));
    }
  }
  return p;
}

}  // namespace dimerec::store
