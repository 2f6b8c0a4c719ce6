#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dslrec/common.hpp"

namespace dslrec {

using UserId = std::uint32_t;
using ItemId = std::uint32_t;

struct Edge {
  UserId user;
  ItemId item;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

// Implicit-feedback interactions split into train and test. Edges are kept
// sorted by (user, item) and deduplicated within each split.
class InteractionDataset {
 public:
  InteractionDataset() = default;

  InteractionDataset(std::size_t num_users, std::size_t num_items,
                     std::vector<Edge> train, std::vector<Edge> test)
      : num_users_(num_users),
        num_items_(num_items),
        train_(std::move(train)),
        test_(std::move(test)) {
    normalize(train_);
    normalize(test_);
    validate();
    pos_ = group_by_user(train_);
    test_pos_ = group_by_user(test_);
  }

  std::size_t num_users() const noexcept { return num_users_; }
  std::size_t num_items() const noexcept { return num_items_; }
  std::size_t num_nodes() const noexcept { return num_users_ + num_items_; }
  const std::vector<Edge>& train_edges() const noexcept { return train_; }
  const std::vector<Edge>& test_edges() const noexcept { return test_; }

  // Sorted train items of user u.
  const std::vector<ItemId>& train_items(UserId u) const { return pos_.at(u); }
  const std::vector<ItemId>& test_items(UserId u) const { return test_pos_.at(u); }

  bool is_train_pair(UserId u, ItemId i) const {
    const auto& items = pos_[u];
    return std::binary_search(items.begin(), items.end(), i);
  }

  std::vector<std::size_t> user_degrees() const {
    std::vector<std::size_t> deg(num_users_);
    for (std::size_t u = 0; u < num_users_; ++u) deg[u] = pos_[u].size();
    return deg;
  }

  std::vector<std::size_t> item_degrees() const {
    std::vector<std::size_t> deg(num_items_, 0);
    for (const auto& e : train_) ++deg[e.item];
    return deg;
  }

 private:
  static void normalize(std::vector<Edge>& edges) {
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  }

  void validate() const {
    auto check = [&](const std::vector<Edge>& edges) {
      for (const auto& e : edges) {
        if (e.user >= num_users_ || e.item >= num_items_) {
          throw ConfigError("edge (" + std::to_string(e.user) + ", " +
                            std::to_string(e.item) + ") outside " +
                            std::to_string(num_users_) + " x " +
                            std::to_string(num_items_));
        }
      }
    };
    check(train_);
    check(test_);
    std::vector<Edge> both;
    std::set_intersection(train_.begin(), train_.end(), test_.begin(), test_.end(),
                          std::back_inserter(both));
    if (!both.empty()) {
      throw ConfigError("edge (" + std::to_string(both.front().user) + ", " +
                        std::to_string(both.front().item) +
                        ") appears in both train and test");
    }
  }

  std::vector<std::vector<ItemId>> group_by_user(const std::vector<Edge>& edges) const {
    std::vector<std::vector<ItemId>> out(num_users_);
    for (const auto& e : edges) out[e.user].push_back(e.item);
    return out;
  }

  std::size_t num_users_ = 0;
  std::size_t num_items_ = 0;
  std::vector<Edge> train_;
  std::vector<Edge> test_;
  std::vector<std::vector<ItemId>> pos_;
  std::vector<std::vector<ItemId>> test_pos_;
};

enum class InputFormat { pair_lines, per_user_adjacency };

inline InputFormat parse_input_format(std::string_view name) {
  if (name == "pair-lines") return InputFormat::pair_lines;
  if (name == "per-user-adjacency") return InputFormat::per_user_adjacency;
  throw ConfigError("unknown input format '" + std::string(name) + "'");
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  auto is_sep = [](char c) { return c == ' ' || c == '\t' || c == ',' || c == '\r'; };
  while (i < line.size()) {
    while (i < line.size() && is_sep(line[i])) ++i;
    std::size_t j = i;
    while (j < line.size() && !is_sep(line[j])) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::uint32_t parse_index(std::string_view field, std::size_t line_no) {
  if (field.empty() || field.size() > 10) {
    throw ParseError("invalid index '" + std::string(field) + "'", line_no);
  }
  std::uint64_t v = 0;
  for (char c : field) {
    if (c < '0' || c > '9') {
      throw ParseError("invalid index '" + std::string(field) + "'", line_no);
    }
    v = v * 10 + static_cast<std::uint64_t>(c - '0');
  }
  if (v > 0xfffffffeULL) throw ParseError("index too large", line_no);
  return static_cast<std::uint32_t>(v);
}

// "# dims <num_users> <num_items>" declares the index spaces.
inline std::optional<std::pair<std::size_t, std::size_t>> parse_dims_header(
    std::string_view line, std::size_t line_no) {
  auto fields = split_fields(line.substr(1));
  if (fields.size() != 3 || fields[0] != "dims") return std::nullopt;
  return std::pair<std::size_t, std::size_t>{parse_index(fields[1], line_no),
                                             parse_index(fields[2], line_no)};
}

struct EdgeFile {
  std::vector<Edge> edges;
  std::optional<std::pair<std::size_t, std::size_t>> declared;
};

inline EdgeFile read_edge_file(const std::filesystem::path& path, InputFormat format) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());

  EdgeFile file;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view(line);
    if (!view.empty() && view.front() == '#') {
      if (!file.declared) file.declared = parse_dims_header(view, line_no);
      continue;
    }
    auto fields = split_fields(view);
    if (fields.empty()) continue;
    if (format == InputFormat::pair_lines && fields.size() != 2) {
      throw ParseError("expected 'user item', got " + std::to_string(fields.size()) +
                           " fields",
                       line_no);
    }
    const UserId u = parse_index(fields[0], line_no);
    for (std::size_t f = 1; f < fields.size(); ++f) {
      const ItemId i = parse_index(fields[f], line_no);
      if (file.declared && (u >= file.declared->first || i >= file.declared->second)) {
        throw ParseError("index outside declared range " +
                             std::to_string(file.declared->first) + " x " +
                             std::to_string(file.declared->second),
                         line_no);
      }
      file.edges.push_back({u, i});
    }
  }
  return file;
}

inline std::pair<std::size_t, std::size_t> extent(const EdgeFile& file) {
  if (file.declared) return *file.declared;
  std::size_t num_users = 0, num_items = 0;
  for (const auto& e : file.edges) {
    num_users = std::max<std::size_t>(num_users, e.user + 1);
    num_items = std::max<std::size_t>(num_items, e.item + 1);
  }
  return {num_users, num_items};
}

}  // namespace detail

// Reads a pair-lines or per-user-adjacency file. Every edge lands in the
// train split; duplicates are dropped with a warning.
inline InteractionDataset load_interactions(const std::filesystem::path& path,
                                            InputFormat format,
                                            std::vector<std::string>* warnings = nullptr) {
  auto file = detail::read_edge_file(path, format);
  if (file.edges.empty()) throw Error("no interactions in " + path.string());
  const auto [num_users, num_items] = detail::extent(file);
  const std::size_t raw = file.edges.size();
  InteractionDataset ds(num_users, num_items, std::move(file.edges), {});
  if (warnings && ds.train_edges().size() != raw) {
    warnings->push_back(path.string() + ": dropped " +
                        std::to_string(raw - ds.train_edges().size()) +
                        " duplicate interaction(s)");
  }
  return ds;
}

// Writes pair-lines with a dims header so empty trailing users/items survive.
inline void save_interactions(const std::filesystem::path& path, std::size_t num_users,
                              std::size_t num_items, const std::vector<Edge>& edges) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "# dims " << num_users << ' ' << num_items << '\n';
  for (const auto& e : edges) out << e.user << ' ' << e.item << '\n';
}

struct SplitManifest {
  std::optional<std::uint64_t> seed;
  std::optional<double> ratio;
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::size_t train_edges = 0;
  std::size_t test_edges = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json(nullptr);
    j["ratio"] = ratio ? nlohmann::json(*ratio) : nlohmann::json(nullptr);
    j["num_users"] = num_users;
    j["num_items"] = num_items;
    j["train_edges"] = train_edges;
    j["test_edges"] = test_edges;
    return j;
  }

  static SplitManifest describe(const InteractionDataset& ds) {
    SplitManifest m;
    m.num_users = ds.num_users();
    m.num_items = ds.num_items();
    m.train_edges = ds.train_edges().size();
    m.test_edges = ds.test_edges().size();
    return m;
  }
};

// Per-user random holdout: ceil(ratio * deg(u)) of u's train edges move to
// test, always leaving at least one train edge.
inline InteractionDataset split_holdout(const InteractionDataset& ds, double ratio,
                                        std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ConfigError("split ratio must lie in (0, 1), got " + std::to_string(ratio));
  }
  Rng rng(seed);
  std::vector<Edge> train;
  std::vector<Edge> test = ds.test_edges();
  for (UserId u = 0; u < ds.num_users(); ++u) {
    std::vector<ItemId> items = ds.train_items(u);
    const std::size_t deg = items.size();
    if (deg == 0) continue;
    std::size_t held = 0;
    if (deg > 1) {
      held = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(deg) - 1e-9));
      held = std::min(held, deg - 1);
      std::shuffle(items.begin(), items.end(), rng);
    }
    for (std::size_t k = 0; k < deg; ++k) {
      (k < held ? test : train).push_back({u, items[k]});
    }
  }
  return InteractionDataset(ds.num_users(), ds.num_items(), std::move(train), std::move(test));
}

// Canonical on-disk split: train.txt, test.txt, split_manifest.json.
inline void save_split(const std::filesystem::path& dir, const InteractionDataset& ds,
                       const SplitManifest& manifest) {
  std::filesystem::create_directories(dir);
  save_interactions(dir / "train.txt", ds.num_users(), ds.num_items(), ds.train_edges());
  save_interactions(dir / "test.txt", ds.num_users(), ds.num_items(), ds.test_edges());
  std::ofstream(dir / "split_manifest.json") << manifest.to_json().dump(2) << '\n';
}

inline InteractionDataset load_split(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw ConfigError("dataset directory not found: " + dir.string());
  }
  auto train = detail::read_edge_file(dir / "train.txt", InputFormat::pair_lines);
  if (train.edges.empty()) throw Error("no train interactions in " + dir.string());
  detail::EdgeFile test;
  if (std::filesystem::exists(dir / "test.txt")) {
    test = detail::read_edge_file(dir / "test.txt", InputFormat::pair_lines);
  }
  const auto [tr_users, tr_items] = detail::extent(train);
  const auto [te_users, te_items] = detail::extent(test);
  return InteractionDataset(std::max(tr_users, te_users), std::max(tr_items, te_items),
                            std::move(train.edges), std::move(test.edges));
}

struct Triple {
  UserId user;
  ItemId pos;
  ItemId neg;
  friend bool operator==(const Triple&, const Triple&) = default;
};

struct TrainBatch {
  std::vector<Triple> triples;
};

inline constexpr int kNegativeRetries = 100;

// (u, i) uniform over train edges; j uniform over items with rejection of
// u's train items, falling back to a linear scan after kNegativeRetries.
inline TrainBatch sample_batch(const InteractionDataset& ds, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  const auto& edges = ds.train_edges();
  if (edges.empty()) throw SamplingError("no train edges to sample from");

  std::uniform_int_distribution<std::size_t> pick_edge(0, edges.size() - 1);
  std::uniform_int_distribution<ItemId> pick_item(0, static_cast<ItemId>(ds.num_items() - 1));
  TrainBatch batch;
  batch.triples.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const Edge& e = edges[pick_edge(rng)];
    std::optional<ItemId> neg;
    for (int attempt = 0; attempt < kNegativeRetries && !neg; ++attempt) {
      const ItemId j = pick_item(rng);
      if (!ds.is_train_pair(e.user, j)) neg = j;
    }
    if (!neg) {
      for (ItemId j = 0; j < ds.num_items(); ++j) {
        if (!ds.is_train_pair(e.user, j)) {
          neg = j;
          break;
        }
      }
    }
    if (!neg) {
      throw SamplingError("user " + std::to_string(e.user) +
                          " has interacted with every item; no valid negative");
    }
    batch.triples.push_back({e.user, e.item, *neg});
  }
  return batch;
}

// Clustered synthetic interactions with power-law item popularity. Each user
// draws most items from a small set of preferred topics so the data carries
// low-rank structure a factor model can learn.
struct SyntheticSpec {
  std::size_t num_users = 943;
  std::size_t num_items = 1682;
  std::size_t interactions = 100000;
  double popularity_exponent = 0.8;
  std::size_t topics = 48;
  std::size_t topics_per_user = 3;
  double off_topic = 0.1;
  std::size_t min_degree = 5;
};

inline InteractionDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.num_users == 0 || spec.num_items == 0 || spec.topics == 0) {
    throw ConfigError("synthetic dataset needs users, items and topics");
  }
  if (spec.interactions > spec.num_users * spec.num_items / 2) {
    throw ConfigError("requested interactions exceed half the user-item grid");
  }
  Rng rng(seed);

  // Popularity weight by a shuffled rank.
  std::vector<std::size_t> rank(spec.num_items);
  std::iota(rank.begin(), rank.end(), 1);
  std::shuffle(rank.begin(), rank.end(), rng);
  std::vector<double> weight(spec.num_items);
  for (std::size_t i = 0; i < spec.num_items; ++i) {
    weight[i] = std::pow(static_cast<double>(rank[i]), -spec.popularity_exponent);
  }

  std::uniform_int_distribution<std::size_t> pick_topic(0, spec.topics - 1);
  std::vector<std::vector<ItemId>> topic_items(spec.topics);
  for (ItemId i = 0; i < spec.num_items; ++i) topic_items[pick_topic(rng)].push_back(i);
  std::vector<std::discrete_distribution<std::size_t>> within_topic;
  for (const auto& items : topic_items) {
    std::vector<double> w;
    for (ItemId i : items) w.push_back(weight[i]);
    if (w.empty()) w.push_back(1.0);
    within_topic.emplace_back(w.begin(), w.end());
  }
  std::discrete_distribution<std::size_t> any_item(weight.begin(), weight.end());

  // Heavy-tailed user activity, normalized to the requested total.
  std::vector<double> activity(spec.num_users);
  std::lognormal_distribution<double> act(0.0, 0.8);
  for (auto& a : activity) a = act(rng);
  const double total_act = std::accumulate(activity.begin(), activity.end(), 0.0);
  const std::size_t spare = spec.interactions - std::min(spec.interactions,
                                                         spec.min_degree * spec.num_users);

  std::bernoulli_distribution stray(spec.off_topic);
  std::vector<Edge> edges;
  edges.reserve(spec.interactions);
  for (UserId u = 0; u < spec.num_users; ++u) {
    std::size_t deg = spec.min_degree +
                      static_cast<std::size_t>(std::round(activity[u] / total_act * spare));
    deg = std::min(deg, spec.num_items / 2);
    std::vector<std::size_t> prefs;
    for (std::size_t k = 0; k < spec.topics_per_user; ++k) {
      std::size_t t = pick_topic(rng);
      if (topic_items[t].empty()) continue;
      prefs.push_back(t);
    }
    std::uniform_int_distribution<std::size_t> pick_pref(0, prefs.empty() ? 0 : prefs.size() - 1);
    std::vector<ItemId> chosen;
    std::size_t guard = 0;
    while (chosen.size() < deg && guard++ < deg * 50) {
      ItemId i;
      if (prefs.empty() || stray(rng)) {
        i = static_cast<ItemId>(any_item(rng));
      } else {
        const std::size_t t = prefs[pick_pref(rng)];
        i = topic_items[t][within_topic[t](rng)];
      }
      if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) chosen.push_back(i);
    }
    for (ItemId i : chosen) edges.push_back({u, i});
  }
  return InteractionDataset(spec.num_users, spec.num_items, std::move(edges), {});
}

}  // namespace dslrec
