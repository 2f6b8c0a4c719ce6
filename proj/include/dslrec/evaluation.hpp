#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dslrec/common.hpp"
#include "dslrec/dataset.hpp"
#include "dslrec/embedding.hpp"
#include "dslrec/models.hpp"

namespace dslrec {

struct MetricsReport {
  std::size_t k = 0;
  double recall = 0.0;
  double ndcg = 0.0;
  double hr = 0.0;
  std::size_t users_evaluated = 0;
};

// Top-k item ids by descending score, ties to the lower id, skipping the
// sorted `excluded` ids.
inline std::vector<ItemId> top_k(std::span<const Real> scores, std::span<const ItemId> excluded,
                                 std::size_t k) {
  std::vector<ItemId> cand;
  cand.reserve(scores.size());
  for (ItemId i = 0; i < scores.size(); ++i) {
    if (!std::binary_search(excluded.begin(), excluded.end(), i)) cand.push_back(i);
  }
  const auto before = [&](ItemId a, ItemId b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  k = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                    before);
  cand.resize(k);
  return cand;
}

struct UserMetrics {
  double recall = 0.0;
  double ndcg = 0.0;
  double hr = 0.0;
};

// `relevant` must be sorted.
inline UserMetrics user_metrics(std::span<const ItemId> ranked, std::span<const ItemId> relevant,
                                std::size_t k) {
  UserMetrics m;
  if (relevant.empty()) return m;
  std::size_t hits = 0;
  double dcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
    if (std::binary_search(relevant.begin(), relevant.end(), ranked[r])) {
      ++hits;
      dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
  }
  double idcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, relevant.size()); ++r) {
    idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  }
  m.recall = static_cast<double>(hits) / static_cast<double>(relevant.size());
  m.hr = hits > 0 ? 1.0 : 0.0;
  m.ndcg = dcg / idcg;
  return m;
}

// Full-ranking Recall@k / NDCG@k / HR@k over users with test items. Scores
// come from the masked table; each user's train items are excluded.
inline MetricsReport evaluate(const Backbone& cfg, const EmbeddingTable& table,
                              const SparseMask& mask, const InteractionDataset& ds,
                              std::size_t k) {
  if (k == 0) throw ConfigError("cutoff k must be at least 1");
  if (table.num_users != ds.num_users() || table.num_items != ds.num_items()) {
    throw ConfigError("table does not match dataset");
  }
  const auto masked = masked_copy(table, mask);
  const Matrix f = final_embeddings(cfg, masked.weights);
  const auto users = f.topRows(static_cast<Eigen::Index>(ds.num_users()));
  const Matrix items_t =
      f.bottomRows(static_cast<Eigen::Index>(ds.num_items())).transpose();

  MetricsReport report;
  report.k = k;
  std::vector<UserId> eval_users;
  for (UserId u = 0; u < ds.num_users(); ++u)
    if (!ds.test_items(u).empty()) eval_users.push_back(u);

  constexpr std::size_t block = 256;
  Matrix scores;
  Matrix ublock;
  for (std::size_t b0 = 0; b0 < eval_users.size(); b0 += block) {
    const std::size_t nb = std::min(block, eval_users.size() - b0);
    ublock.resize(static_cast<Eigen::Index>(nb), f.cols());
    for (std::size_t r = 0; r < nb; ++r)
      ublock.row(static_cast<Eigen::Index>(r)) = users.row(eval_users[b0 + r]);
    scores.noalias() = ublock * items_t;
    for (std::size_t r = 0; r < nb; ++r) {
      const UserId u = eval_users[b0 + r];
      const Real* row = scores.data() + r * ds.num_items();
      const auto ranked = top_k({row, ds.num_items()}, ds.train_items(u), k);
      const auto m = user_metrics(ranked, ds.test_items(u), k);
      report.recall += m.recall;
      report.ndcg += m.ndcg;
      report.hr += m.hr;
    }
  }
  report.users_evaluated = eval_users.size();
  if (report.users_evaluated > 0) {
    const double n = static_cast<double>(report.users_evaluated);
    report.recall /= n;
    report.ndcg /= n;
    report.hr /= n;
  }
  return report;
}

enum class Side { users, items };

inline std::string_view to_string(Side s) { return s == Side::users ? "users" : "items"; }

struct SparsityGroup {
  std::size_t group_id = 0;
  std::size_t size = 0;
  double mean_popularity = 0.0;
  double mean_sparsity = 0.0;
};

struct SparsityProfile {
  Side side = Side::items;
  std::vector<SparsityGroup> groups;
};

// Entities sorted by ascending train interaction count (ties by id), cut
// into near-equal groups; each group reports mean per-row sparsity.
inline SparsityProfile sparsity_profile(const SparseMask& mask, const InteractionDataset& ds,
                                        Side side, std::size_t num_groups) {
  const std::size_t population = side == Side::users ? ds.num_users() : ds.num_items();
  if (num_groups == 0 || num_groups > population) {
    throw ConfigError("group count must lie in [1, " + std::to_string(population) + "]");
  }
  if (mask.rows() != ds.num_nodes()) throw ConfigError("mask does not match dataset");
  const auto degree = side == Side::users ? ds.user_degrees() : ds.item_degrees();
  const std::size_t offset = side == Side::users ? 0 : ds.num_users();

  std::vector<std::size_t> order(population);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return degree[a] < degree[b]; });

  SparsityProfile profile;
  profile.side = side;
  const double d = static_cast<double>(mask.cols());
  for (std::size_t g = 0; g < num_groups; ++g) {
    const std::size_t lo = g * population / num_groups;
    const std::size_t hi = (g + 1) * population / num_groups;
    SparsityGroup grp;
    grp.group_id = g;
    grp.size = hi - lo;
    for (std::size_t r = lo; r < hi; ++r) {
      const std::size_t e = order[r];
      grp.mean_popularity += static_cast<double>(degree[e]);
      grp.mean_sparsity += 1.0 - static_cast<double>(mask.row_active(offset + e)) / d;
    }
    grp.mean_popularity /= static_cast<double>(grp.size);
    grp.mean_sparsity /= static_cast<double>(grp.size);
    profile.groups.push_back(grp);
  }
  return profile;
}

namespace detail {

inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace detail

// Spearman rank correlation with average ranks for ties; nullopt when either
// side is constant.
inline std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) return std::nullopt;
  const auto rx = detail::average_ranks(x);
  const auto ry = detail::average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

// Correlation between group popularity rank and group mean sparsity.
inline std::optional<double> popularity_sparsity_correlation(const SparsityProfile& p) {
  std::vector<double> rank, sparsity;
  for (const auto& g : p.groups) {
    rank.push_back(static_cast<double>(g.group_id));
    sparsity.push_back(g.mean_sparsity);
  }
  return spearman(rank, sparsity);
}

}  // namespace dslrec
