#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "dslrec/evaluation.hpp"
#include "oracles.hpp"

using namespace dslrec;

namespace {

std::vector<int> gains_of(const std::vector<ItemId>& ranked, const std::vector<ItemId>& rel) {
  std::vector<int> g;
  for (auto i : ranked) g.push_back(std::find(rel.begin(), rel.end(), i) != rel.end());
  return g;
}

}  // namespace

TEST(UserMetrics, PerfectHit) {
  const std::vector<ItemId> ranked{4, 1, 2}, rel{4};
  auto m = user_metrics(ranked, rel, 3);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.hr, 1.0);
  EXPECT_DOUBLE_EQ(m.ndcg, 1.0);
}

TEST(UserMetrics, TotalMiss) {
  const std::vector<ItemId> ranked{4, 1, 2, 9}, rel{9};
  auto m = user_metrics(ranked, rel, 3);
  EXPECT_EQ(m.recall, 0.0);
  EXPECT_EQ(m.hr, 0.0);
  EXPECT_EQ(m.ndcg, 0.0);
}

TEST(UserMetrics, TwoRelevantAtRanksOneAndThree) {
  const std::vector<ItemId> ranked{5, 6, 7}, rel{5, 7};
  auto m = user_metrics(ranked, rel, 3);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_NEAR(m.ndcg, 1.5 / (1.0 + 1.0 / std::log2(3.0)), 1e-15);
  EXPECT_NEAR(m.ndcg, 0.9197, 5e-5);
  EXPECT_NEAR(m.ndcg, oracle::ndcg({1, 0, 1}, 3), 1e-15);
}

TEST(TopK, ExcludesAndBreaksTiesByLowerId) {
  const std::vector<Real> scores{0.5, 0.9, 0.9, 0.1, 0.9};
  const std::vector<ItemId> excluded{2};
  EXPECT_EQ(top_k(scores, excluded, 3), (std::vector<ItemId>{1, 4, 0}));
}

TEST(TopK, PropertyMatchesFullSort) {
  std::mt19937_64 g(1);
  std::uniform_int_distribution<int> level(0, 4);
  std::bernoulli_distribution excl(0.2);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Real> scores(30);
    for (auto& s : scores) s = trial % 2 ? level(g) : std::normal_distribution<double>()(g);
    std::vector<ItemId> excluded;
    for (ItemId i = 0; i < 30; ++i)
      if (excl(g)) excluded.push_back(i);
    const std::size_t k = 1 + static_cast<std::size_t>(trial % 35);
    auto want = oracle::ranking(scores, excluded);
    want.resize(std::min(k, want.size()));
    const auto got = top_k(scores, excluded, k);
    ASSERT_EQ(got, want);
    for (auto i : got) ASSERT_FALSE(std::binary_search(excluded.begin(), excluded.end(), i));
  }
}

TEST(UserMetrics, PropertyNdcgMatchesOracle) {
  std::mt19937_64 g(2);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Real> scores(25);
    for (auto& s : scores) s = std::normal_distribution<double>()(g);
    std::vector<ItemId> rel;
    for (ItemId i = 0; i < 25; ++i)
      if (std::bernoulli_distribution(0.15)(g)) rel.push_back(i);
    if (rel.empty()) rel.push_back(3);
    const std::size_t k = 1 + static_cast<std::size_t>(trial % 25);
    const auto full = oracle::ranking(scores, {});
    const auto ranked = top_k(scores, {}, k);
    const auto m = user_metrics(ranked, rel, k);
    EXPECT_NEAR(m.ndcg, oracle::ndcg(gains_of(full, rel), k), 1e-12);
  }
}

TEST(Evaluate, MonotoneTransformInvariance) {
  // MF scores are bilinear, so scaling every item row by c > 0 maps each
  // score x to c*x; rankings and all three metrics are unchanged.
  std::mt19937_64 g(3);
  auto full = gen::graph(g, 20, 30, 0.3);
  auto ds = split_holdout(full, 0.3, 1);
  EmbeddingTable t(20, 30, 6);
  t.weights = gen::normal_matrix(g, 50, 6);
  const auto mask = SparseMask::dense(50, 6);
  const auto a = evaluate(Backbone::mf(), t, mask, ds, 5);
  t.weights.bottomRows(30) *= 3.7;
  const auto b = evaluate(Backbone::mf(), t, mask, ds, 5);
  EXPECT_DOUBLE_EQ(a.recall, b.recall);
  EXPECT_DOUBLE_EQ(a.ndcg, b.ndcg);
  EXPECT_DOUBLE_EQ(a.hr, b.hr);
}

TEST(Evaluate, RecallAtAllItemsIsOne) {
  std::mt19937_64 g(4);
  auto ds = split_holdout(gen::graph(g, 15, 20, 0.35), 0.3, 2);
  EmbeddingTable t(15, 20, 4);
  t.weights = gen::normal_matrix(g, 35, 4);
  const auto r = evaluate(Backbone::mf(), t, SparseMask::dense(35, 4), ds, 20);
  EXPECT_GT(r.users_evaluated, 0u);
  EXPECT_DOUBLE_EQ(r.recall, 1.0);
  EXPECT_DOUBLE_EQ(r.hr, 1.0);
}

// Per-user brute force over the propagated, masked table.
TEST(Evaluate, MatchesBruteForce) {
  std::mt19937_64 g(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto ds = split_holdout(gen::graph(g, 12, 18, 0.35), 0.25, trial);
    EmbeddingTable t(12, 18, 4);
    t.weights = gen::normal_matrix(g, 30, 4);
    auto mask = gen::random_mask(g, 30, 4, 0.6);
    const auto cfg = Backbone::lightgcn(ds, 2);
    const std::size_t k = 5;
    const auto got = evaluate(cfg, t, mask, ds, k);

    Matrix w = t.weights;
    for (Position p = 0; p < mask.size(); ++p)
      if (!mask.test(p)) w.data()[p] = 0.0;
    const Eigen::MatrixXd f = oracle::propagate(oracle::dense_adjacency(ds), w, 2);
    double recall = 0, ndcg = 0, hr = 0;
    std::size_t users = 0;
    for (UserId u = 0; u < 12; ++u) {
      const auto& rel = ds.test_items(u);
      if (rel.empty()) continue;
      ++users;
      std::vector<double> scores(18);
      for (ItemId i = 0; i < 18; ++i) scores[i] = f.row(u).dot(f.row(12 + i));
      auto ranked = oracle::ranking(scores, ds.train_items(u));
      std::vector<ItemId> top(ranked.begin(), ranked.begin() + std::min(k, ranked.size()));
      std::size_t hits = 0;
      for (auto i : top) hits += std::count(rel.begin(), rel.end(), i);
      recall += static_cast<double>(hits) / static_cast<double>(rel.size());
      hr += hits > 0;
      ndcg += oracle::ndcg(gains_of(ranked, rel), k);
    }
    EXPECT_EQ(got.users_evaluated, users);
    EXPECT_NEAR(got.recall, recall / users, 1e-12);
    EXPECT_NEAR(got.ndcg, ndcg / users, 1e-12);
    EXPECT_NEAR(got.hr, hr / users, 1e-12);
  }
}

TEST(Evaluate, RejectsZeroCutoff) {
  InteractionDataset ds(1, 2, {{0, 0}}, {{0, 1}});
  EmbeddingTable t(1, 2, 2);
  EXPECT_THROW(evaluate(Backbone::mf(), t, SparseMask::dense(3, 2), ds, 0), ConfigError);
}

namespace {

// Users 0..n-1 with degree u+1 over n items.
InteractionDataset staircase(std::size_t n) {
  std::vector<Edge> edges;
  for (UserId u = 0; u < n; ++u)
    for (ItemId i = 0; i <= u; ++i) edges.push_back({u, i});
  return {n, n, edges, {}};
}

}  // namespace

TEST(SparsityProfile, DenseMaskIsAllZero) {
  auto ds = staircase(20);
  auto p = sparsity_profile(SparseMask::dense(40, 8), ds, Side::users, 5);
  ASSERT_EQ(p.groups.size(), 5u);
  for (const auto& grp : p.groups) EXPECT_EQ(grp.mean_sparsity, 0.0);
  EXPECT_FALSE(popularity_sparsity_correlation(p).has_value());
}

TEST(SparsityProfile, MonotoneConstruction) {
  auto ds = staircase(20);
  // User u keeps round(u/19 * 8) of 8 columns: more popular, denser.
  SparseMask mask(40, 8, 0.5);
  for (std::size_t u = 0; u < 20; ++u) {
    const auto keep = static_cast<std::size_t>(std::lround(8.0 * static_cast<double>(u) / 19.0));
    for (std::size_t c = 0; c < keep; ++c) mask.set(u * 8 + c);
  }
  auto p = sparsity_profile(mask, ds, Side::users, 4);
  for (std::size_t k = 1; k < p.groups.size(); ++k) {
    EXPECT_LT(p.groups[k].mean_sparsity, p.groups[k - 1].mean_sparsity);
    EXPECT_GT(p.groups[k].mean_popularity, p.groups[k - 1].mean_popularity);
  }
  auto rho = popularity_sparsity_correlation(p);
  ASSERT_TRUE(rho.has_value());
  EXPECT_DOUBLE_EQ(*rho, -1.0);
}

TEST(SparsityProfile, UniformMaskNearHalf) {
  std::mt19937_64 g(6);
  auto ds = gen::graph(g, 400, 300, 0.05);
  const std::size_t d = 16;
  Rng rng(7);
  auto mask = init_mask(700, d, 0.5, rng);
  auto p = sparsity_profile(mask, ds, Side::items, 10);
  for (const auto& grp : p.groups) {
    // Binomial sd of a group mean over size*d positions.
    const double sd = std::sqrt(0.25 / static_cast<double>(grp.size * d));
    EXPECT_NEAR(grp.mean_sparsity, 0.5, 3.0 * sd);
  }
  auto rho = popularity_sparsity_correlation(p);
  ASSERT_TRUE(rho.has_value());
  EXPECT_LT(std::fabs(*rho), 1.0);
}

TEST(SparsityProfile, GroupCountBounds) {
  auto ds = staircase(5);
  EXPECT_THROW(sparsity_profile(SparseMask::dense(10, 2), ds, Side::users, 0), ConfigError);
  EXPECT_THROW(sparsity_profile(SparseMask::dense(10, 2), ds, Side::users, 6), ConfigError);
  auto p = sparsity_profile(SparseMask::dense(10, 2), ds, Side::users, 3);
  std::size_t total = 0;
  for (const auto& grp : p.groups) total += grp.size;
  EXPECT_EQ(total, 5u);
}

TEST(Spearman, HandComputedWithTies) {
  // x ranks 1,2,3,4; y = {1, 2, 2, 3} ranks 1, 2.5, 2.5, 4.
  const std::vector<double> x{10, 20, 30, 40}, y{1, 2, 2, 3};
  const double mx = 2.5;
  const std::vector<double> rx{1, 2, 3, 4}, ry{1, 2.5, 2.5, 4};
  double sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 4; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - mx);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - mx) * (ry[i] - mx);
  }
  EXPECT_NEAR(*spearman(x, y), sxy / std::sqrt(sxx * syy), 1e-15);
  EXPECT_FALSE(spearman(x, std::vector<double>{1, 1, 1, 1}).has_value());
}

TEST(Spearman, RandomMaskCorrelationIsSmall) {
  // Over many random masks the typical |rho| over 10 groups stays below 0.5.
  std::mt19937_64 g(8);
  auto ds = gen::graph(g, 300, 500, 0.03);
  int small = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(trial);
    auto p = sparsity_profile(init_mask(800, 32, 0.5, rng), ds, Side::items, 10);
    auto rho = popularity_sparsity_correlation(p);
    ASSERT_TRUE(rho.has_value());
    small += std::fabs(*rho) < 0.5;
  }
  EXPECT_GE(small, 40);
}
