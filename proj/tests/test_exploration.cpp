#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "dslrec/exploration.hpp"
#include "oracles.hpp"

using namespace dslrec;

namespace {

ExplorationSchedule schedule(double rho0, std::size_t dt, std::size_t t_end,
                             Decay decay = Decay::cosine) {
  ExplorationSchedule s;
  s.rho0 = rho0;
  s.delta_t = dt;
  s.t_end = t_end;
  s.decay = decay;
  return s;
}

// Table of one row per value, one column.
EmbeddingTable column(std::initializer_list<Real> values) {
  EmbeddingTable t(values.size(), 0, 1);
  Eigen::Index r = 0;
  for (Real v : values) t.weights(r++, 0) = v;
  return t;
}

}  // namespace

TEST(UpdateRatio, CosineValues) {
  EXPECT_DOUBLE_EQ(update_ratio(schedule(0.3, 10, 100), 0), 0.3);
  EXPECT_NEAR(update_ratio(schedule(0.3, 10, 100), 100), 0.0, 1e-15);
  EXPECT_NEAR(update_ratio(schedule(0.5, 10, 100), 50), 0.25, 1e-15);
}

TEST(UpdateRatio, LinearAndNone) {
  EXPECT_DOUBLE_EQ(update_ratio(schedule(0.4, 10, 100, Decay::linear), 25), 0.3);
  EXPECT_DOUBLE_EQ(update_ratio(schedule(0.4, 10, 100, Decay::linear), 100), 0.0);
  EXPECT_DOUBLE_EQ(update_ratio(schedule(0.4, 10, 100, Decay::none), 73), 0.4);
}

TEST(UpdateRatio, BeyondEndIsAnError) {
  EXPECT_THROW(update_ratio(schedule(0.3, 10, 100), 101), ConfigError);
}

TEST(UpdateRatio, PropertyNonincreasing) {
  std::mt19937_64 g(1);
  std::uniform_real_distribution<double> rho(0.0, 0.99);
  std::uniform_int_distribution<std::size_t> len(1, 500);
  for (int trial = 0; trial < 100; ++trial) {
    for (auto d : {Decay::cosine, Decay::linear}) {
      auto s = schedule(rho(g), 1, len(g), d);
      for (std::size_t t = 0; t < s.t_end; ++t) {
        ASSERT_LE(update_ratio(s, t + 1), update_ratio(s, t)) << t;
      }
      EXPECT_NEAR(update_ratio(s, s.t_end), 0.0, 1e-15);
    }
  }
}

TEST(Schedule, Validation) {
  EXPECT_NO_THROW(schedule(0.0, 5, 10).validate());
  EXPECT_NO_THROW(schedule(0.3, 50, 10).validate());
  EXPECT_THROW(schedule(1.0, 5, 10).validate(), ConfigError);
  EXPECT_THROW(schedule(0.3, 0, 10).validate(), ConfigError);
  EXPECT_THROW(schedule(0.3, 5, 0).validate(), ConfigError);
  EXPECT_THROW(parse_decay("step"), ConfigError);
}

TEST(Schedule, FiresStrictlyInside) {
  auto s = schedule(0.3, 5, 20);
  std::vector<std::size_t> fired;
  for (std::size_t t = 0; t <= 25; ++t)
    if (s.fires_at(t)) fired.push_back(t);
  EXPECT_EQ(fired, (std::vector<std::size_t>{5, 10, 15}));
  EXPECT_FALSE(schedule(0.3, 50, 20).fires_at(50));
}

TEST(SelectPrune, SmallestTwo) {
  auto t = column({0.9, -0.5, 0.1, -0.05});
  auto mask = SparseMask::dense(4, 1);
  EXPECT_EQ(select_prune(t, mask, 0.5), (std::vector<Position>{2, 3}));
  EXPECT_TRUE(select_prune(t, mask, 0.0).empty());
}

TEST(SelectPrune, TieGoesToLowestIndex) {
  auto t = column({0.7, 0.7, 0.7, 0.7});
  EXPECT_EQ(select_prune(t, SparseMask::dense(4, 1), 0.25), (std::vector<Position>{0}));
}

TEST(SelectPrune, IgnoresInactive) {
  auto t = column({0.0, 0.9, 0.0, 0.2});
  SparseMask mask(4, 1, 0.5);
  mask.set(1);
  mask.set(3);
  EXPECT_EQ(select_prune(t, mask, 0.5), (std::vector<Position>{3}));
}

TEST(SelectGrow, Argmax) {
  SparseMask mask(4, 1, 0.25);
  mask.set(0);
  Matrix g(4, 1);
  g << 9.0, 0.8, -0.2, 0.0;
  EXPECT_EQ(select_grow(g, mask, 1), (std::vector<Position>{1}));
  EXPECT_TRUE(select_grow(g, mask, 0).empty());
}

TEST(SelectGrow, ZeroGradientsTakeLowestIndices) {
  SparseMask mask(5, 1, 0.0);
  mask.set(1);
  EXPECT_EQ(select_grow(Matrix::Zero(5, 1), mask, 2), (std::vector<Position>{0, 2}));
}

TEST(SelectGrow, ExcludedPositionsNeverChosen) {
  SparseMask mask(4, 1, 0.0);
  Matrix g(4, 1);
  g << 5.0, 4.0, 3.0, 2.0;
  const std::vector<Position> excluded{0, 2};
  EXPECT_EQ(select_grow(g, mask, 2, excluded), (std::vector<Position>{1, 3}));
  EXPECT_THROW(select_grow(g, mask, 3, excluded), ConfigError);
}

TEST(SelectGrow, NonFiniteCandidate) {
  SparseMask mask(2, 1, 0.0);
  Matrix g(2, 1);
  g << 1.0, std::numeric_limits<double>::infinity();
  EXPECT_THROW(select_grow(g, mask, 1), NumericError);
}

TEST(OneShotPrune, TopHalf) {
  auto t = column({4.0, -3.0, 2.0, 1.0});
  auto mask = one_shot_magnitude_prune(t, 0.5);
  EXPECT_EQ(mask.active_positions(), (std::vector<Position>{0, 1}));
  EXPECT_EQ(one_shot_magnitude_prune(t, 0.0).popcount(), 4u);
}

TEST(OneShotPrune, PropertyMatchesSortOracle) {
  std::mt19937_64 g(2);
  std::uniform_real_distribution<double> s(0.0, 0.95);
  for (int trial = 0; trial < 200; ++trial) {
    EmbeddingTable t(7, 6, 4);
    if (trial % 2) {
      gen::fill_with_ties(g, t.weights.data(), t.size(), 3);
    } else {
      t.weights = gen::normal_matrix(g, 13, 4);
    }
    const double sp = s(g);
    EXPECT_EQ(one_shot_magnitude_prune(t, sp).active_positions(), oracle::magnitude_keep(t, sp));
  }
}

TEST(SelectionOracle, RandomTenByEight) {
  std::mt19937_64 g(3);
  std::uniform_real_distribution<double> rho(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    EmbeddingTable t(4, 6, 8);
    gen::fill_with_ties(g, t.weights.data(), t.size(), trial % 3 == 0 ? 2 : 50);
    auto mask = gen::random_mask(g, 10, 8, 0.5);
    const double r = rho(g);
    const auto pruned = select_prune(t, mask, r);
    ASSERT_EQ(pruned, oracle::prune(t, mask, r));

    Matrix grad(10, 8);
    gen::fill_with_ties(g, grad.data(), 80, trial % 2 ? 2 : 50);
    std::uniform_int_distribution<std::size_t> kk(0, mask.inactive_count());
    const auto k = kk(g);
    ASSERT_EQ(select_grow(grad, mask, k), oracle::grow(grad, mask, k, {}));
  }
}

TEST(ExplorationStep, ZeroRatioIsNoOp) {
  std::mt19937_64 g(4);
  EmbeddingTable t(5, 5, 4);
  t.weights = gen::normal_matrix(g, 10, 4);
  Rng rng(1);
  auto mask = random_prune_once(t, 0.5, rng);
  const auto before = mask;
  OptimizerState opt(OptimizerConfig{}, 10, 4);
  auto ev = exploration_step(t, mask, opt, schedule(0.0, 5, 50), 10,
                             [&](const EmbeddingTable&, const SparseMask&) {
                               return gen::normal_matrix(g, 10, 4);
                             });
  EXPECT_TRUE(ev.pruned.empty());
  EXPECT_TRUE(ev.grown.empty());
  EXPECT_EQ(mask, before);
}

TEST(ExplorationStep, RejectsOffScheduleIteration) {
  EmbeddingTable t(2, 2, 2);
  auto mask = SparseMask::dense(4, 2);
  OptimizerState opt(OptimizerConfig{}, 4, 2);
  auto grad = [](const EmbeddingTable&, const SparseMask&) { return Matrix(Matrix::Zero(4, 2)); };
  EXPECT_THROW(exploration_step(t, mask, opt, schedule(0.3, 5, 50), 7, grad), ConfigError);
  EXPECT_THROW(exploration_step(t, mask, opt, schedule(0.3, 5, 50), 50, grad), ConfigError);
}

// Budget, partition and reset properties on random tables, with the grown
// set checked against the sort oracle applied to the post-prune state.
TEST(ExplorationStep, PropertyInvariantsAndOracle) {
  std::mt19937_64 g(5);
  std::uniform_real_distribution<double> rho0(0.0, 0.99), sp(0.05, 0.95);
  for (int trial = 0; trial < 300; ++trial) {
    EmbeddingTable t(6, 4, 8);
    t.weights = gen::normal_matrix(g, 10, 8);
    if (trial % 4 == 0) gen::fill_with_ties(g, t.weights.data(), t.size(), 2);
    Rng rng(trial);
    const double s = sp(g);
    auto mask = random_prune_once(t, s, rng);
    OptimizerState opt(OptimizerConfig{}, 10, 8);
    masked_step(t, gen::normal_matrix(g, 10, 8), mask, opt);

    const auto before = mask;
    const auto sched = schedule(rho0(g), 3, 30, Decay::cosine);
    const double rho = update_ratio(sched, 9);
    const auto wanted = static_cast<std::size_t>(std::floor(rho * static_cast<double>(mask.popcount())));
    const auto expect_pruned =
        oracle::smallest_active(t, mask, std::min(wanted, mask.inactive_count()));

    Matrix grad(10, 8);
    gen::fill_with_ties(g, grad.data(), 80, trial % 2 ? 3 : 100);
    SparseMask seen_mask;
    auto ev = exploration_step(t, mask, opt, sched, 9,
                               [&](const EmbeddingTable& tab, const SparseMask& m) {
                                 seen_mask = m;
                                 for (Position p : expect_pruned) EXPECT_EQ(tab.at(p), 0.0);
                                 return grad;
                               });
    ASSERT_EQ(ev.pruned, expect_pruned);
    ASSERT_EQ(ev.grown, oracle::grow(grad, seen_mask, ev.pruned.size(), ev.pruned));
    ASSERT_EQ(ev.pruned.size(), ev.grown.size());
    ASSERT_EQ(mask.popcount(), active_budget(80, s));
    ASSERT_EQ(mask.popcount(), before.popcount());
    for (Position p : ev.grown) {
      ASSERT_FALSE(before.test(p));
      ASSERT_EQ(t.at(p), 0.0);
      ASSERT_EQ(opt.first(p), 0.0);
      ASSERT_EQ(opt.second(p), 0.0);
    }
    for (Position p : ev.pruned) {
      ASSERT_TRUE(before.test(p));
      ASSERT_FALSE(mask.test(p));
      ASSERT_EQ(t.at(p), 0.0);
    }
    // Survivors of the old active set are exactly the unpruned ones.
    for (Position p = 0; p < 80; ++p) {
      const bool was = before.test(p);
      const bool pruned = std::binary_search(ev.pruned.begin(), ev.pruned.end(), p);
      const bool grown = std::binary_search(ev.grown.begin(), ev.grown.end(), p);
      ASSERT_EQ(mask.test(p), (was && !pruned) || grown);
      if (!mask.test(p)) ASSERT_EQ(t.at(p), 0.0);
    }
  }
}

TEST(ExplorationStep, RestoresStateWhenGradientFails) {
  std::mt19937_64 g(6);
  EmbeddingTable t(5, 5, 4);
  t.weights = gen::normal_matrix(g, 10, 4);
  Rng rng(1);
  auto mask = random_prune_once(t, 0.5, rng);
  OptimizerState opt(OptimizerConfig{}, 10, 4);
  masked_step(t, gen::normal_matrix(g, 10, 4), mask, opt);
  const auto t0 = t.weights;
  const auto m0 = mask;
  const Matrix first = opt.first_moment(), second = opt.second_moment();
  EXPECT_THROW(exploration_step(t, mask, opt, schedule(0.5, 5, 50), 5,
                                [](const EmbeddingTable&, const SparseMask&) -> Matrix {
                                  throw NumericError("boom");
                                }),
               NumericError);
  EXPECT_EQ(t.weights, t0);
  EXPECT_EQ(mask, m0);
  EXPECT_EQ(opt.first_moment(), first);
  EXPECT_EQ(opt.second_moment(), second);
}

TEST(ExplorationStep, NearlyDenseCapsAtInactiveCount) {
  std::mt19937_64 g(7);
  EmbeddingTable t(5, 5, 4);
  t.weights = gen::normal_matrix(g, 10, 4);
  Rng rng(1);
  auto mask = random_prune_once(t, 0.05, rng);  // 38 active, 2 inactive
  OptimizerState opt(OptimizerConfig{}, 10, 4);
  auto ev = exploration_step(t, mask, opt, schedule(0.9, 1, 100), 1,
                             [&](const EmbeddingTable&, const SparseMask&) {
                               return gen::normal_matrix(g, 10, 4);
                             });
  EXPECT_EQ(ev.pruned.size(), 2u);
  EXPECT_EQ(ev.grown.size(), 2u);
  EXPECT_EQ(mask.popcount(), 38u);
}

TEST(RandomPrune, AppliesMaskAndDiffersAcrossSeeds) {
  EmbeddingTable t(60, 40, 8);
  t.weights.setOnes();
  Rng a(1), b(2);
  auto copy = t;
  auto ma = random_prune_once(t, 0.5, a);
  auto mb = random_prune_once(copy, 0.5, b);
  EXPECT_EQ(ma.popcount(), 400u);
  EXPECT_EQ(static_cast<std::size_t>(t.weights.sum()), 400u);
  EXPECT_FALSE(ma == mb);
}

TEST(ExplorationEvent, JsonCountsOrLists) {
  ExplorationEvent ev{10, 0.25, {1, 2}, {5, 6}, 0.5};
  EXPECT_EQ(ev.to_json()["pruned"], 2);
  EXPECT_EQ(ev.to_json(true)["grown"], nlohmann::json({5, 6}));
}
