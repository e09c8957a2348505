#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "collab/environment.hpp"
#include "collab/params.hpp"
#include "collab/recommender.hpp"
#include "oracles.hpp"

using namespace collab;

namespace {

ModelParams noiseless(std::size_t n, std::size_t m, std::size_t k) {
  ModelParams p;
  p.n_users = n;
  p.n_items = m;
  p.n_types = k;
  p.delta = 0.5;
  p.mu = 0.5;
  p.gamma1 = 0.0;
  p.gamma2 = 1.0;
  p.nu = 1.0 / static_cast<double>(k);
  p.d_shared = m;
  return p;
}

SyntheticEnv static_env(std::size_t n, std::size_t m, std::size_t k, std::size_t horizon, std::uint64_t seed) {
  auto g = generate_model(noiseless(n, m, k), seed);
  auto schedule = VariationSchedule::constant(g.types, horizon);
  return SyntheticEnv(std::move(g.prefs), std::move(schedule), seed);
}

HyperParams hyper(std::size_t t_static, std::size_t delta_t, double p_explore, double p_test, double lambda = 0.75) {
  HyperParams h;
  h.t_static = t_static;
  h.delta_t = delta_t;
  h.p_explore = p_explore;
  h.p_test = p_test;
  h.lambda = lambda;
  return h;
}

DerivationInputs inputs() {
  DerivationInputs in;
  in.n_users = 50;
  in.delta = 0.5;
  in.gamma1 = 0.2;
  in.gamma2 = 0.8;
  in.mu = 0.3;
  in.nu = 0.25;
  in.v1 = 2;
  in.v2 = 4.0;
  in.horizon = 5000;
  in.delta_tol = 0.1;
  in.alpha = 0.5;
  return in;
}

/// State with one batch started and P0 installed, no ratings yet.
RecommenderState prepared(std::size_t n, std::size_t m, const Partition& p0, std::uint64_t seed = 1) {
  RecommenderState state(n, m);
  Rng rng(seed);
  state.start_batch(1, 1, 100, rng);
  state.set_reference(p0);
  return state;
}

}  // namespace

TEST(DeriveParams, StaticModeCollapses) {
  auto in = inputs();
  in.v1 = 0;
  in.v2 = 0.0;
  const auto h = derive_params(in);
  EXPECT_EQ(h.delta_t, in.horizon);
  EXPECT_EQ(h.p_test, 0.0);
}

TEST(DeriveParams, StaticTestLengthExample) {
  DerivationInputs in = inputs();
  in.n_users = 100;
  in.gamma1 = 0.25;
  in.gamma2 = 0.75;
  const auto h = derive_params(in);
  EXPECT_EQ(h.t_static, 1615u);
  EXPECT_EQ(h.t_static, oracle::t_static(100, 0.5, 0.5, 0.1));
}

TEST(DeriveParams, FormulasAgainstDirectEvaluation) {
  const auto in = inputs();
  const auto h = derive_params(in);
  const std::size_t ts = oracle::t_static(50, 0.5, 0.6, 0.1);
  EXPECT_EQ(h.t_static, ts);
  EXPECT_EQ(ts, 998u);
  EXPECT_DOUBLE_EQ(h.lambda, (0.2 + 0.8) * 0.25 + 0.5);
  EXPECT_DOUBLE_EQ(*h.kappa, ts * (1 - 0.1 - 0.3));
  EXPECT_DOUBLE_EQ(h.p_explore, std::pow(50.0, -0.5));
  EXPECT_DOUBLE_EQ(h.p_test, std::sqrt(2.0 / (5000.0 * ts)));
  const double factor = std::max(1.0, 3 * 4.0 / (2 * 0.25 * 0.6));
  EXPECT_EQ(*h.t_learn, static_cast<std::size_t>(std::ceil(factor * ts - 1e-9)));
  // The unclamped optimum (about 353) lies below t_static; the grid minimum is its left edge.
  const std::size_t want = oracle::grid_argmin(ts, 5000, [&](std::size_t d) {
    return oracle::regret_terms(0.1, 5000, static_cast<double>(d), *h.kappa, 4.0, 0.25);
  });
  EXPECT_LE(h.delta_t > want ? h.delta_t - want : want - h.delta_t, 1u);
}

TEST(DeriveParams, Errors) {
  auto in = inputs();
  in.gamma2 = in.gamma1;
  EXPECT_THROW(derive_params(in), ParameterError);
  in = inputs();
  in.mu = 0.95;
  EXPECT_THROW(derive_params(in), ParameterError);
  const auto h = derive_params(in, std::size_t{700});
  EXPECT_EQ(h.delta_t, 700u);
  EXPECT_FALSE(h.kappa.has_value());
  EXPECT_FALSE(h.t_learn.has_value());
  in = inputs();
  in.alpha = 0.6;
  EXPECT_THROW(derive_params(in), ParameterError);
}

TEST(DeriveParams, TestLengthOverrideFlowsThrough) {
  const auto h = derive_params(inputs(), std::nullopt, std::size_t{40});
  EXPECT_EQ(h.t_static, 40u);
  EXPECT_DOUBLE_EQ(*h.kappa, 40 * 0.6);
  EXPECT_EQ(h.delta_t, static_cast<std::size_t>(std::llround(std::sqrt(2 * 0.25 * 5000 * 24.0 / 12.0))));
}

TEST(LambdaInterval, MidpointInsideForLongTests) {
  const auto iv = lambda_interval_for_length(20, 0.3, 0.1, 1.0, 0.2, 4000);
  const double mid = default_lambda(0.3, 0.1, 1.0);
  EXPECT_LT(iv.lower, mid);
  EXPECT_GT(iv.upper, mid);
}

TEST(Score, NoRatingsIsHalf) {
  const auto state = prepared(3, 4, Partition::make({{0, 1, 2}}));
  EXPECT_EQ(score(0, 2, state), 0.5);
}

TEST(Score, CountsNeighbourRatings) {
  auto state = prepared(4, 4, Partition::make({{0, 1, 2, 3}}));
  state.record(1, 2, 1);
  state.record(2, 2, 1);
  state.record(3, 2, -1);
  EXPECT_DOUBLE_EQ(score(0, 2, state), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(state.cluster_score(0, 2).value(), 2.0 / 3.0);
}

TEST(Score, OnlyOwnRatingWhenClusterIsBad) {
  auto state = prepared(4, 4, Partition::make({{0, 1, 2, 3}}));
  state.record(1, 2, 1);
  state.record(2, 2, 1);
  state.deactivate(1);
  state.deactivate(2);
  state.deactivate(3);
  EXPECT_EQ(score(0, 2, state), 0.5);
  state.record(0, 2, -1);
  EXPECT_EQ(score(0, 2, state), 0.0);
  EXPECT_EQ(score(0, 3, state), 0.5);
}

TEST(Score, UncoveredUserIsAnError) {
  const auto state = prepared(3, 4, Partition::make({{0, 1}}));
  EXPECT_THROW(score(2, 0, state), StateError);
  EXPECT_THROW(exploit_choice(2, state), StateError);
}

TEST(ExploitChoice, AllTiedPicksFirstInSigma) {
  auto state = prepared(2, 6, Partition::make({{0, 1}}));
  state.record(0, state.sigma()[0], 1);
  EXPECT_EQ(exploit_choice(0, state), state.sigma()[1]);
  EXPECT_EQ(exploit_choice(1, state), state.sigma()[0]);
}

TEST(ExploitChoice, HighScoreWins) {
  auto state = prepared(2, 6, Partition::make({{0, 1}}));
  const ItemId last = state.sigma().back();
  state.record(1, last, 1);
  EXPECT_EQ(exploit_choice(0, state), last);
}

TEST(ExploitChoice, TiesBrokenBySigma) {
  // Users 1..5 rate: i1 and i2 at 4/5, i3 at 3/5.
  auto state = prepared(6, 8, Partition::make({{0, 1, 2, 3, 4, 5}}), 17);
  ItemId a = 2;
  ItemId b = 5;
  const ItemId c = 7;
  if (state.sigma_rank(a) > state.sigma_rank(b)) std::swap(a, b);  // a is ranked first
  for (UserId v = 1; v <= 5; ++v) {
    state.record(v, a, v <= 4 ? 1 : -1);
    state.record(v, b, v <= 4 ? 1 : -1);
    state.record(v, c, v <= 3 ? 1 : -1);
  }
  EXPECT_EQ(exploit_choice(0, state), a);
  state.record(0, a, 1);
  EXPECT_EQ(exploit_choice(0, state), b);
}

TEST(ExploitChoice, MatchesBruteForceArgmax) {
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.index(5);
    const std::size_t m = 2 + rng.index(7);
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng.index(2);
    std::vector<UserId> users(n);
    for (UserId u = 0; u < n; ++u) users[u] = u;
    auto state = prepared(n, m, partition_from_labels(users, labels), 100 + trial);
    for (UserId u = 0; u < n; ++u)
      for (ItemId i = 0; i < m; ++i)
        if (rng.bernoulli(0.4)) state.record(u, i, rng.bernoulli(0.5) ? 1 : -1);
    for (UserId u = 0; u < n; ++u)
      if (rng.bernoulli(0.3)) state.deactivate(u);
    for (UserId u = 0; u < n; ++u) {
      if (state.unconsumed_count(u) == 0) {
        EXPECT_THROW(exploit_choice(u, state), ExhaustionError);
        continue;
      }
      std::optional<ItemId> best;
      double best_score = -1;
      for (ItemId i : state.sigma())
        if (!state.is_consumed(u, i) && score(u, i, state) > best_score + 1e-12) {
          best = i;
          best_score = score(u, i, state);
        }
      EXPECT_EQ(exploit_choice(u, state), *best);
      const double s = score(u, *best, state);
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, 1.0);
    }
  }
}

TEST(ExploreChoice, SingleAndExhausted) {
  auto state = prepared(1, 3, Partition::make({{0}}));
  Rng rng(3);
  state.record(0, 0, 1);
  state.record(0, 2, 1);
  EXPECT_EQ(explore_choice(0, state, rng), 1u);
  state.record(0, 1, 1);
  EXPECT_THROW(explore_choice(0, state, rng), ExhaustionError);
  EXPECT_THROW(state.record(0, 1, 1), StateError);
}

TEST(ExploreChoice, UniformOverUnconsumed) {
  auto state = prepared(1, 6, Partition::make({{0}}));
  state.record(0, 1, 1);
  state.record(0, 4, -1);
  Rng rng(9);
  std::map<ItemId, int> hits;
  for (int k = 0; k < 10000; ++k) ++hits[explore_choice(0, state, rng)];
  EXPECT_EQ(hits.size(), 4u);
  for (auto [item, count] : hits) {
    EXPECT_GE(count, 2300) << item;
    EXPECT_LE(count, 2700) << item;
  }
}

TEST(TestPhase, NoSwitchKeepsActiveSet) {
  const auto env = static_env(6, 200, 1, 100, 4);
  RecommenderState state(6, 200);
  Rng rng(1);
  RunTrace trace;
  const auto h = hyper(20, 100, 0.0, 0.0);
  state.start_batch(1, 1, 100, rng);
  const auto p0 = run_reference_test(state, env, h, rng, trace);
  EXPECT_EQ(p0.clusters.size(), 1u);
  run_test_phase(state, env, h, rng, trace);
  EXPECT_EQ(state.active_users().size(), 6u);
  EXPECT_EQ(state.rounds_used_in_batch(), 40u);
}

TEST(TestPhase, DetectsTheSwitchedUser) {
  auto g = generate_model(noiseless(8, 400, 2), 6);
  auto schedule = VariationSchedule::constant(g.types, 200);
  const std::size_t len = 40;
  const TypeId other = 1 - g.types[3];
  schedule.switch_from(3, len + 1, other);
  const SyntheticEnv env(std::move(g.prefs), std::move(schedule), 6);
  RecommenderState state(8, 400);
  Rng rng(2);
  RunTrace trace;
  const auto h = hyper(len, 200, 0.0, 0.0);
  state.start_batch(1, 1, 200, rng);
  run_reference_test(state, env, h, rng, trace);
  EXPECT_EQ(state.reference().clusters.size(), 2u);
  run_test_phase(state, env, h, rng, trace);
  EXPECT_EQ(state.bad_users(), (std::vector<UserId>{3}));
  // The bad user keeps receiving items (fallback) in later tests.
  run_test_phase(state, env, h, rng, trace);
  std::size_t fallback = 0;
  for (const auto& r : trace.records) fallback += r.phase == Phase::fallback;
  EXPECT_EQ(fallback, len);
}

TEST(TestPhase, NeedsEnoughRounds) {
  const auto env = static_env(4, 100, 1, 30, 1);
  RecommenderState state(4, 100);
  Rng rng(1);
  RunTrace trace;
  const auto h = hyper(10, 30, 0.0, 0.0);
  state.start_batch(1, 1, 25, rng);
  run_reference_test(state, env, h, rng, trace);
  run_test_phase(state, env, h, rng, trace);
  EXPECT_THROW(run_test_phase(state, env, h, rng, trace), StateError);
}

TEST(RunBatch, PureExplorationWithoutTests) {
  const auto env = static_env(4, 100, 2, 30, 3);
  RecommenderState state(4, 100);
  Rng rng(5);
  RunTrace trace;
  run_batch(state, env, hyper(5, 30, 1.0, 0.0), rng, trace, 1, 1, 30);
  for (const auto& r : trace.records) {
    if (r.round <= 5)
      EXPECT_EQ(r.phase, Phase::reference_test);
    else
      EXPECT_EQ(r.phase, Phase::explore);
  }
  EXPECT_EQ(trace.records.size(), 4u * 30u);
}

TEST(RunBatch, TestSkippedWhenTooFewRoundsRemain) {
  const auto env = static_env(4, 200, 2, 12, 3);
  RecommenderState state(4, 200);
  Rng rng(5);
  RunTrace trace;
  // 5 reference rounds, one test of 5, then 2 rounds that cannot host a test.
  run_batch(state, env, hyper(5, 12, 0.0, 1.0), rng, trace, 1, 1, 12);
  std::map<Round, std::set<Phase>> phases;
  for (const auto& r : trace.records) phases[r.round].insert(r.phase);
  for (Round t = 6; t <= 10; ++t) EXPECT_TRUE(phases[t].count(Phase::test) || phases[t].count(Phase::fallback));
  for (Round t = 11; t <= 12; ++t) {
    EXPECT_FALSE(phases[t].count(Phase::test));
    EXPECT_TRUE(phases[t].count(Phase::exploit) || phases[t].count(Phase::fallback));
  }
}

TEST(RunCollaborative, SingleBatchWhenBatchIsHorizon) {
  const auto env = static_env(6, 300, 2, 60, 8);
  const auto trace = run_collaborative(env, hyper(10, 60, 0.2, 0.0), 60, 8);
  EXPECT_EQ(trace.batch_starts, (std::vector<Round>{1}));
  EXPECT_EQ(trace.records.size(), 6u * 60u);
}

TEST(RunCollaborative, ReferenceTestsAtBatchStarts) {
  const auto env = static_env(6, 300, 2, 60, 8);
  const auto trace = run_collaborative(env, hyper(10, 30, 0.2, 0.0), 60, 8);
  EXPECT_EQ(trace.batch_starts, (std::vector<Round>{1, 31}));
  std::set<Round> reference;
  for (const auto& r : trace.records)
    if (r.phase == Phase::reference_test) reference.insert(r.round);
  std::set<Round> want;
  for (Round t = 1; t <= 10; ++t) want.insert(t);
  for (Round t = 31; t <= 40; ++t) want.insert(t);
  EXPECT_EQ(reference, want);
}

TEST(RunCollaborative, BatchRatingsResetButConsumedPersists) {
  const auto env = static_env(4, 100, 2, 20, 2);
  RecommenderState state(4, 100);
  RunTrace trace;
  const auto h = hyper(4, 10, 0.3, 0.0);
  Rng r1 = batch_rng(2, 1);
  run_batch(state, env, h, r1, trace, 1, 1, 10);
  Rng r2 = batch_rng(2, 2);
  state.start_batch(2, 11, 20, r2);
  std::size_t consumed = 0;
  for (UserId u = 0; u < 4; ++u)
    for (ItemId i = 0; i < 100; ++i) {
      EXPECT_EQ(state.batch_rating(u, i), 0);
      consumed += state.is_consumed(u, i);
    }
  EXPECT_EQ(consumed, 40u);
}

TEST(RunCollaborative, StaticReductionAndDeterminism) {
  const auto env = static_env(6, 400, 3, 80, 12);
  const auto h = hyper(12, 80, 0.15, 0.0);
  const auto a = run_collaborative(env, h, 80, 77);
  const auto b = run_collaborative(env, h, 80, 77);
  EXPECT_EQ(a.records, b.records);
  RecommenderState state(6, 400);
  RunTrace direct;
  Rng rng = batch_rng(77, 1);
  run_batch(state, env, h, rng, direct, 1, 1, 80);
  EXPECT_EQ(direct.records, a.records);
  const auto c = run_collaborative(env, h, 80, 78);
  EXPECT_NE(c.records, a.records);
}

TEST(RunCollaborative, ExhaustionCarriesRoundContext) {
  const auto env = static_env(3, 10, 1, 20, 1);
  try {
    run_collaborative(env, hyper(2, 20, 1.0, 0.0), 20, 1);
    FAIL() << "expected exhaustion";
  } catch (const ExhaustionError& e) {
    EXPECT_NE(std::string(e.what()).find("round 11"), std::string::npos) << e.what();
  }
}

TEST(TraceCsv, HeaderAndRows) {
  RunTrace t;
  t.fingerprint = "abc";
  t.seed = 4;
  t.records.push_back({1, 1, 0, Phase::reference_test, 3, 1, true});
  t.records.push_back({2, 1, 1, Phase::exploit, 5, 0, std::nullopt});
  std::ostringstream out;
  write_trace_csv(out, t);
  EXPECT_EQ(out.str(),
            "# config_fingerprint=abc seed=4\n"
            "round,batch,user,phase,item,response,likable\n"
            "1,1,0,reference_test,3,1,1\n"
            "2,1,1,exploit,5,0,NA\n");
}
