#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "collab/collab.hpp"
#include "oracles.hpp"

using namespace collab;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double standard_error(const std::vector<double>& xs) {
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
}

ModelParams example_model(std::size_t n, std::size_t m, std::size_t k, double delta, double gamma1, double gamma2) {
  ModelParams p;
  p.n_users = n;
  p.n_items = m;
  p.n_types = k;
  p.delta = delta;
  p.mu = 0.5;
  p.gamma1 = gamma1;
  p.gamma2 = gamma2;
  p.nu = static_cast<double>(n / k) / static_cast<double>(n);
  p.d_shared = m;
  return p;
}

// ---------------------------------------------------------------------------

Outcome agreement_bounds_exact() {
  std::size_t models = 0;
  std::size_t rejected = 0;
  std::size_t pairs = 0;
  std::size_t violations = 0;
  double worst_gap = 0.0;
  const std::size_t sizes[] = {100, 400};
  const double gaps[] = {0.3, 0.5};
  for (std::uint64_t seed = 1; models < 50 && seed < 5000; ++seed) {
    const std::size_t k = 2 + seed % 2;
    const std::size_t m = sizes[(seed / 2) % 2];
    const double delta = gaps[(seed / 4) % 2];
    // Shared block on 80% of the items, idiosyncratic tails on the rest.
    const auto d = static_cast<std::size_t>(0.8 * static_cast<double>(m));
    const double slack = 3.0 / std::sqrt(static_cast<double>(m));
    ModelParams p = example_model(20, m, k, delta, slack, 0.8 - slack);
    p.d_shared = d;
    const auto g = generate_model(p, seed);
    if (!check_assumptions(g.prefs, g.types, p).all_ok()) {
      ++rejected;
      continue;
    }
    ++models;
    const double upper = 2.0 * p.gamma1 * delta * delta + 0.5;
    const double lower = 2.0 * p.gamma2 * delta * delta + 0.5;
    for (UserId u = 0; u < p.n_users; ++u)
      for (UserId v = u + 1; v < p.n_users; ++v) {
        const auto ru = g.prefs.row(u);
        const auto rv = g.prefs.row(v);
        const double lib = agreement_probability(ru, rv);
        const double ref = oracle::agreement({ru.begin(), ru.end()}, {rv.begin(), rv.end()});
        worst_gap = std::max(worst_gap, std::abs(lib - ref));
        ++pairs;
        const bool ok = g.types[u] == g.types[v] ? ref >= lower - 1e-12 : ref <= upper + 1e-12;
        violations += !ok || std::abs(lib - ref) > 1e-12;
      }
  }
  return {models == 50 && violations == 0,
          fmt("models=%zu rejected=%zu pairs=%zu violations=%zu max|lib-oracle|=%.2e", models, rejected, pairs,
              violations, worst_gap)};
}

Outcome threshold_recovery_rate() {
  const double tol = 0.2;
  const ModelParams p = example_model(20, 4000, 2, 0.3, 0.1, 1.0);
  const auto g = generate_model(p, 2024);
  if (!check_assumptions(g.prefs, g.types, p).all_ok()) return {false, "generated model violates the assumptions"};
  const std::size_t length = oracle::t_static(20, 0.3, 0.9, tol);
  const double lambda = (0.1 + 1.0) * 0.09 + 0.5;
  Lemma2Options o;
  o.jobs = default_jobs();
  const auto r = verify_lemma2(g.prefs, g.types, p, tol, 300, 2024, o);
  const double rate = r.checks.back().observed;
  const double sigma = std::sqrt((tol / 3.0) * (1.0 - tol / 3.0) / 300.0);
  const double bound = 1.0 - tol / 3.0 - 3.0 * sigma;
  const bool params_ok = r.checks[0].observed == static_cast<double>(length) && std::abs(r.checks[1].observed - lambda) < 1e-12;
  return {params_ok && rate >= bound,
          fmt("L=%zu lambda=%.4f rate=%.4f bound=%.4f", length, lambda, rate, bound)};
}

Outcome static_near_optimality() {
  const double tol = 0.1;
  const ModelParams p = example_model(60, 2000, 3, 0.5, 0.1, 1.0);
  DerivationInputs in;
  in.n_users = 60;
  in.delta = 0.5;
  in.gamma1 = 0.1;
  in.gamma2 = 1.0;
  in.mu = 0.5;
  in.nu = 1.0 / 3.0;
  in.horizon = 800;
  in.delta_tol = tol;
  in.alpha = 0.5;
  const HyperParams h = derive_params(in);
  const std::size_t t_static = oracle::t_static(60, 0.5, 0.9, tol);
  if (h.t_static != t_static || h.t_learn != t_static || h.delta_t != 800)
    return {false, fmt("unexpected parameters t_static=%zu delta_t=%zu", h.t_static, h.delta_t)};
  std::vector<double> fractions;
  std::size_t assumption_failures = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto g = generate_model(p, seed);
    assumption_failures += !check_assumptions(g.prefs, g.types, p).all_ok();
    const SyntheticEnv env(g.prefs, VariationSchedule::constant(g.types, 800), seed);
    const auto trace = run_collaborative(env, h, 800, seed);
    std::size_t liked = 0;
    std::size_t shown = 0;
    for (const auto& r : trace.records)
      if (r.round > t_static) {
        ++shown;
        liked += *env.probability(r.user, r.item, r.round) > 0.5;
      }
    fractions.push_back(static_cast<double>(liked) / static_cast<double>(shown));
  }
  const double m = mean(fractions);
  return {m >= 1.0 - 2.0 * tol && assumption_failures == 0,
          fmt("t_learn=%zu mean_likable_fraction=%.4f min=%.4f threshold=%.2f", t_static, m,
              *std::min_element(fractions.begin(), fractions.end()), 1.0 - 2.0 * tol)};
}

Outcome nonstationary_batching_benefit() {
  const std::size_t horizon = 600;
  const std::vector<std::size_t> sizes{50, 100, 150, 200, 300, 600};
  const ModelParams p = example_model(30, 2000, 3, 0.5, 0.1, 1.0);
  HyperParams base;
  base.alpha = 0.5;
  base.t_static = 20;
  base.lambda = 0.95;
  base.p_explore = 0.1;
  base.p_test = 0.0;
  base.horizon = horizon;
  std::map<std::size_t, std::vector<double>> rewards;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto g = generate_model(p, seed);
    Rng rng = Rng::stream(seed, "acceptance/schedule");
    const SyntheticEnv env(g.prefs, segmented_reshuffle_schedule(g.types, horizon, 100, rng), seed);
    const auto sweep = sweep_batch_size(env, horizon, sizes, {seed}, base, default_jobs());
    for (const auto& cell : sweep.cells) {
      if (cell.status != "ok") return {false, "sweep cell failed: " + cell.status};
      rewards[cell.delta_t].push_back(cell.acc_reward);
    }
    HyperParams check = base;
    check.delta_t = 100;
    const auto trace = run_collaborative(env, check, horizon, seed);
    double total = 0.0;
    for (const auto& r : trace.records) total += r.response;
    if (std::abs(total / 30.0 - rewards[100].back()) > 1e-9) return {false, "sweep acc_reward disagrees with the trace"};
  }
  const double diff = mean(rewards[100]) - mean(rewards[600]);
  const double se = std::hypot(standard_error(rewards[100]), standard_error(rewards[600]));
  std::size_t best = sizes.front();
  std::string table;
  for (std::size_t s : sizes) {
    if (mean(rewards[s]) > mean(rewards[best])) best = s;
    table += fmt(" %zu:%.1f", s, mean(rewards[s]));
  }
  return {diff >= 3.0 * se && best > 50 && best < 600,
          fmt("diff(100-600)=%.2f 3se=%.2f argmax=%zu means", diff, 3.0 * se, best) + table};
}

Outcome variation_detection() {
  const double tol = 0.2;
  const ModelParams p = example_model(20, 6000, 2, 0.3, 0.1, 1.0);
  const std::size_t length = oracle::t_static(20, 0.3, 0.9, tol);
  HyperParams h;
  h.t_static = length;
  h.lambda = (0.1 + 1.0) * 0.09 + 0.5;
  h.delta_t = 2 * length;
  h.horizon = 2 * length;
  std::size_t exact = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const auto g = generate_model(p, 500 + trial);
    const UserId mover = trial % 20;
    auto schedule = VariationSchedule::constant(g.types, 2 * length);
    schedule.switch_from(mover, length + 1, 1 - g.types[mover]);
    const SyntheticEnv env(g.prefs, schedule, trial);
    RecommenderState state(20, 6000);
    Rng rng = Rng::stream(trial, "acceptance/detect");
    RunTrace trace;
    state.start_batch(1, 1, 2 * length, rng);
    run_reference_test(state, env, h, rng, trace);
    run_test_phase(state, env, h, rng, trace);
    exact += state.bad_users() == std::vector<UserId>{mover};
  }
  return {exact == 100, fmt("L=%zu exact=%zu/100", length, exact)};
}

Outcome structural_invariants() {
  std::size_t failures = 0;
  std::size_t batches_run = 0;
  std::size_t test_rounds = 0;
  std::size_t fallback_records = 0;
  std::string first_failure;
  auto require = [&](bool ok, std::size_t c, const char* what) {
    if (ok) return;
    if (failures++ == 0) first_failure = fmt("case %zu: %s", c, what);
  };
  Rng draw(77);
  for (std::size_t c = 0; c < 50; ++c) {
    const std::size_t n = 3 + draw.index(6);
    const std::size_t k = 2 + draw.index(std::min<std::size_t>(2, n - 2));
    const std::size_t horizon = 5 + draw.index(56);
    HyperParams h;
    h.t_static = 1 + draw.index(6);
    h.delta_t = 1 + draw.index(horizon);
    h.p_test = 0.3 * draw.uniform();
    h.p_explore = draw.uniform();
    h.lambda = 0.5 + 0.5 * draw.uniform();
    h.horizon = horizon;
    const std::size_t m = n * horizon + h.t_static + 1;
    ModelParams p = example_model(n, m, k, 0.1 + 0.4 * draw.uniform(), 0.0, 1.0);
    p.d_shared = draw.index(m + 1);
    const auto g = generate_model(p, 1000 + c);
    Rng schedule_rng = Rng::stream(c, "acceptance/fuzz");
    const auto schedule = c % 2 ? segmented_reshuffle_schedule(g.types, horizon, 1 + draw.index(horizon), schedule_rng)
                                : VariationSchedule::constant(g.types, horizon);
    const SyntheticEnv env(g.prefs, schedule, c);
    const std::uint64_t seed = 9000 + c;

    // Step-by-step replica of the batch loop with invariant checks in between.
    RunTrace replica;
    replica.n_users = n;
    replica.horizon = horizon;
    replica.seed = seed;
    RecommenderState state(n, m);
    const std::size_t batches = (horizon + h.delta_t - 1) / h.delta_t;
    for (std::size_t b = 1; b <= batches; ++b) {
      Rng rng = batch_rng(seed, b);
      const Round first = (b - 1) * h.delta_t + 1;
      const Round last = std::min(horizon, b * h.delta_t);
      state.start_batch(b, first, last, rng);
      replica.batch_starts.push_back(first);
      bool reset = true;
      for (UserId u = 0; u < n; ++u)
        for (ItemId i = 0; i < m; ++i) reset &= state.batch_rating(u, i) == 0;
      require(reset, c, "batch ratings not reset");
      std::size_t consumed = 0;
      for (UserId u = 0; u < n; ++u) consumed += m - state.unconsumed_count(u);
      require(consumed == replica.records.size(), c, "consumed set lost across batches");
      const std::size_t batch_begin = replica.records.size();
      auto check_cover = [&](std::size_t from) {
        const auto s = state.active_users();
        const auto v = state.bad_users();
        std::set<UserId> all(s.begin(), s.end());
        for (UserId u : v) require(all.insert(u).second, c, "S and V overlap");
        require(all.size() == n, c, "S and V do not cover the users");
        for (std::size_t r = from; r < replica.records.size(); ++r) {
          const auto& rec = replica.records[r];
          if (rec.phase == Phase::fallback) require(!state.is_active(rec.user), c, "fallback served to an active user");
          if (rec.phase == Phase::exploit) require(state.is_active(rec.user), c, "exploit served to a bad user");
        }
      };
      std::size_t mark = replica.records.size();
      run_reference_test(state, env, h, rng, replica);
      check_cover(mark);
      while (state.rounds_remaining() > 0) {
        mark = replica.records.size();
        const bool test = rng.bernoulli(h.p_test);
        if (test && state.rounds_remaining() >= h.t_static)
          run_test_phase(state, env, h, rng, replica);
        else
          run_explore_exploit_round(state, env, h, rng, replica);
        check_cover(mark);
      }
      std::map<std::pair<UserId, ItemId>, int> in_batch;
      for (std::size_t r = batch_begin; r < replica.records.size(); ++r)
        in_batch[{replica.records[r].user, replica.records[r].item}] = replica.records[r].response;
      for (UserId u = 0; u < n; ++u)
        for (ItemId i = 0; i < m; ++i) {
          auto it = in_batch.find({u, i});
          require(state.batch_rating(u, i) == (it == in_batch.end() ? 0 : it->second), c,
                  "batch rating differs from this batch's responses");
        }
    }

    batches_run += batches;
    for (const auto& r : replica.records) {
      test_rounds += r.phase == Phase::test;
      fallback_records += r.phase == Phase::fallback;
    }
    const auto trace = run_collaborative(env, h, horizon, seed);
    require(trace.records == replica.records, c, "engine differs from the step-by-step replica");
    require(trace.records.size() == n * horizon, c, "one recommendation per user per round");
    std::set<std::pair<UserId, ItemId>> seen;
    for (const auto& r : trace.records) require(seen.insert({r.user, r.item}).second, c, "item recommended twice");

    const auto again = run_collaborative(env, h, horizon, seed);
    std::ostringstream a;
    std::ostringstream b;
    write_trace_csv(a, trace);
    write_trace_csv(b, again);
    require(a.str() == b.str(), c, "trace is not reproducible");

    const auto fixed = baseline_static(env, horizon, seed, h.t_static, h.alpha, h.lambda);
    HyperParams single = static_hyper(n, horizon, h.t_static, h.alpha, h.lambda);
    require(single.delta_t == horizon && single.p_test == 0.0, c, "static parameters are not a single batch");
    require(fixed.records == run_collaborative(env, single, horizon, seed).records, c, "static engine mismatch");
    for (const auto& r : fixed.records) {
      require(r.batch == 1, c, "static run left batch 1");
      require(r.phase != Phase::test && r.phase != Phase::fallback, c, "static run ran a variation test");
      require((r.phase == Phase::reference_test) == (r.round <= std::min(h.t_static, horizon)), c,
              "static run reference test misplaced");
    }
  }
  return {failures == 0,
          fmt("cases=50 batches=%zu test_records=%zu fallback_records=%zu failures=%zu", batches_run, test_rounds,
              fallback_records, failures) + (failures ? " first: " + first_failure : "")};
}

Outcome batch_size_grid_minimum() {
  Rng draw(31);
  std::size_t off = 0;
  std::string worst;
  for (int k = 0; k < 10; ++k) {
    DerivationInputs in;
    in.n_users = 10 + draw.index(200);
    in.delta = 0.2 + 0.3 * draw.uniform();
    in.gamma1 = 0.2 * draw.uniform();
    in.gamma2 = 0.6 + 0.4 * draw.uniform();
    in.mu = 0.2 + 0.4 * draw.uniform();
    in.delta_tol = 0.05 + 0.15 * draw.uniform();
    in.nu = 0.05 + 0.3 * draw.uniform();
    in.v1 = 1 + draw.index(5);
    in.v2 = 0.5 + 5.0 * draw.uniform();
    const std::size_t t_static = oracle::t_static(static_cast<double>(in.n_users), in.delta, in.gamma2 - in.gamma1,
                                                  in.delta_tol);
    in.horizon = t_static * (2 + draw.index(60));
    const HyperParams h = derive_params(in);
    const double kappa = static_cast<double>(t_static) * (1.0 - in.delta_tol - in.mu);
    const std::size_t best = oracle::grid_argmin(t_static, in.horizon, [&](std::size_t x) {
      return oracle::regret_terms(in.delta_tol, static_cast<double>(in.horizon), static_cast<double>(x), kappa, in.v2,
                                  in.nu);
    });
    const std::size_t gap = h.delta_t > best ? h.delta_t - best : best - h.delta_t;
    if (gap > 1 || h.t_static != t_static) {
      ++off;
      worst = fmt(" draw %d: delta_t=%zu grid=%zu", k, h.delta_t, best);
    }
  }
  return {off == 0, fmt("draws=10 off_grid=%zu", off) + worst};
}

/// Enumerates multisets of `m` item columns over `horizon` rounds: every 0/1
/// likability pattern up to relabelling of items.
void for_each_instance(std::size_t horizon, std::size_t m,
                       const std::function<void(const std::vector<std::vector<bool>>&)>& fn) {
  const std::size_t codes = std::size_t{1} << horizon;
  std::vector<std::size_t> cols(m, 0);
  for (;;) {
    std::vector<std::vector<bool>> likable(horizon, std::vector<bool>(m));
    for (std::size_t t = 0; t < horizon; ++t)
      for (std::size_t i = 0; i < m; ++i) likable[t][i] = (cols[i] >> t) & 1;
    fn(likable);
    std::size_t pos = m;
    while (pos > 0 && cols[pos - 1] == codes - 1) --pos;
    if (pos == 0) return;
    const std::size_t next = cols[pos - 1] + 1;
    for (std::size_t i = pos - 1; i < m; ++i) cols[i] = next;
  }
}

Outcome oracle_bound_exhaustive() {
  std::size_t instances = 0;
  std::size_t envs = 0;
  std::size_t mismatches = 0;
  for (std::size_t horizon = 1; horizon <= 4; ++horizon)
    for (std::size_t m = 1; m <= 6; ++m) {
      std::vector<std::vector<std::vector<bool>>> pending;
      std::size_t group = 1;
      auto flush = [&] {
        // Users of one env; distinct round rows become types so repeated
        // consecutive rows form a single segment.
        const std::size_t n = pending.size();
        std::vector<std::vector<double>> templates;
        std::map<std::vector<bool>, TypeId> type_of;
        VariationSchedule s(n, horizon);
        for (UserId u = 0; u < n; ++u)
          for (Round t = 1; t <= horizon; ++t) {
            const auto& row = pending[u][t - 1];
            auto [it, fresh] = type_of.emplace(row, templates.size());
            if (fresh) templates.emplace_back(row.begin(), row.end());
            s.set(u, t, it->second);
          }
        std::vector<TypeId> initial(n);
        for (UserId u = 0; u < n; ++u) initial[u] = s.type_at(u, 1);
        const SyntheticEnv env(PreferenceMatrix::assemble(templates, std::vector<std::vector<double>>(n), initial), s, 1);
        double expected = 0.0;
        for (UserId u = 0; u < n; ++u) {
          const auto best = oracle::best_sequence(pending[u], m);
          expected += static_cast<double>(best);
          mismatches += oracle_user_bound(env, u, horizon) != static_cast<long long>(best);
        }
        mismatches += std::abs(oracle_upper_bound(env, horizon) - expected / static_cast<double>(n)) > 1e-12;
        ++envs;
        pending.clear();
        group = group % 3 + 1;
      };
      for_each_instance(horizon, m, [&](const std::vector<std::vector<bool>>& likable) {
        ++instances;
        pending.push_back(likable);
        if (pending.size() == group) flush();
      });
      if (!pending.empty()) flush();
    }
  return {mismatches == 0, fmt("instances=%zu envs=%zu mismatches=%zu", instances, envs, mismatches)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"agreement_bounds_exact", agreement_bounds_exact},
      {"threshold_recovery_rate", threshold_recovery_rate},
      {"static_near_optimality", static_near_optimality},
      {"nonstationary_batching_benefit", nonstationary_batching_benefit},
      {"variation_detection", variation_detection},
      {"structural_invariants", structural_invariants},
      {"batch_size_grid_minimum", batch_size_grid_minimum},
      {"oracle_bound_exhaustive", oracle_bound_exhaustive},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s %s (%s) [%.1fs]\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
