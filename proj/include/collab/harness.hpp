#pragma once

// Metrics, oracle bound, baselines, the batch-size sweep and the Monte-Carlo
// verification suites.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <queue>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "collab/environment.hpp"
#include "collab/model.hpp"
#include "collab/params.hpp"
#include "collab/partition.hpp"
#include "collab/recommender.hpp"
#include "collab/rng.hpp"

namespace collab {

/// Runs fn(k) for k in [0, n) on up to `jobs` threads. Results must be
/// written by index so the outcome does not depend on the worker count.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t k = 0; k < n; ++k) fn(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w)
    workers.emplace_back([&] {
      for (std::size_t k = next++; k < n && !failed; k = next++) {
        try {
          fn(k);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
        }
      }
    });
  for (auto& t : workers) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline std::size_t default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------
// Metrics

/// (1/N) * number of recommendations that were likable when made.
inline double reward_likable(const RunTrace& trace, const Environment& env) {
  if (env.kind() == EnvKind::replay)
    throw UnsupportedMetricError("reward_likable needs ground-truth preferences; replay environments have none");
  if (trace.n_users == 0) return 0.0;
  std::size_t hits = 0;
  for (const auto& r : trace.records) hits += env.likable(r.user, r.item, r.round).value_or(false);
  return static_cast<double>(hits) / static_cast<double>(trace.n_users);
}

/// Fraction of likable recommendations among records with round > after.
inline double likable_fraction_after(const RunTrace& trace, const Environment& env, Round after) {
  if (env.kind() == EnvKind::replay) throw UnsupportedMetricError("likable fraction needs ground-truth preferences");
  std::size_t total = 0;
  std::size_t hits = 0;
  for (const auto& r : trace.records)
    if (r.round > after) {
      ++total;
      hits += env.likable(r.user, r.item, r.round).value_or(false);
    }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

/// (1/N) * sum of observed responses (missing ratings contribute 0).
inline double acc_reward(const RunTrace& trace) {
  if (trace.n_users == 0) return 0.0;
  long long sum = 0;
  for (const auto& r : trace.records) sum += r.response;
  return static_cast<double>(sum) / static_cast<double>(trace.n_users);
}

/// Cumulative acc-reward after each round 1..horizon.
inline std::vector<double> acc_reward_curve(const RunTrace& trace) {
  std::vector<double> curve(trace.horizon, 0.0);
  if (trace.n_users == 0) return curve;
  for (const auto& r : trace.records) curve.at(r.round - 1) += r.response;
  double running = 0.0;
  for (auto& v : curve) {
    running += v;
    v = running / static_cast<double>(trace.n_users);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Oracle

namespace detail {

/// Dinic max-flow on a small dense-ish graph.
class MaxFlow {
 public:
  explicit MaxFlow(std::size_t n) : graph_(n), level_(n), cursor_(n) {}

  void add_edge(std::size_t from, std::size_t to, long long capacity) {
    graph_[from].push_back({to, graph_[to].size(), capacity});
    graph_[to].push_back({from, graph_[from].size() - 1, 0});
  }

  long long run(std::size_t source, std::size_t sink) {
    long long total = 0;
    while (build_levels(source, sink)) {
      std::fill(cursor_.begin(), cursor_.end(), 0);
      while (long long pushed = push(source, sink, std::numeric_limits<long long>::max())) total += pushed;
    }
    return total;
  }

 private:
  struct Edge {
    std::size_t to;
    std::size_t reverse;
    long long capacity;
  };

  bool build_levels(std::size_t source, std::size_t sink) {
    std::fill(level_.begin(), level_.end(), -1);
    std::queue<std::size_t> frontier;
    level_[source] = 0;
    frontier.push(source);
    while (!frontier.empty()) {
      const std::size_t v = frontier.front();
      frontier.pop();
      for (const auto& e : graph_[v])
        if (e.capacity > 0 && level_[e.to] < 0) {
          level_[e.to] = level_[v] + 1;
          frontier.push(e.to);
        }
    }
    return level_[sink] >= 0;
  }

  long long push(std::size_t v, std::size_t sink, long long limit) {
    if (v == sink) return limit;
    for (auto& k = cursor_[v]; k < graph_[v].size(); ++k) {
      auto& e = graph_[v][k];
      if (e.capacity <= 0 || level_[e.to] != level_[v] + 1) continue;
      if (long long pushed = push(e.to, sink, std::min(limit, e.capacity))) {
        e.capacity -= pushed;
        graph_[e.to][e.reverse].capacity += pushed;
        return pushed;
      }
    }
    return 0;
  }

  std::vector<std::vector<Edge>> graph_;
  std::vector<int> level_;
  std::vector<std::size_t> cursor_;
};

}  // namespace detail

/// Best number of likable recommendations one user can receive in rounds
/// [1, horizon] without repeats: max-flow from preference segments
/// (capacity = segment length) to the items likable in them. Recommendations
/// stop once the catalog is exhausted, so only the first M rounds count.
inline long long oracle_user_bound(const Environment& env, UserId u, std::size_t horizon) {
  const std::size_t m = env.n_items();
  const auto segments = env.segments(u, std::min(horizon, m));
  const std::size_t source = segments.size() + m;
  const std::size_t sink = source + 1;
  detail::MaxFlow flow(sink + 1);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    flow.add_edge(source, s, static_cast<long long>(segments[s].last - segments[s].first + 1));
    for (ItemId i = 0; i < m; ++i)
      if (env.likable(u, i, segments[s].first).value_or(false)) flow.add_edge(s, segments.size() + i, 1);
  }
  for (ItemId i = 0; i < m; ++i) flow.add_edge(segments.size() + i, sink, 1);
  return flow.run(source, sink);
}

/// Per-user oracle bound averaged over users (same normalisation as reward_likable).
inline double oracle_upper_bound(const Environment& env, std::size_t horizon) {
  if (env.kind() == EnvKind::replay) throw UnsupportedMetricError("oracle bound needs ground-truth preferences");
  if (env.n_users() == 0) return 0.0;
  long long total = 0;
  for (UserId u = 0; u < env.n_users(); ++u) total += oracle_user_bound(env, u, horizon);
  return static_cast<double>(total) / static_cast<double>(env.n_users());
}

// ---------------------------------------------------------------------------
// Baselines

/// Uniformly random unconsumed item for every user each round.
inline RunTrace baseline_random(const Environment& env, std::size_t horizon, std::uint64_t seed) {
  RunTrace trace;
  trace.n_users = env.n_users();
  trace.horizon = horizon;
  trace.seed = seed;
  RecommenderState state(env.n_users(), env.n_items());
  Rng rng = Rng::stream(seed, "baseline/random");
  state.start_batch(1, 1, horizon, rng);
  if (horizon > 0) trace.batch_starts.push_back(1);
  for (Round t = 1; t <= horizon; ++t) {
    for (UserId u = 0; u < env.n_users(); ++u) {
      const ItemId i = explore_choice(u, state, rng);
      const int response = env.respond(u, i, t);
      state.record(u, i, response);
      trace.records.push_back({t, 1, u, Phase::explore, i, response, env.likable(u, i, t)});
    }
    state.advance_round();
  }
  return trace;
}

/// The un-batched algorithm: one batch spanning the horizon, no variation tests.
inline HyperParams static_hyper(std::size_t n_users, std::size_t horizon, std::size_t t_static, double alpha,
                                double lambda) {
  HyperParams h;
  h.alpha = alpha;
  h.lambda = lambda;
  h.t_static = t_static;
  h.delta_t = std::max<std::size_t>(horizon, 1);
  h.horizon = horizon;
  h.p_explore = std::pow(static_cast<double>(n_users), -alpha);
  h.p_test = 0.0;
  return h;
}

inline RunTrace baseline_static(const Environment& env, std::size_t horizon, std::uint64_t seed, std::size_t t_static,
                                double alpha, double lambda) {
  return run_collaborative(env, static_hyper(env.n_users(), horizon, t_static, alpha, lambda), horizon, seed);
}

// ---------------------------------------------------------------------------
// Batch-size sweep

struct SweepCell {
  std::size_t delta_t = 0;
  std::uint64_t seed = 0;
  double acc_reward = 0.0;
  double reward_likable = std::numeric_limits<double>::quiet_NaN();
  std::string status = "ok";
};

struct SweepAggregate {
  std::size_t delta_t = 0;
  std::size_t n_ok = 0;
  double mean_acc_reward = std::numeric_limits<double>::quiet_NaN();
  double stderr_acc_reward = std::numeric_limits<double>::quiet_NaN();
  double mean_reward_likable = std::numeric_limits<double>::quiet_NaN();
};

struct SweepResult {
  std::vector<SweepCell> cells;

  std::vector<SweepAggregate> aggregate() const {
    std::map<std::size_t, std::vector<const SweepCell*>> by_delta;
    std::vector<std::size_t> order;
    for (const auto& c : cells) {
      if (!by_delta.contains(c.delta_t)) order.push_back(c.delta_t);
      by_delta[c.delta_t].push_back(&c);
    }
    std::vector<SweepAggregate> out;
    for (std::size_t dt : order) {
      SweepAggregate a;
      a.delta_t = dt;
      double sum = 0.0;
      double sum_likable = 0.0;
      for (const auto* c : by_delta[dt])
        if (c->status == "ok") {
          ++a.n_ok;
          sum += c->acc_reward;
          sum_likable += c->reward_likable;
        }
      if (a.n_ok > 0) {
        a.mean_acc_reward = sum / static_cast<double>(a.n_ok);
        a.mean_reward_likable = sum_likable / static_cast<double>(a.n_ok);
        double ss = 0.0;
        for (const auto* c : by_delta[dt])
          if (c->status == "ok") ss += (c->acc_reward - a.mean_acc_reward) * (c->acc_reward - a.mean_acc_reward);
        if (a.n_ok > 1)
          a.stderr_acc_reward = std::sqrt(ss / static_cast<double>(a.n_ok - 1) / static_cast<double>(a.n_ok));
      }
      out.push_back(a);
    }
    return out;
  }
};

namespace detail {
inline void write_number(std::ostream& out, double v) {
  if (std::isnan(v))
    out << "NA";
  else
    out << nlohmann::json(v).dump();
}
}  // namespace detail

/// CSV: delta_t,seed,acc_reward,reward_likable,status
inline void write_sweep_csv(std::ostream& out, const SweepResult& r, const std::string& fingerprint,
                            std::uint64_t seed) {
  out << "# config_fingerprint=" << fingerprint << " seed=" << seed << '\n';
  out << "delta_t,seed,acc_reward,reward_likable,status\n";
  for (const auto& c : r.cells) {
    out << c.delta_t << ',' << c.seed << ',';
    detail::write_number(out, c.acc_reward);
    out << ',';
    detail::write_number(out, c.reward_likable);
    out << ',' << c.status << '\n';
  }
}

/// CSV: delta_t,n_ok,mean_acc_reward,stderr_acc_reward,mean_reward_likable
inline void write_sweep_summary_csv(std::ostream& out, const SweepResult& r, const std::string& fingerprint,
                                    std::uint64_t seed) {
  out << "# config_fingerprint=" << fingerprint << " seed=" << seed << '\n';
  out << "delta_t,n_ok,mean_acc_reward,stderr_acc_reward,mean_reward_likable\n";
  for (const auto& a : r.aggregate()) {
    out << a.delta_t << ',' << a.n_ok << ',';
    detail::write_number(out, a.mean_acc_reward);
    out << ',';
    detail::write_number(out, a.stderr_acc_reward);
    out << ',';
    detail::write_number(out, a.mean_reward_likable);
    out << '\n';
  }
}

/// run_collaborative for every (delta_t, seed); a failing cell is recorded
/// with its error message instead of aborting the sweep.
inline SweepResult sweep_batch_size(const Environment& env, std::size_t horizon,
                                    const std::vector<std::size_t>& delta_ts, const std::vector<std::uint64_t>& seeds,
                                    const HyperParams& base, std::size_t jobs = 1) {
  for (std::size_t dt : delta_ts)
    if (dt == 0 || dt > horizon) throw ParameterError("sweep delta_t must lie in [1, horizon]");
  SweepResult result;
  result.cells.resize(delta_ts.size() * seeds.size());
  parallel_for(result.cells.size(), jobs, [&](std::size_t k) {
    SweepCell& cell = result.cells[k];
    cell.delta_t = delta_ts[k / seeds.size()];
    cell.seed = seeds[k % seeds.size()];
    HyperParams h = base;
    h.delta_t = cell.delta_t;
    h.horizon = horizon;
    try {
      const RunTrace trace = run_collaborative(env, h, horizon, cell.seed);
      cell.acc_reward = acc_reward(trace);
      if (env.kind() != EnvKind::replay) cell.reward_likable = reward_likable(trace, env);
    } catch (const Error& e) {
      cell.status = std::string("error: ") + e.what();
      std::replace(cell.status.begin(), cell.status.end(), ',', ';');
      std::replace(cell.status.begin(), cell.status.end(), '\n', ' ');
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Verification suites

struct Check {
  std::string name;
  double observed = 0.0;
  double bound = 0.0;
  bool pass = false;
};

struct VerificationReport {
  std::string suite;
  std::vector<Check> checks;

  bool pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
  }
};

inline void to_json(nlohmann::json& j, const Check& c) {
  j = {{"name", c.name}, {"observed", c.observed}, {"bound", c.bound}, {"pass", c.pass}};
}

inline void to_json(nlohmann::json& j, const VerificationReport& r) {
  j = {{"suite", r.suite}, {"pass", r.pass()}, {"checks", r.checks}};
}

/// Lower bound 2 g2 D^2 + 1/2 on the same-type agreement probability.
inline double same_type_agreement_bound(const ModelParams& p) { return 2.0 * p.gamma2 * p.delta * p.delta + 0.5; }
/// Upper bound 2 g1 D^2 + 1/2 on the cross-type agreement probability.
inline double cross_type_agreement_bound(const ModelParams& p) { return 2.0 * p.gamma1 * p.delta * p.delta + 0.5; }

/// Exact check of both agreement bounds over all pairs, plus Monte-Carlo
/// agreement frequencies for `pair_samples` random pairs of each kind
/// (each over `items_per_pair` random items) within 3 binomial sigma.
inline VerificationReport verify_lemma1(const PreferenceMatrix& prefs, const std::vector<TypeId>& types,
                                        const ModelParams& params, std::size_t pair_samples,
                                        std::size_t items_per_pair, std::uint64_t seed) {
  VerificationReport report{"lemma1", {}};
  const double lower = same_type_agreement_bound(params);
  const double upper = cross_type_agreement_bound(params);
  double min_same = std::numeric_limits<double>::infinity();
  double max_cross = -std::numeric_limits<double>::infinity();
  std::vector<std::pair<UserId, UserId>> same_pairs;
  std::vector<std::pair<UserId, UserId>> cross_pairs;
  for (UserId u = 0; u < prefs.n_users(); ++u)
    for (UserId v = u + 1; v < prefs.n_users(); ++v) {
      const double a = agreement_probability(prefs.row(u), prefs.row(v));
      if (types[u] == types[v]) {
        min_same = std::min(min_same, a);
        same_pairs.emplace_back(u, v);
      } else {
        max_cross = std::max(max_cross, a);
        cross_pairs.emplace_back(u, v);
      }
    }
  if (!same_pairs.empty())
    report.checks.push_back({"exact_same_type_min", min_same, lower, min_same >= lower - kAssumptionSlack});
  if (!cross_pairs.empty())
    report.checks.push_back({"exact_cross_type_max", max_cross, upper, max_cross <= upper + kAssumptionSlack});

  Rng rng = Rng::stream(seed, "verify/lemma1");
  auto sample = [&](const std::vector<std::pair<UserId, UserId>>& pairs, bool same) {
    if (pairs.empty() || items_per_pair == 0) return;
    const double b = same ? lower : upper;
    const double sigma = std::sqrt(std::max(b * (1.0 - b), 0.0) / static_cast<double>(items_per_pair));
    for (std::size_t k = 0; k < pair_samples; ++k) {
      const auto [u, v] = pairs[rng.index(pairs.size())];
      std::size_t agree = 0;
      for (std::size_t s = 0; s < items_per_pair; ++s) {
        const ItemId i = rng.index(prefs.n_items());
        agree += sample_rating(prefs, u, i, rng) == sample_rating(prefs, v, i, rng);
      }
      const double freq = static_cast<double>(agree) / static_cast<double>(items_per_pair);
      const std::string name = std::string(same ? "mc_same_type" : "mc_cross_type") + "(" + std::to_string(u) +
                               "," + std::to_string(v) + ")";
      if (same)
        report.checks.push_back({name, freq, b - 3.0 * sigma, freq >= b - 3.0 * sigma});
      else
        report.checks.push_back({name, freq, b + 3.0 * sigma, freq <= b + 3.0 * sigma});
    }
  };
  sample(same_pairs, true);
  sample(cross_pairs, false);
  return report;
}

struct Lemma2Options {
  std::optional<std::size_t> length;  // defaults to T_static(delta)
  std::optional<double> lambda;       // defaults to the interval midpoint
  std::size_t jobs = 1;
};

/// Repeats cosine_test on fresh responses to L random items for all users and
/// compares the recovered partition with the true type partition.
inline VerificationReport verify_lemma2(const PreferenceMatrix& prefs, const std::vector<TypeId>& types,
                                        const ModelParams& params, double delta_tol, std::size_t trials,
                                        std::uint64_t seed, const Lemma2Options& options = {}) {
  const std::size_t length =
      options.length.value_or(static_test_length(prefs.n_users(), params.delta, params.gamma1, params.gamma2, delta_tol));
  const double lambda = options.lambda.value_or(default_lambda(params.delta, params.gamma1, params.gamma2));
  if (length == 0 || length > prefs.n_items())
    throw ParameterError("test length " + std::to_string(length) + " must lie in [1, n_items]");
  std::vector<UserId> users(prefs.n_users());
  for (UserId u = 0; u < users.size(); ++u) users[u] = u;
  const Partition truth = partition_from_labels(users, types);
  std::vector<char> correct(trials, 0);
  parallel_for(trials, options.jobs, [&](std::size_t trial) {
    Rng rng = Rng::stream(seed, "verify/lemma2", trial);
    ResponseTable table;
    table.users = users;
    table.items = rng.sample_without_replacement(rng.permutation(prefs.n_items()), length);
    table.responses.assign(users.size(), std::vector<int>(length));
    for (UserId u : users)
      for (std::size_t k = 0; k < length; ++k) table.responses[u][k] = sample_rating(prefs, u, table.items[k], rng);
    correct[trial] = cosine_test(table, lambda) == truth;
  });
  const double rate =
      trials == 0 ? 1.0 : static_cast<double>(std::count(correct.begin(), correct.end(), 1)) / static_cast<double>(trials);
  const double target = 1.0 - delta_tol / 3.0;
  const double sigma = trials == 0 ? 0.0 : std::sqrt(target * (1.0 - target) / static_cast<double>(trials));
  VerificationReport report{"lemma2", {}};
  report.checks.push_back({"test_length", static_cast<double>(length), static_cast<double>(length), true});
  report.checks.push_back({"lambda", lambda, lambda, true});
  report.checks.push_back({"correct_partition_rate", rate, target - 3.0 * sigma, rate >= target - 3.0 * sigma});
  return report;
}

}  // namespace collab
