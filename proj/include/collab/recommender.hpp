#pragma once

// Batched collaborative recommender: per-batch reference partition, periodic
// variation tests, shared explore coin and neighbourhood-score exploitation.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "collab/common.hpp"
#include "collab/environment.hpp"
#include "collab/params.hpp"
#include "collab/partition.hpp"
#include "collab/rng.hpp"

namespace collab {

enum class Phase { reference_test, test, explore, exploit, fallback };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::reference_test: return "reference_test";
    case Phase::test: return "test";
    case Phase::explore: return "explore";
    case Phase::exploit: return "exploit";
    case Phase::fallback: return "fallback";
  }
  return "?";
}

struct TraceRecord {
  Round round = 0;
  std::size_t batch = 0;
  UserId user = 0;
  Phase phase = Phase::explore;
  ItemId item = 0;
  int response = 0;
  std::optional<bool> likable;

  bool operator==(const TraceRecord&) const = default;
};

struct RunTrace {
  std::size_t n_users = 0;
  std::size_t horizon = 0;
  std::uint64_t seed = 0;
  std::string fingerprint;
  std::vector<TraceRecord> records;
  std::vector<Round> batch_starts;
  std::vector<std::string> warnings;
};

/// CSV: round,batch,user,phase,item,response,likable (likable 0/1/NA),
/// preceded by a provenance comment line.
inline void write_trace_csv(std::ostream& out, const RunTrace& trace) {
  out << "# config_fingerprint=" << trace.fingerprint << " seed=" << trace.seed << '\n';
  out << "round,batch,user,phase,item,response,likable\n";
  for (const auto& r : trace.records) {
    out << r.round << ',' << r.batch << ',' << r.user << ',' << to_string(r.phase) << ',' << r.item << ','
        << r.response << ',';
    if (r.likable)
      out << (*r.likable ? '1' : '0');
    else
      out << "NA";
    out << '\n';
  }
}

/// Exact ratio plus/count; count == 0 encodes the uninformed score 1/2.
struct ScoreValue {
  long long plus = 1;
  long long count = 2;

  double value() const { return static_cast<double>(plus) / static_cast<double>(count); }
  friend bool operator>(const ScoreValue& a, const ScoreValue& b) { return a.plus * b.count > b.plus * a.count; }
};

/// Mutable per-run state. Batch-scoped fields are reset by start_batch(); the
/// consumed sets persist over the whole horizon.
class RecommenderState {
 public:
  static constexpr std::size_t kNoCluster = std::numeric_limits<std::size_t>::max();

  RecommenderState(std::size_t n_users, std::size_t n_items)
      : n_users_(n_users),
        n_items_(n_items),
        consumed_(n_users * n_items, 0),
        pool_(n_users),
        pool_pos_(n_users, std::vector<std::uint32_t>(n_items)) {
    for (UserId u = 0; u < n_users; ++u) {
      pool_[u].resize(n_items);
      for (ItemId i = 0; i < n_items; ++i) {
        pool_[u][i] = static_cast<std::uint32_t>(i);
        pool_pos_[u][i] = static_cast<std::uint32_t>(i);
      }
    }
  }

  std::size_t n_users() const { return n_users_; }
  std::size_t n_items() const { return n_items_; }

  void start_batch(std::size_t index, Round first, Round last, Rng& rng) {
    batch_index_ = index;
    batch_first_ = first;
    batch_last_ = last;
    next_round_ = first;
    reference_ = Partition{};
    cluster_of_.assign(n_users_, kNoCluster);
    active_.assign(n_users_, 1);
    ratings_.assign(n_users_ * n_items_, 0);
    rated_in_batch_.assign(n_users_, {});
    plus_.clear();
    count_.clear();
    sigma_ = rng.permutation(n_items_);
    sigma_rank_.assign(n_items_, 0);
    for (std::size_t pos = 0; pos < n_items_; ++pos) sigma_rank_[sigma_[pos]] = pos;
  }

  std::size_t batch_index() const { return batch_index_; }
  Round batch_first() const { return batch_first_; }
  Round batch_last() const { return batch_last_; }
  Round next_round() const { return next_round_; }
  std::size_t rounds_used_in_batch() const { return next_round_ - batch_first_; }
  std::size_t rounds_remaining() const { return batch_last_ + 1 - next_round_; }
  void advance_round() { ++next_round_; }

  const Partition& reference() const { return reference_; }
  std::size_t cluster_of(UserId u) const { return cluster_of_.at(u); }
  const std::vector<ItemId>& sigma() const { return sigma_; }
  std::size_t sigma_rank(ItemId i) const { return sigma_rank_.at(i); }

  bool is_active(UserId u) const { return active_.at(u) != 0; }
  std::vector<UserId> active_users() const { return members(true); }
  std::vector<UserId> bad_users() const { return members(false); }

  int batch_rating(UserId u, ItemId i) const { return ratings_.at(u * n_items_ + i); }
  bool is_consumed(UserId u, ItemId i) const { return consumed_.at(u * n_items_ + i) != 0; }
  std::size_t unconsumed_count(UserId u) const { return pool_.at(u).size(); }
  ItemId unconsumed_at(UserId u, std::size_t k) const { return pool_[u][k]; }

  /// Records u's response to i: consumes the item and stores the batch rating.
  void record(UserId u, ItemId i, int response) {
    if (is_consumed(u, i)) throw StateError("item " + std::to_string(i) + " already consumed by user " + std::to_string(u));
    consumed_[u * n_items_ + i] = 1;
    auto& pool = pool_[u];
    const std::uint32_t pos = pool_pos_[u][i];
    const std::uint32_t last = pool.back();
    pool[pos] = last;
    pool_pos_[u][last] = pos;
    pool.pop_back();
    ratings_[u * n_items_ + i] = static_cast<std::int8_t>(response);
    rated_in_batch_[u].push_back(i);
    if (active_[u] && cluster_of_[u] != kNoCluster) tally(cluster_of_[u], i, response, +1);
  }

  /// Installs P0 and rebuilds the per-cluster tallies over active users.
  void set_reference(Partition p0) {
    reference_ = std::move(p0);
    cluster_of_.assign(n_users_, kNoCluster);
    for (std::size_t c = 0; c < reference_.clusters.size(); ++c)
      for (UserId u : reference_.clusters[c]) cluster_of_.at(u) = c;
    plus_.assign(reference_.clusters.size(), std::vector<int>(n_items_, 0));
    count_.assign(reference_.clusters.size(), std::vector<int>(n_items_, 0));
    for (UserId u = 0; u < n_users_; ++u)
      if (active_[u] && cluster_of_[u] != kNoCluster)
        for (ItemId i : rated_in_batch_[u]) tally(cluster_of_[u], i, batch_rating(u, i), +1);
  }

  /// Moves u from S_t to V_t, removing its ratings from everyone's neighbourhood.
  void deactivate(UserId u) {
    if (!active_.at(u)) return;
    if (cluster_of_[u] != kNoCluster)
      for (ItemId i : rated_in_batch_[u]) tally(cluster_of_[u], i, batch_rating(u, i), -1);
    active_[u] = 0;
  }

  /// Score of item i shared by every member of P0 cluster c (neigh = c n S_t).
  ScoreValue cluster_score(std::size_t c, ItemId i) const {
    const int n = count_[c][i];
    if (n == 0) return {};
    return {plus_[c][i], n};
  }

 private:
  void tally(std::size_t c, ItemId i, int response, int sign) {
    if (response == 0) return;
    count_[c][i] += sign;
    if (response > 0) plus_[c][i] += sign;
  }

  std::vector<UserId> members(bool active) const {
    std::vector<UserId> out;
    for (UserId u = 0; u < n_users_; ++u)
      if ((active_.at(u) != 0) == active) out.push_back(u);
    return out;
  }

  std::size_t n_users_;
  std::size_t n_items_;
  std::size_t batch_index_ = 0;
  Round batch_first_ = 1;
  Round batch_last_ = 0;
  Round next_round_ = 1;
  Partition reference_;
  std::vector<std::size_t> cluster_of_;
  std::vector<char> active_;
  std::vector<std::int8_t> ratings_;
  std::vector<std::vector<ItemId>> rated_in_batch_;
  std::vector<ItemId> sigma_;
  std::vector<std::size_t> sigma_rank_;
  std::vector<std::vector<int>> plus_;
  std::vector<std::vector<int>> count_;
  std::vector<std::uint8_t> consumed_;
  std::vector<std::vector<std::uint32_t>> pool_;
  std::vector<std::vector<std::uint32_t>> pool_pos_;
};

/// Empirical like-probability of i for u from the ratings of neigh(u) = P0(u) n S_t
/// in the current batch; exactly 1/2 when no neighbour rated i.
inline double score(UserId u, ItemId i, const RecommenderState& state) {
  if (u >= state.n_users() || state.cluster_of(u) == RecommenderState::kNoCluster)
    throw StateError("user " + std::to_string(u) + " is not covered by the reference partition");
  if (i >= state.n_items()) throw ParameterError("item index out of range");
  std::size_t rated = 0;
  std::size_t liked = 0;
  for (UserId v : state.reference().clusters[state.cluster_of(u)]) {
    if (!state.is_active(v)) continue;
    const int r = state.batch_rating(v, i);
    rated += r != 0;
    liked += r == 1;
  }
  if (rated == 0) return 0.5;
  return static_cast<double>(liked) / static_cast<double>(rated);
}

/// Unconsumed item of u maximising `score_of(item)`; ties go to the earliest
/// position in sigma.
template <typename ScoreFn>
ItemId argmax_unconsumed(UserId u, const RecommenderState& state, ScoreFn&& score_of) {
  std::optional<ItemId> best;
  decltype(score_of(ItemId{})) best_score{};
  for (ItemId i : state.sigma()) {
    if (state.is_consumed(u, i)) continue;
    auto s = score_of(i);
    if (!best || s > best_score) {
      best = i;
      best_score = s;
    }
  }
  if (!best) throw ExhaustionError("user " + std::to_string(u) + " has no unconsumed item left");
  return *best;
}

/// Greedy choice over u's unconsumed items. Also serves users in V_t (fallback),
/// whose neighbourhood is their P0 cluster restricted to S_t.
inline ItemId exploit_choice(UserId u, const RecommenderState& state) {
  const std::size_t c = state.cluster_of(u);
  if (c == RecommenderState::kNoCluster)
    throw StateError("user " + std::to_string(u) + " is not covered by the reference partition");
  return argmax_unconsumed(u, state, [&](ItemId i) { return state.cluster_score(c, i); });
}

/// Uniform item among those u has not consumed.
inline ItemId explore_choice(UserId u, const RecommenderState& state, Rng& rng) {
  const std::size_t left = state.unconsumed_count(u);
  if (left == 0) throw ExhaustionError("user " + std::to_string(u) + " has no unconsumed item left");
  return state.unconsumed_at(u, rng.index(left));
}

namespace detail {

inline void deliver(RecommenderState& state, const Environment& env, RunTrace& trace, UserId u, ItemId i,
                    Phase phase) {
  const Round t = state.next_round();
  const int response = env.respond(u, i, t);
  state.record(u, i, response);
  trace.records.push_back({t, state.batch_index(), u, phase, i, response, env.likable(u, i, t)});
}

/// Items no user in `users` has consumed.
inline std::vector<ItemId> fresh_items(const RecommenderState& state, const std::vector<UserId>& users) {
  std::vector<ItemId> out;
  for (ItemId i = 0; i < state.n_items(); ++i) {
    bool fresh = true;
    for (UserId u : users)
      if (state.is_consumed(u, i)) {
        fresh = false;
        break;
      }
    if (fresh) out.push_back(i);
  }
  return out;
}

/// Recommends `length` fresh items to `users`, one per round; users outside
/// `users` get fallback recommendations in those rounds. Returns the table.
inline ResponseTable recommend_test_items(RecommenderState& state, const Environment& env, Rng& rng,
                                          RunTrace& trace, const std::vector<UserId>& users, std::size_t length,
                                          Phase phase) {
  auto pool = fresh_items(state, users);
  if (pool.size() < length)
    throw ExhaustionError("round " + std::to_string(state.next_round()) + ": only " + std::to_string(pool.size()) +
                          " items are fresh for all tested users, " + std::to_string(length) + " needed");
  ResponseTable table;
  table.users = users;
  table.items = rng.sample_without_replacement(std::move(pool), length);
  table.responses.assign(users.size(), std::vector<int>(length, 0));
  const auto others = state.bad_users();
  for (std::size_t k = 0; k < length; ++k) {
    std::vector<ItemId> fallback;
    if (phase == Phase::test)
      for (UserId u : others) fallback.push_back(exploit_choice(u, state));
    for (std::size_t row = 0; row < users.size(); ++row) {
      deliver(state, env, trace, users[row], table.items[k], phase);
      table.responses[row][k] = trace.records.back().response;
    }
    for (std::size_t j = 0; j < fallback.size(); ++j) deliver(state, env, trace, others[j], fallback[j], Phase::fallback);
    state.advance_round();
  }
  return table;
}

}  // namespace detail

/// Reference test at batch start: T_static fresh items to all users (fewer if
/// the batch is shorter), P0 <- cosine_test, S <- [N].
inline Partition run_reference_test(RecommenderState& state, const Environment& env, const HyperParams& hyper,
                                    Rng& rng, RunTrace& trace) {
  const std::size_t length = std::min(hyper.t_static, state.rounds_remaining());
  std::vector<UserId> everyone(state.n_users());
  for (UserId u = 0; u < everyone.size(); ++u) everyone[u] = u;
  auto table = detail::recommend_test_items(state, env, rng, trace, everyone, length, Phase::reference_test);
  auto p0 = length > 0 ? cosine_test(table, hyper.lambda) : Partition::single(everyone);
  state.set_reference(p0);
  return p0;
}

/// Variation test: T_static fresh items to S_{t-1}, P <- cosine_test,
/// V <- detect_variation(P, P0), S_t <- S_{t-1} \ V. Requires T_static rounds.
inline Partition run_test_phase(RecommenderState& state, const Environment& env, const HyperParams& hyper, Rng& rng,
                                RunTrace& trace) {
  if (state.rounds_remaining() < hyper.t_static)
    throw StateError("test phase needs " + std::to_string(hyper.t_static) + " rounds, batch has " +
                     std::to_string(state.rounds_remaining()));
  const auto tested = state.active_users();
  if (tested.empty()) {
    // Nobody to test: the rounds still elapse, served by fallback.
    for (std::size_t k = 0; k < hyper.t_static; ++k) {
      std::vector<ItemId> picks;
      for (UserId u = 0; u < state.n_users(); ++u) picks.push_back(exploit_choice(u, state));
      for (UserId u = 0; u < state.n_users(); ++u) detail::deliver(state, env, trace, u, picks[u], Phase::fallback);
      state.advance_round();
    }
    return {};
  }
  auto table = detail::recommend_test_items(state, env, rng, trace, tested, hyper.t_static, Phase::test);
  auto p = cosine_test(table, hyper.lambda);
  for (UserId u : detect_variation(p, state.reference())) state.deactivate(u);
  return p;
}

/// One round: a shared explore coin; heads -> everyone explores, tails -> S_t
/// exploits and V_t gets the fallback recommendation.
inline void run_explore_exploit_round(RecommenderState& state, const Environment& env, const HyperParams& hyper,
                                      Rng& rng, RunTrace& trace) {
  const bool explore = rng.bernoulli(hyper.p_explore);
  std::vector<ItemId> picks(state.n_users());
  for (UserId u = 0; u < state.n_users(); ++u) {
    try {
      picks[u] = explore ? explore_choice(u, state, rng) : exploit_choice(u, state);
    } catch (const ExhaustionError& e) {
      throw ExhaustionError("round " + std::to_string(state.next_round()) + ": " + e.what());
    }
  }
  for (UserId u = 0; u < state.n_users(); ++u) {
    const Phase phase = explore ? Phase::explore : (state.is_active(u) ? Phase::exploit : Phase::fallback);
    detail::deliver(state, env, trace, u, picks[u], phase);
  }
  state.advance_round();
}

/// One batch over rounds [first, last]: reference test, then per round a
/// Bernoulli(p_test) coin for an (atomic) variation test, else explore/exploit.
inline void run_batch(RecommenderState& state, const Environment& env, const HyperParams& hyper, Rng& rng,
                      RunTrace& trace, std::size_t batch_index, Round first, Round last) {
  state.start_batch(batch_index, first, last, rng);
  trace.batch_starts.push_back(first);
  run_reference_test(state, env, hyper, rng, trace);
  while (state.rounds_remaining() > 0) {
    const bool test = rng.bernoulli(hyper.p_test);
    if (test && state.rounds_remaining() >= hyper.t_static)
      run_test_phase(state, env, hyper, rng, trace);
    else
      run_explore_exploit_round(state, env, hyper, rng, trace);
  }
}

/// Engine stream of batch b for a run seeded with `seed`.
inline Rng batch_rng(std::uint64_t seed, std::size_t batch_index) {
  return Rng::stream(seed, "engine/batch", batch_index);
}

/// Splits [1, T] into ceil(T / delta_t) batches and runs each from a fresh
/// batch state; consumed items carry over between batches.
inline RunTrace run_collaborative(const Environment& env, const HyperParams& hyper, std::size_t horizon,
                                  std::uint64_t seed) {
  hyper.validate();
  RunTrace trace;
  trace.n_users = env.n_users();
  trace.horizon = horizon;
  trace.seed = seed;
  if (horizon == 0) return trace;
  if (env.n_items() < horizon)
    trace.warnings.push_back("catalog of " + std::to_string(env.n_items()) + " items is smaller than the horizon " +
                             std::to_string(horizon) + "; exhaustion is certain");
  const std::size_t batches = (horizon + hyper.delta_t - 1) / hyper.delta_t;
  const double expected_tests =
      static_cast<double>(batches) + hyper.p_test * static_cast<double>(horizon);
  if (static_cast<double>(env.n_items()) <
      static_cast<double>(horizon) + expected_tests * static_cast<double>(hyper.t_static))
    trace.warnings.push_back("catalog may be too small for fresh test items (needs about " +
                             std::to_string(static_cast<std::size_t>(
                                 static_cast<double>(horizon) + expected_tests * static_cast<double>(hyper.t_static))) +
                             ")");
  trace.records.reserve(horizon * env.n_users());
  RecommenderState state(env.n_users(), env.n_items());
  for (std::size_t b = 1; b <= batches; ++b) {
    Rng rng = batch_rng(seed, b);
    const Round first = (b - 1) * hyper.delta_t + 1;
    const Round last = std::min(horizon, b * hyper.delta_t);
    run_batch(state, env, hyper, rng, trace, b, first, last);
  }
  return trace;
}

}  // namespace collab
