#pragma once

// Latent source model: per-type preference templates, per-user idiosyncratic
// tails, user-type schedules, rating sampling and the assumption checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "collab/common.hpp"
#include "collab/rng.hpp"

namespace collab {

struct ModelParams {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_types = 1;
  double delta = 0.5;   // minimum gap |p - 1/2|
  double mu = 0.5;      // minimum likable fraction
  double gamma1 = 0.0;  // cross-type incoherence
  double gamma2 = 1.0;  // same-type coherence
  double nu = 1.0;      // minimum type occupancy fraction
  std::size_t d_shared = 0;

  /// Throws ParameterError naming the first violated constraint.
  void validate() const {
    auto fail = [](const std::string& what) { throw ParameterError("invalid model params: " + what); };
    if (n_users == 0) fail("n_users must be positive");
    if (n_items == 0) fail("n_items must be positive");
    if (n_types == 0) fail("n_types must be positive");
    if (!(n_types < n_users)) fail("n_types < n_users required");
    if (!(delta > 0.0 && delta <= 0.5)) fail("delta must lie in (0, 1/2]");
    if (!(mu >= 0.0 && mu <= 1.0)) fail("mu must lie in [0, 1]");
    if (!(gamma1 >= 0.0 && gamma1 < 1.0)) fail("gamma1 must lie in [0, 1)");
    if (!(gamma2 >= gamma1 && gamma2 <= 1.0)) fail("gamma2 must lie in [gamma1, 1]");
    if (!(nu > 0.0 && nu <= 1.0 / static_cast<double>(n_types) + 1e-12))
      fail("nu must lie in (0, 1/n_types]");
    if (d_shared > n_items) fail("d_shared <= n_items required");
  }
};

inline void to_json(nlohmann::json& j, const ModelParams& p) {
  j = {{"n_users", p.n_users}, {"n_items", p.n_items}, {"n_types", p.n_types},
       {"delta", p.delta},     {"mu", p.mu},           {"gamma1", p.gamma1},
       {"gamma2", p.gamma2},   {"nu", p.nu},           {"d_shared", p.d_shared}};
}

inline void from_json(const nlohmann::json& j, ModelParams& p) {
  j.at("n_users").get_to(p.n_users);
  j.at("n_items").get_to(p.n_items);
  j.at("n_types").get_to(p.n_types);
  j.at("delta").get_to(p.delta);
  j.at("mu").get_to(p.mu);
  j.at("gamma1").get_to(p.gamma1);
  j.at("gamma2").get_to(p.gamma2);
  j.at("nu").get_to(p.nu);
  j.at("d_shared").get_to(p.d_shared);
}

/// Row-major N x M like-probabilities plus the blocks they were assembled from.
class PreferenceMatrix {
 public:
  PreferenceMatrix() = default;

  /// Builds rows [templates[types[u]]; tails[u]]. templates: K x d, tails: N x (M-d).
  static PreferenceMatrix assemble(std::vector<std::vector<double>> templates,
                                   std::vector<std::vector<double>> tails,
                                   const std::vector<TypeId>& types) {
    if (tails.size() != types.size()) throw ParameterError("tails/types size mismatch");
    if (templates.empty()) throw ParameterError("at least one template required");
    PreferenceMatrix p;
    p.n_users_ = types.size();
    p.d_ = templates.front().size();
    p.n_items_ = p.d_ + (tails.empty() ? 0 : tails.front().size());
    for (const auto& b : templates)
      if (b.size() != p.d_) throw ParameterError("ragged templates");
    for (const auto& e : tails)
      if (e.size() != p.n_items_ - p.d_) throw ParameterError("ragged tails");
    p.templates_ = std::move(templates);
    p.tails_ = std::move(tails);
    p.probs_.resize(p.n_users_ * p.n_items_);
    for (UserId u = 0; u < p.n_users_; ++u) {
      if (types[u] >= p.templates_.size()) throw ParameterError("type index out of range");
      p.fill_row(u, types[u], std::span<double>(p.probs_).subspan(u * p.n_items_, p.n_items_));
    }
    return p;
  }

  std::size_t n_users() const { return n_users_; }
  std::size_t n_items() const { return n_items_; }
  std::size_t n_types() const { return templates_.size(); }
  std::size_t d_shared() const { return d_; }

  std::span<const double> row(UserId u) const {
    if (u >= n_users_) throw ParameterError("user index out of range");
    return std::span<const double>(probs_).subspan(u * n_items_, n_items_);
  }
  double at(UserId u, ItemId i) const {
    if (u >= n_users_ || i >= n_items_) throw ParameterError("preference index out of range");
    return probs_[u * n_items_ + i];
  }

  const std::vector<std::vector<double>>& templates() const { return templates_; }
  const std::vector<std::vector<double>>& idiosyncratic() const { return tails_; }

  /// Like-probability of u for item i when u is of type `type`.
  double at_type(UserId u, TypeId type, ItemId i) const {
    return i < d_ ? templates_[type][i] : tails_[u][i - d_];
  }

  void fill_row(UserId u, TypeId type, std::span<double> out) const {
    std::copy(templates_[type].begin(), templates_[type].end(), out.begin());
    std::copy(tails_[u].begin(), tails_[u].end(), out.begin() + static_cast<std::ptrdiff_t>(d_));
  }

 private:
  std::size_t n_users_ = 0;
  std::size_t n_items_ = 0;
  std::size_t d_ = 0;
  std::vector<double> probs_;
  std::vector<std::vector<double>> templates_;
  std::vector<std::vector<double>> tails_;
};

/// T_u(t) for u in [N], t in [1, T].
class VariationSchedule {
 public:
  VariationSchedule() = default;
  VariationSchedule(std::size_t n_users, std::size_t horizon)
      : n_users_(n_users), horizon_(horizon), types_(n_users * horizon, 0) {}

  static VariationSchedule constant(const std::vector<TypeId>& initial, std::size_t horizon) {
    VariationSchedule s(initial.size(), horizon);
    for (UserId u = 0; u < initial.size(); ++u)
      for (Round t = 1; t <= horizon; ++t) s.set(u, t, initial[u]);
    return s;
  }

  std::size_t n_users() const { return n_users_; }
  std::size_t horizon() const { return horizon_; }

  TypeId type_at(UserId u, Round t) const {
    check(u, t);
    return types_[u * horizon_ + (t - 1)];
  }
  void set(UserId u, Round t, TypeId type) {
    check(u, t);
    types_[u * horizon_ + (t - 1)] = type;
  }
  /// Sets T_u(s) = type for every s >= t.
  void switch_from(UserId u, Round t, TypeId type) {
    for (Round s = t; s <= horizon_; ++s) set(u, s, type);
  }

  std::size_t switch_count(UserId u) const {
    std::size_t c = 0;
    for (Round t = 1; t < horizon_; ++t) c += type_at(u, t) != type_at(u, t + 1);
    return c;
  }

  /// Rounds t in [1, T] such that T_u(t) != T_u(t-1).
  std::vector<Round> change_rounds(UserId u) const {
    std::vector<Round> out;
    for (Round t = 2; t <= horizon_; ++t)
      if (type_at(u, t) != type_at(u, t - 1)) out.push_back(t);
    return out;
  }

  std::size_t min_occupancy(std::size_t n_types) const {
    std::size_t best = n_users_;
    std::vector<std::size_t> count(n_types);
    for (Round t = 1; t <= horizon_; ++t) {
      std::fill(count.begin(), count.end(), 0);
      for (UserId u = 0; u < n_users_; ++u) ++count.at(type_at(u, t));
      best = std::min(best, *std::min_element(count.begin(), count.end()));
    }
    return best;
  }

  std::vector<TypeId> types_at(Round t) const {
    std::vector<TypeId> out(n_users_);
    for (UserId u = 0; u < n_users_; ++u) out[u] = type_at(u, t);
    return out;
  }

  bool operator==(const VariationSchedule&) const = default;

 private:
  void check(UserId u, Round t) const {
    if (u >= n_users_ || t == 0 || t > horizon_) throw ParameterError("schedule index out of range");
  }

  std::size_t n_users_ = 0;
  std::size_t horizon_ = 0;
  std::vector<TypeId> types_;
};

/// Maximum per-user switch count.
inline std::size_t variation_v1(const VariationSchedule& s) {
  std::size_t v = 0;
  for (UserId u = 0; u < s.n_users(); ++u) v = std::max(v, s.switch_count(u));
  return v;
}

/// Total switches divided by N.
inline double variation_v2(const VariationSchedule& s) {
  if (s.n_users() == 0) return 0.0;
  std::size_t total = 0;
  for (UserId u = 0; u < s.n_users(); ++u) total += s.switch_count(u);
  return static_cast<double>(total) / static_cast<double>(s.n_users());
}

struct GeneratedModel {
  PreferenceMatrix prefs;
  std::vector<TypeId> types;
};

namespace detail {

/// Vector of `len` entries equal to 1/2-delta with exactly ceil(mu*len) of them
/// raised to 1/2+delta at uniformly random positions.
inline std::vector<double> draw_block(std::size_t len, double delta, double mu, Rng& rng) {
  std::vector<double> block(len, 0.5 - delta);
  const auto likable = std::min(len, static_cast<std::size_t>(std::ceil(mu * static_cast<double>(len) - 1e-9)));
  for (std::size_t pos : rng.sample_without_replacement(rng.permutation(len), likable)) block[pos] = 0.5 + delta;
  return block;
}

}  // namespace detail

/// Round-robin type assignment u -> u mod K.
inline std::vector<TypeId> round_robin_types(std::size_t n_users, std::size_t n_types) {
  std::vector<TypeId> types(n_users);
  for (UserId u = 0; u < n_users; ++u) types[u] = u % n_types;
  return types;
}

/// Block generator: templates b_l (K x d) and tails e_u (N x (M-d)) whose
/// entries are 1/2 +- delta, with a mu-fraction of likable entries per block.
inline GeneratedModel generate_model(const ModelParams& params, std::uint64_t seed) {
  params.validate();
  const std::size_t smallest = params.n_users / params.n_types;
  if (static_cast<double>(smallest) + 1e-9 < params.nu * static_cast<double>(params.n_users))
    throw ParameterError("invalid model params: round-robin groups of size " + std::to_string(smallest) +
                         " fall below nu * n_users");
  const std::size_t d = params.d_shared;
  const std::size_t tail = params.n_items - d;
  std::vector<std::vector<double>> templates;
  for (TypeId k = 0; k < params.n_types; ++k) {
    Rng rng = Rng::stream(seed, "model/template", k);
    templates.push_back(detail::draw_block(d, params.delta, params.mu, rng));
  }
  std::vector<std::vector<double>> tails;
  for (UserId u = 0; u < params.n_users; ++u) {
    Rng rng = Rng::stream(seed, "model/tail", u);
    tails.push_back(detail::draw_block(tail, params.delta, params.mu, rng));
  }
  auto types = round_robin_types(params.n_users, params.n_types);
  return {PreferenceMatrix::assemble(std::move(templates), std::move(tails), types), std::move(types)};
}

/// Centered inner product <2p_u - 1, 2p_v - 1>.
inline double centered_inner_product(std::span<const double> pu, std::span<const double> pv) {
  if (pu.size() != pv.size()) throw ParameterError("row length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pu.size(); ++i) s += (2.0 * pu[i] - 1.0) * (2.0 * pv[i] - 1.0);
  return s;
}

/// Exact probability that u and v rate a uniformly random item identically:
/// (1/(2M)) <2p_u - 1, 2p_v - 1> + 1/2.
inline double agreement_probability(std::span<const double> pu, std::span<const double> pv) {
  if (pu.size() != pv.size()) throw ParameterError("row length mismatch");
  if (pu.empty()) throw ParameterError("rows must be nonempty");
  return centered_inner_product(pu, pv) / (2.0 * static_cast<double>(pu.size())) + 0.5;
}

/// R_ui = +1 with probability p_ui, else -1.
inline int sample_rating(const PreferenceMatrix& p, UserId u, ItemId i, Rng& rng) {
  return rng.uniform() < p.at(u, i) ? +1 : -1;
}

/// [b_{T_u(t)}; e_u]: the shared block follows the current type, the tail is fixed.
inline std::vector<double> preference_at(const PreferenceMatrix& p, const VariationSchedule& s, UserId u,
                                         Round t) {
  if (u >= p.n_users()) throw ParameterError("user index out of range");
  std::vector<double> row(p.n_items());
  p.fill_row(u, s.type_at(u, t), row);
  return row;
}

/// Floating-point slack for the exact assumption comparisons.
inline constexpr double kAssumptionSlack = 1e-9;

struct AssumptionReport {
  bool a1_ok = true;
  bool a2_ok = true;
  double min_cross_type_margin = 0.0;   // min over cross pairs of 4 g1 D^2 M - <.,.>
  double min_within_type_margin = 0.0;  // min over same pairs of <.,.> - 4 g2 D^2 M
  std::optional<std::pair<UserId, ItemId>> a1_witness;
  std::optional<UserId> a2_witness;
  std::optional<std::pair<UserId, UserId>> cross_witness;
  std::optional<std::pair<UserId, UserId>> within_witness;

  bool a3_ok() const {
    return min_cross_type_margin >= -kAssumptionSlack && min_within_type_margin >= -kAssumptionSlack;
  }
  bool all_ok() const { return a1_ok && a2_ok && a3_ok(); }
};

inline void to_json(nlohmann::json& j, const AssumptionReport& r) {
  auto pair_json = [](const auto& w) -> nlohmann::json {
    if (!w) return nullptr;
    return nlohmann::json::array({w->first, w->second});
  };
  j = {{"a1_ok", r.a1_ok},
       {"a2_ok", r.a2_ok},
       {"a3_ok", r.a3_ok()},
       {"min_cross_type_margin", r.min_cross_type_margin},
       {"min_within_type_margin", r.min_within_type_margin},
       {"a1_witness", pair_json(r.a1_witness)},
       {"a2_witness", r.a2_witness ? nlohmann::json(*r.a2_witness) : nlohmann::json(nullptr)},
       {"cross_witness", pair_json(r.cross_witness)},
       {"within_witness", pair_json(r.within_witness)}};
}

/// Exact evaluation of the gap, likable-fraction and coherence assumptions for the given type assignment. Margins default
/// to +infinity when no pair of the corresponding kind exists.
inline AssumptionReport check_assumptions(const PreferenceMatrix& p, const std::vector<TypeId>& types,
                                          const ModelParams& params) {
  if (types.size() != p.n_users()) throw ParameterError("types/preference shape mismatch");
  AssumptionReport r;
  r.min_cross_type_margin = std::numeric_limits<double>::infinity();
  r.min_within_type_margin = std::numeric_limits<double>::infinity();
  const double m = static_cast<double>(p.n_items());
  for (UserId u = 0; u < p.n_users(); ++u) {
    std::size_t likable = 0;
    auto row = p.row(u);
    for (ItemId i = 0; i < row.size(); ++i) {
      if (std::abs(row[i] - 0.5) < params.delta - kAssumptionSlack && r.a1_ok) {
        r.a1_ok = false;
        r.a1_witness = {u, i};
      }
      likable += row[i] > 0.5;
    }
    if (static_cast<double>(likable) < params.mu * m - kAssumptionSlack && r.a2_ok) {
      r.a2_ok = false;
      r.a2_witness = u;
    }
  }
  const double scale = 4.0 * params.delta * params.delta * m;
  for (UserId u = 0; u < p.n_users(); ++u) {
    for (UserId v = u + 1; v < p.n_users(); ++v) {
      const double ip = centered_inner_product(p.row(u), p.row(v));
      if (types[u] == types[v]) {
        const double margin = ip - params.gamma2 * scale;
        if (margin < r.min_within_type_margin) {
          r.min_within_type_margin = margin;
          r.within_witness = {u, v};
        }
      } else {
        const double margin = params.gamma1 * scale - ip;
        if (margin < r.min_cross_type_margin) {
          r.min_cross_type_margin = margin;
          r.cross_witness = {u, v};
        }
      }
    }
  }
  if (r.min_cross_type_margin >= -kAssumptionSlack) r.cross_witness.reset();
  if (r.min_within_type_margin >= -kAssumptionSlack) r.within_witness.reset();
  return r;
}

// ---------------------------------------------------------------------------
// Schedule builders

/// Types reshuffled (random permutation of the assignment) at rounds
/// 1 + k * segment_length. Occupancy per type is preserved exactly.
inline VariationSchedule segmented_reshuffle_schedule(const std::vector<TypeId>& initial, std::size_t horizon,
                                                      std::size_t segment_length, Rng& rng) {
  if (segment_length == 0) throw ParameterError("segment_length must be positive");
  VariationSchedule s(initial.size(), horizon);
  std::vector<TypeId> current = initial;
  for (Round t = 1; t <= horizon; ++t) {
    if (t > 1 && (t - 1) % segment_length == 0) rng.shuffle(current);
    for (UserId u = 0; u < initial.size(); ++u) s.set(u, t, current[u]);
  }
  return s;
}

/// Random switch placement: floor(v2_cap * N) switches at uniformly random
/// (user, round) pairs, each to a uniformly random other type, rejected until
/// every user has <= v1_cap switches and every type keeps >= nu*N users.
inline VariationSchedule random_switch_schedule(const std::vector<TypeId>& initial, std::size_t n_types,
                                                std::size_t horizon, std::size_t v1_cap, double v2_cap,
                                                double nu, Rng& rng, std::size_t max_attempts = 1000) {
  const std::size_t n = initial.size();
  const auto total =
      std::min(static_cast<std::size_t>(std::floor(v2_cap * static_cast<double>(n) + 1e-9)), n * v1_cap);
  const auto floor_count = static_cast<std::size_t>(std::ceil(nu * static_cast<double>(n) - 1e-9));
  if (total == 0 || horizon < 2 || n_types < 2) return VariationSchedule::constant(initial, horizon);
  for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
    std::vector<std::vector<Round>> at(n);
    std::vector<std::size_t> per_user(n, 0);
    bool ok = true;
    for (std::size_t k = 0; k < total && ok; ++k) {
      const UserId u = rng.index(n);
      const Round t = 2 + rng.index(horizon - 1);
      if (std::find(at[u].begin(), at[u].end(), t) != at[u].end() || ++per_user[u] > v1_cap) ok = false;
      at[u].push_back(t);
    }
    if (!ok) continue;
    VariationSchedule s = VariationSchedule::constant(initial, horizon);
    for (UserId u = 0; u < n; ++u) {
      std::sort(at[u].begin(), at[u].end());
      for (Round t : at[u]) {
        const TypeId from = s.type_at(u, t);
        TypeId to = rng.index(n_types - 1);
        if (to >= from) ++to;
        s.switch_from(u, t, to);
      }
    }
    if (s.min_occupancy(n_types) >= floor_count) return s;
  }
  throw ParameterError("could not place switches under the v1/v2/nu constraints after " +
                       std::to_string(max_attempts) + " attempts");
}

// ---------------------------------------------------------------------------
// Snapshot serialization. nlohmann emits doubles in shortest round-trip form.

struct ModelSnapshot {
  ModelParams params;
  PreferenceMatrix prefs;
  VariationSchedule schedule;
};

inline nlohmann::json snapshot_to_json(const ModelSnapshot& m) {
  nlohmann::json schedule = nlohmann::json::array();
  for (UserId u = 0; u < m.schedule.n_users(); ++u) {
    nlohmann::json row = nlohmann::json::array();
    for (Round t = 1; t <= m.schedule.horizon(); ++t) row.push_back(m.schedule.type_at(u, t));
    schedule.push_back(std::move(row));
  }
  return {{"params", m.params},
          {"templates", m.prefs.templates()},
          {"idiosyncratic", m.prefs.idiosyncratic()},
          {"schedule", std::move(schedule)}};
}

inline ModelSnapshot snapshot_from_json(const nlohmann::json& j) {
  ModelSnapshot m;
  m.params = j.at("params").get<ModelParams>();
  const auto& rows = j.at("schedule");
  const std::size_t n = rows.size();
  const std::size_t horizon = n == 0 ? 0 : rows.at(0).size();
  m.schedule = VariationSchedule(n, horizon);
  for (UserId u = 0; u < n; ++u) {
    if (rows[u].size() != horizon) throw ParseError("ragged schedule in snapshot");
    for (Round t = 1; t <= horizon; ++t) m.schedule.set(u, t, rows[u][t - 1].get<TypeId>());
  }
  std::vector<TypeId> initial(n, 0);
  if (horizon > 0) initial = m.schedule.types_at(1);
  m.prefs = PreferenceMatrix::assemble(j.at("templates").get<std::vector<std::vector<double>>>(),
                                       j.at("idiosyncratic").get<std::vector<std::vector<double>>>(), initial);
  return m;
}

}  // namespace collab
