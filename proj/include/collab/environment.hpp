#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <utility>
#include <vector>

#include "collab/common.hpp"
#include "collab/model.hpp"
#include "collab/rng.hpp"

namespace collab {

enum class EnvKind { synthetic, replay };

/// Rounds [first, last] over which a user's preferences are constant.
struct Segment {
  Round first = 1;
  Round last = 1;
};

/// Answers rating queries. Implementations are immutable and their queries are
/// pure, so one instance can be shared across concurrent runs.
class Environment {
 public:
  virtual ~Environment() = default;

  virtual EnvKind kind() const = 0;
  virtual std::size_t n_users() const = 0;
  virtual std::size_t n_items() const = 0;

  /// Response of u to item i recommended at round t: +1, -1, or 0 (missing).
  virtual int respond(UserId u, ItemId i, Round t) const = 0;

  /// Ground-truth like-probability, when the environment has one.
  virtual std::optional<double> probability(UserId, ItemId, Round) const { return std::nullopt; }

  /// Segments of constant preference covering [1, horizon].
  virtual std::vector<Segment> segments(UserId, std::size_t horizon) const {
    if (horizon == 0) return {};
    return {{1, horizon}};
  }

  /// 1 likable, 0 unlikable, nullopt when unknown.
  std::optional<bool> likable(UserId u, ItemId i, Round t) const {
    if (auto p = probability(u, i, t)) return *p > 0.5;
    return std::nullopt;
  }
};

/// Latent-source environment: preference_at() rows under a type schedule.
/// Response of (u,i) is decided by a counter-based uniform keyed by
/// (seed, u, i); each pair is asked at most once by the recommenders.
class SyntheticEnv final : public Environment {
 public:
  SyntheticEnv(PreferenceMatrix prefs, VariationSchedule schedule, std::uint64_t seed)
      : prefs_(std::move(prefs)), schedule_(std::move(schedule)), seed_(seed) {
    if (schedule_.n_users() != prefs_.n_users()) throw ParameterError("schedule/preference user count mismatch");
    for (UserId u = 0; u < schedule_.n_users(); ++u)
      for (Round t = 1; t <= schedule_.horizon(); ++t)
        if (schedule_.type_at(u, t) >= prefs_.n_types()) throw ParameterError("schedule type out of range");
  }

  EnvKind kind() const override { return EnvKind::synthetic; }
  std::size_t n_users() const override { return prefs_.n_users(); }
  std::size_t n_items() const override { return prefs_.n_items(); }
  std::size_t horizon() const { return schedule_.horizon(); }

  std::optional<double> probability(UserId u, ItemId i, Round t) const override {
    if (i >= prefs_.n_items()) throw ParameterError("item index out of range");
    return prefs_.at_type(u, schedule_.type_at(u, t), i);
  }

  int respond(UserId u, ItemId i, Round t) const override {
    const double p = *probability(u, i, t);
    return counter_uniform(stream_key(seed_, "env/response", u, i)) < p ? +1 : -1;
  }

  std::vector<Segment> segments(UserId u, std::size_t horizon) const override {
    if (horizon > schedule_.horizon()) throw ParameterError("horizon exceeds the schedule");
    std::vector<Segment> out;
    Round start = 1;
    for (Round t = 2; t <= horizon; ++t)
      if (schedule_.type_at(u, t) != schedule_.type_at(u, t - 1)) {
        out.push_back({start, t - 1});
        start = t;
      }
    if (horizon > 0) out.push_back({start, horizon});
    return out;
  }

  const PreferenceMatrix& preferences() const { return prefs_; }
  const VariationSchedule& schedule() const { return schedule_; }

 private:
  PreferenceMatrix prefs_;
  VariationSchedule schedule_;
  std::uint64_t seed_;
};

}  // namespace collab
