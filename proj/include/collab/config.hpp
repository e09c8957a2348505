#pragma once

// Experiment configuration: strict JSON schema, dotted overrides and the
// provenance fingerprint embedded in every output file.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

#include <json.hpp>

#include "collab/common.hpp"
#include "collab/model.hpp"
#include "collab/params.hpp"
#include "collab/rng.hpp"

namespace collab {

struct HyperOverrides {
  double alpha = 0.5;
  std::optional<double> lambda;
  std::optional<std::size_t> t_static;
  std::optional<std::size_t> delta_t;
  std::optional<double> p_explore;  // p_R
  std::optional<double> p_test;     // p_T

  bool operator==(const HyperOverrides&) const = default;
};

struct ScheduleConfig {
  std::string kind = "constant";  // constant | random_switch | segmented
  std::size_t segment_length = 0;

  bool operator==(const ScheduleConfig&) const = default;
};

struct SweepConfig {
  std::vector<std::size_t> delta_t;
  std::string environment = "synthetic";  // synthetic | replay

  bool operator==(const SweepConfig&) const = default;
};

struct VerifyConfig {
  std::size_t lemma1_pairs = 20;
  std::size_t lemma1_items = 2000;
  std::size_t lemma2_trials = 100;

  bool operator==(const VerifyConfig&) const = default;
};

struct ReplayConfig {
  std::string ratings;
  std::string movies;
  std::string env = "replay";  // replay | calibrated
  std::size_t top_n = 250;
  std::size_t top_m = 500;
  std::size_t bins = 15;
  std::size_t min_ratings = 225;
  double avg_low = 2.5;
  double avg_high = 3.5;
  std::string genre_first = "Action";
  std::string genre_second = "Romance";
  std::size_t rounds_per_bin = 50;
  std::size_t max_malformed = 100;

  bool operator==(const ReplayConfig&) const = default;
};

struct ExperimentConfig {
  std::string mode;  // synth | replay | sweep | verify | params
  ModelParams model;
  std::size_t v1 = 0;
  double v2 = 0.0;
  std::size_t horizon = 0;
  double delta_tol = 0.1;
  std::optional<double> nu;  // learner's occupancy constant; defaults to model.nu
  HyperOverrides hyper;
  ScheduleConfig schedule;
  std::vector<std::uint64_t> seeds{1};
  SweepConfig sweep;
  VerifyConfig verify;
  ReplayConfig replay;
  std::string output_dir = "out";

  double learner_nu() const { return nu.value_or(model.nu); }

  bool operator==(const ExperimentConfig& o) const {
    auto same_model = [](const ModelParams& a, const ModelParams& b) {
      return a.n_users == b.n_users && a.n_items == b.n_items && a.n_types == b.n_types && a.delta == b.delta &&
             a.mu == b.mu && a.gamma1 == b.gamma1 && a.gamma2 == b.gamma2 && a.nu == b.nu && a.d_shared == b.d_shared;
    };
    return mode == o.mode && same_model(model, o.model) && v1 == o.v1 && v2 == o.v2 && horizon == o.horizon &&
           delta_tol == o.delta_tol && nu == o.nu && hyper == o.hyper && schedule == o.schedule && seeds == o.seeds &&
           sweep == o.sweep && verify == o.verify && replay == o.replay && output_dir == o.output_dir;
  }
};

inline const std::set<std::string>& known_modes() {
  static const std::set<std::string> modes{"synth", "replay", "sweep", "verify", "params"};
  return modes;
}

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "64-bit size_t expected");

namespace detail {

template <typename T>
nlohmann::json optional_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

/// Reads fields of one JSON object, rejecting unknown keys and type
/// mismatches with the JSON-pointer path in the message.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    convert(*it, path_ + "/" + key, out);
  }

  template <typename T>
  void read(const std::string& key, std::optional<T>& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) {
      out.reset();
      return;
    }
    T value{};
    convert(*it, path_ + "/" + key, value);
    out = value;
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child_path(const std::string& key) const { return path_ + "/" + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(path_ + "/" + it.key() + ": unknown key");
  }

 private:
  std::string where() const { return path_.empty() ? "/" : path_; }

  static void convert(const nlohmann::json& v, const std::string& path, std::string& out) {
    if (!v.is_string()) throw ConfigError(path + ": expected a string");
    out = v.get<std::string>();
  }
  static void convert(const nlohmann::json& v, const std::string& path, double& out) {
    if (!v.is_number()) throw ConfigError(path + ": expected a number");
    out = v.get<double>();
  }
  static void convert(const nlohmann::json& v, const std::string& path, std::uint64_t& out) {
    if (!v.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  template <typename T>
  static void convert(const nlohmann::json& v, const std::string& path, std::vector<T>& out) {
    if (!v.is_array()) throw ConfigError(path + ": expected an array");
    out.clear();
    for (std::size_t k = 0; k < v.size(); ++k) {
      T item{};
      convert(v[k], path + "/" + std::to_string(k), item);
      out.push_back(item);
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  using detail::optional_json;
  nlohmann::json model = c.model;
  return {
      {"mode", c.mode},
      {"model", model},
      {"budgets", {{"v1", c.v1}, {"v2", c.v2}}},
      {"horizon", c.horizon},
      {"tolerances", {{"delta", c.delta_tol}, {"nu", optional_json(c.nu)}}},
      {"hyper",
       {{"alpha", c.hyper.alpha},
        {"lambda", optional_json(c.hyper.lambda)},
        {"t_static", optional_json(c.hyper.t_static)},
        {"delta_t", optional_json(c.hyper.delta_t)},
        {"p_R", optional_json(c.hyper.p_explore)},
        {"p_T", optional_json(c.hyper.p_test)}}},
      {"schedule", {{"kind", c.schedule.kind}, {"segment_length", c.schedule.segment_length}}},
      {"seeds", c.seeds},
      {"sweep", {{"delta_t", c.sweep.delta_t}, {"environment", c.sweep.environment}}},
      {"verify",
       {{"lemma1_pairs", c.verify.lemma1_pairs},
        {"lemma1_items", c.verify.lemma1_items},
        {"lemma2_trials", c.verify.lemma2_trials}}},
      {"replay",
       {{"ratings", c.replay.ratings},
        {"movies", c.replay.movies},
        {"env", c.replay.env},
        {"top_n", c.replay.top_n},
        {"top_m", c.replay.top_m},
        {"bins", c.replay.bins},
        {"min_ratings", c.replay.min_ratings},
        {"avg_low", c.replay.avg_low},
        {"avg_high", c.replay.avg_high},
        {"genres", {c.replay.genre_first, c.replay.genre_second}},
        {"rounds_per_bin", c.replay.rounds_per_bin},
        {"max_malformed", c.replay.max_malformed}}},
      {"output", {{"dir", c.output_dir}}},
  };
}

/// Missing keys keep their defaults; unknown keys and wrong types are errors.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::ObjectReader root(j, "");
  root.read("mode", c.mode);
  root.read("horizon", c.horizon);
  root.read("seeds", c.seeds);
  if (auto* m = root.child("model")) {
    detail::ObjectReader r(*m, "/model");
    r.read("n_users", c.model.n_users);
    r.read("n_items", c.model.n_items);
    r.read("n_types", c.model.n_types);
    r.read("delta", c.model.delta);
    r.read("mu", c.model.mu);
    r.read("gamma1", c.model.gamma1);
    r.read("gamma2", c.model.gamma2);
    r.read("nu", c.model.nu);
    r.read("d_shared", c.model.d_shared);
    r.finish();
  }
  if (auto* b = root.child("budgets")) {
    detail::ObjectReader r(*b, "/budgets");
    r.read("v1", c.v1);
    r.read("v2", c.v2);
    r.finish();
  }
  if (auto* t = root.child("tolerances")) {
    detail::ObjectReader r(*t, "/tolerances");
    r.read("delta", c.delta_tol);
    r.read("nu", c.nu);
    r.finish();
  }
  if (auto* h = root.child("hyper")) {
    detail::ObjectReader r(*h, "/hyper");
    r.read("alpha", c.hyper.alpha);
    r.read("lambda", c.hyper.lambda);
    r.read("t_static", c.hyper.t_static);
    r.read("delta_t", c.hyper.delta_t);
    r.read("p_R", c.hyper.p_explore);
    r.read("p_T", c.hyper.p_test);
    r.finish();
  }
  if (auto* s = root.child("schedule")) {
    detail::ObjectReader r(*s, "/schedule");
    r.read("kind", c.schedule.kind);
    r.read("segment_length", c.schedule.segment_length);
    r.finish();
  }
  if (auto* s = root.child("sweep")) {
    detail::ObjectReader r(*s, "/sweep");
    r.read("delta_t", c.sweep.delta_t);
    r.read("environment", c.sweep.environment);
    r.finish();
  }
  if (auto* v = root.child("verify")) {
    detail::ObjectReader r(*v, "/verify");
    r.read("lemma1_pairs", c.verify.lemma1_pairs);
    r.read("lemma1_items", c.verify.lemma1_items);
    r.read("lemma2_trials", c.verify.lemma2_trials);
    r.finish();
  }
  if (auto* p = root.child("replay")) {
    detail::ObjectReader r(*p, "/replay");
    r.read("ratings", c.replay.ratings);
    r.read("movies", c.replay.movies);
    r.read("env", c.replay.env);
    r.read("top_n", c.replay.top_n);
    r.read("top_m", c.replay.top_m);
    r.read("bins", c.replay.bins);
    r.read("min_ratings", c.replay.min_ratings);
    r.read("avg_low", c.replay.avg_low);
    r.read("avg_high", c.replay.avg_high);
    std::vector<std::string> genres;
    r.read("genres", genres);
    if (r.child("genres")) {
      if (genres.size() != 2) throw ConfigError("/replay/genres: expected exactly two genre names");
      c.replay.genre_first = genres[0];
      c.replay.genre_second = genres[1];
    }
    r.read("rounds_per_bin", c.replay.rounds_per_bin);
    r.read("max_malformed", c.replay.max_malformed);
    r.finish();
  }
  if (auto* o = root.child("output")) {
    detail::ObjectReader r(*o, "/output");
    r.read("dir", c.output_dir);
    r.finish();
  }
  root.finish();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot read config file");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

/// Applies `KEY=VALUE` with KEY a dotted path into the serialized config
/// (e.g. hyper.delta_t=100). VALUE is parsed as JSON, falling back to a plain
/// string. Unknown keys are errors.
inline ExperimentConfig apply_override(const ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--override " + assignment + ": expected KEY=VALUE");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  std::string pointer;
  std::stringstream parts(key);
  for (std::string part; std::getline(parts, part, '.');) {
    if (part.empty()) throw ConfigError("--override " + key + ": empty path component");
    pointer += "/" + part;
  }
  nlohmann::json j = config_to_json(c);
  const nlohmann::json::json_pointer ptr(pointer);
  if (!j.contains(ptr) || j.at(ptr).is_object()) throw ConfigError(pointer + ": unknown override key");
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  j[ptr] = value;
  return config_from_json(j);
}

/// Checks the fields the given mode relies on.
inline void validate_config(const ExperimentConfig& c) {
  if (!known_modes().count(c.mode)) throw ConfigError("/mode: unknown mode '" + c.mode + "'");
  if (c.seeds.empty()) throw ConfigError("/seeds: at least one seed required");
  const bool synthetic = c.mode == "synth" || c.mode == "verify" || c.mode == "params" ||
                         (c.mode == "sweep" && c.sweep.environment == "synthetic");
  if (synthetic) {
    try {
      c.model.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(std::string("/model: ") + e.what());
    }
  }
  if (c.mode != "verify" && c.horizon == 0) throw ConfigError("/horizon: must be positive");
  if (!(c.delta_tol > 0.0 && c.delta_tol < 1.0)) throw ConfigError("/tolerances/delta: must lie in (0, 1)");
  if (c.nu && !(*c.nu > 0.0 && *c.nu < 1.0)) throw ConfigError("/tolerances/nu: must lie in (0, 1)");
  if (!(c.v2 >= 0.0)) throw ConfigError("/budgets/v2: must be non-negative");
  static const std::set<std::string> schedules{"constant", "random_switch", "segmented"};
  if (!schedules.count(c.schedule.kind)) throw ConfigError("/schedule/kind: unknown schedule '" + c.schedule.kind + "'");
  if (c.schedule.kind == "segmented" && c.schedule.segment_length == 0)
    throw ConfigError("/schedule/segment_length: must be positive for a segmented schedule");
  if (c.mode == "sweep") {
    if (c.sweep.delta_t.empty()) throw ConfigError("/sweep/delta_t: at least one batch size required");
    for (std::size_t k = 0; k < c.sweep.delta_t.size(); ++k)
      if (c.sweep.delta_t[k] == 0 || c.sweep.delta_t[k] > c.horizon)
        throw ConfigError("/sweep/delta_t/" + std::to_string(k) + ": must lie in [1, horizon]");
    if (c.sweep.environment != "synthetic" && c.sweep.environment != "replay")
      throw ConfigError("/sweep/environment: expected 'synthetic' or 'replay'");
  }
  const bool replay = c.mode == "replay" || (c.mode == "sweep" && c.sweep.environment == "replay");
  if (replay) {
    if (c.replay.ratings.empty()) throw ConfigError("/replay/ratings: path required");
    if (c.replay.movies.empty()) throw ConfigError("/replay/movies: path required");
    if (c.replay.env != "replay" && c.replay.env != "calibrated")
      throw ConfigError("/replay/env: expected 'replay' or 'calibrated'");
    if (c.replay.bins == 0) throw ConfigError("/replay/bins: must be positive");
    if (c.replay.rounds_per_bin == 0) throw ConfigError("/replay/rounds_per_bin: must be positive");
  }
  const auto& h = c.hyper;
  if (!(h.alpha > 0.0 && h.alpha <= 4.0 / 7.0 + 1e-12)) throw ConfigError("/hyper/alpha: must lie in (0, 4/7]");
  if (h.t_static && *h.t_static == 0) throw ConfigError("/hyper/t_static: must be positive");
  if (h.delta_t && (*h.delta_t == 0 || (c.horizon > 0 && *h.delta_t > c.horizon)))
    throw ConfigError("/hyper/delta_t: must lie in [1, horizon]");
  if (h.p_explore && !(*h.p_explore >= 0.0 && *h.p_explore <= 1.0)) throw ConfigError("/hyper/p_R: must lie in [0, 1]");
  if (h.p_test && !(*h.p_test >= 0.0 && *h.p_test <= 1.0)) throw ConfigError("/hyper/p_T: must lie in [0, 1]");
}

/// Hex FNV-1a of the canonical config JSON, without the output directory.
inline std::string config_fingerprint(const ExperimentConfig& c) {
  nlohmann::json j = config_to_json(c);
  j.erase("output");
  const std::uint64_t h = fnv1a64(j.dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline DerivationInputs derivation_inputs(const ExperimentConfig& c) {
  DerivationInputs in;
  in.n_users = c.model.n_users;
  in.delta = c.model.delta;
  in.gamma1 = c.model.gamma1;
  in.gamma2 = c.model.gamma2;
  in.mu = c.model.mu;
  in.nu = c.learner_nu();
  in.v1 = c.v1;
  in.v2 = c.v2;
  in.horizon = c.horizon;
  in.delta_tol = c.delta_tol;
  in.alpha = c.hyper.alpha;
  return in;
}

/// Derived hyper-parameters with the configured overrides applied.
/// `n_users` replaces the model's user count (replay populations).
inline HyperParams resolve_hyper(const ExperimentConfig& c, std::optional<std::size_t> n_users = {}) {
  DerivationInputs in = derivation_inputs(c);
  if (n_users) in.n_users = *n_users;
  HyperParams h = derive_params(in, c.hyper.delta_t, c.hyper.t_static);
  if (c.hyper.lambda) h.lambda = *c.hyper.lambda;
  if (c.hyper.p_explore) h.p_explore = *c.hyper.p_explore;
  if (c.hyper.p_test) h.p_test = *c.hyper.p_test;
  h.validate();
  return h;
}

}  // namespace collab
