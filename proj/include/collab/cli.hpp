#pragma once

// Command-line front end: params / synth / replay / sweep / verify.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "collab/config.hpp"
#include "collab/environment.hpp"
#include "collab/harness.hpp"
#include "collab/ingest.hpp"
#include "collab/model.hpp"
#include "collab/params.hpp"
#include "collab/recommender.hpp"

namespace collab {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitRuntime = 2 };

namespace cli {

struct Context {
  ExperimentConfig config;
  std::string fingerprint;
  std::filesystem::path out_dir;
  std::size_t jobs = 1;
  std::ostream* out = nullptr;
};

inline void write_file(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  body(f);
  if (!f) throw Error("write failed for " + path.string());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_file(path, [&](std::ostream& o) { o << j.dump(2) << '\n'; });
}

inline std::string number(double v) {
  if (std::isnan(v)) return "NA";
  return nlohmann::json(v).dump();
}

inline nlohmann::json hyper_json(const HyperParams& h) { return h; }

struct SyntheticSetup {
  ModelSnapshot snapshot;
  std::vector<TypeId> types;
  std::unique_ptr<SyntheticEnv> env;
};

/// Model, schedule and environment for one master seed; each component draws
/// from its own labelled stream.
inline SyntheticSetup build_synthetic(const ExperimentConfig& c, std::uint64_t seed, std::size_t horizon) {
  SyntheticSetup s;
  GeneratedModel g = generate_model(c.model, seed);
  s.types = g.types;
  Rng rng = Rng::stream(seed, "model/schedule");
  VariationSchedule schedule =
      c.schedule.kind == "random_switch"
          ? random_switch_schedule(g.types, c.model.n_types, horizon, c.v1, c.v2, c.model.nu, rng)
      : c.schedule.kind == "segmented" ? segmented_reshuffle_schedule(g.types, horizon, c.schedule.segment_length, rng)
                                       : VariationSchedule::constant(g.types, horizon);
  s.snapshot = ModelSnapshot{c.model, g.prefs, schedule};
  s.env = std::make_unique<SyntheticEnv>(std::move(g.prefs), std::move(schedule), stream_key(seed, "env"));
  return s;
}

struct ReplaySetup {
  RatingsLog filtered;
  BinnedPreferences binned;
  std::unique_ptr<ReplayEnv> replay;
};

inline ReplaySetup load_replay(const ExperimentConfig& c) {
  const auto& r = c.replay;
  RatingsFormat format;
  format.max_malformed = r.max_malformed;
  RatingsLog log = load_ratings(std::filesystem::path(r.ratings), format);
  log.genres = load_genres(std::filesystem::path(r.movies));
  ReplaySetup s;
  s.filtered = filter_population(log, {r.min_ratings, r.avg_low, r.avg_high});
  s.binned = build_piecewise_preferences(s.filtered, r.bins, {r.genre_first, r.genre_second});
  s.replay = std::make_unique<ReplayEnv>(replay_env(quantize_ratings(s.filtered), r.top_n, r.top_m));
  return s;
}

/// Calibrated environment over the replay population and catalog.
inline std::unique_ptr<CalibratedEnv> calibrated_env(const ExperimentConfig& c, const ReplaySetup& s,
                                                     std::uint64_t seed) {
  std::map<ExternalId, const UserBins*> by_id;
  for (const auto& u : s.binned.users) by_id[u.user] = &u;
  BinnedPreferences selected;
  selected.genres = s.binned.genres;
  for (ExternalId id : s.replay->user_ids()) selected.users.push_back(*by_id.at(id));
  auto classes = CalibratedEnv::classify(s.filtered, s.replay->item_ids(), s.binned.genres);
  return std::make_unique<CalibratedEnv>(std::move(selected), std::move(classes), c.replay.rounds_per_bin,
                                         stream_key(seed, "env"));
}

inline nlohmann::json replay_snapshot(const ReplayEnv& env, const std::string& fingerprint, std::uint64_t seed) {
  nlohmann::json grid = nlohmann::json::array();
  for (UserId u = 0; u < env.n_users(); ++u) {
    nlohmann::json row = nlohmann::json::array();
    for (ItemId i = 0; i < env.n_items(); ++i) row.push_back(env.respond(u, i, 1));
    grid.push_back(std::move(row));
  }
  return {{"config_fingerprint", fingerprint}, {"seed", seed},          {"kind", "replay"},
          {"users", env.user_ids()},          {"items", env.item_ids()}, {"grid", std::move(grid)}};
}

struct RunSummary {
  std::string algorithm;
  double acc_reward = 0.0;
  double reward_likable = std::numeric_limits<double>::quiet_NaN();
};

/// Runs the algorithm and both baselines for one seed and writes their traces.
inline std::vector<RunSummary> run_all(const Context& ctx, const Environment& env, const HyperParams& hyper,
                                       std::uint64_t seed, const std::filesystem::path& dir) {
  const std::size_t horizon = ctx.config.horizon;
  std::vector<std::pair<std::string, RunTrace>> runs;
  runs.emplace_back("collaborative", run_collaborative(env, hyper, horizon, seed));
  runs.emplace_back("random", baseline_random(env, horizon, seed));
  runs.emplace_back("static", baseline_static(env, horizon, seed, hyper.t_static, hyper.alpha, hyper.lambda));
  std::vector<RunSummary> out;
  for (auto& [name, trace] : runs) {
    trace.fingerprint = ctx.fingerprint;
    const std::string file = name == "collaborative" ? "trace.csv" : "trace_" + name + ".csv";
    write_file(dir / file, [&](std::ostream& o) { write_trace_csv(o, trace); });
    RunSummary s{name, acc_reward(trace)};
    if (env.kind() != EnvKind::replay) s.reward_likable = reward_likable(trace, env);
    out.push_back(s);
    for (const auto& w : trace.warnings) *ctx.out << "warning: " << name << " seed=" << seed << ": " << w << '\n';
  }
  return out;
}

inline void write_summary(const Context& ctx,
                          const std::vector<std::tuple<std::uint64_t, RunSummary, double>>& rows) {
  write_file(ctx.out_dir / "summary.csv", [&](std::ostream& o) {
    o << "# config_fingerprint=" << ctx.fingerprint << " seed=" << ctx.config.seeds.front() << '\n';
    o << "seed,algorithm,acc_reward,reward_likable,oracle_bound\n";
    for (const auto& [seed, s, oracle] : rows)
      o << seed << ',' << s.algorithm << ',' << number(s.acc_reward) << ',' << number(s.reward_likable) << ','
        << number(oracle) << '\n';
  });
}

inline std::filesystem::path seed_dir(const Context& ctx, std::uint64_t seed) {
  return ctx.out_dir / ("seed_" + std::to_string(seed));
}

inline void print_line(const Context& ctx, const std::string& mode, std::uint64_t seed,
                       const std::vector<RunSummary>& runs, double oracle) {
  *ctx.out << mode << " seed=" << seed;
  for (const auto& r : runs) {
    *ctx.out << ' ' << r.algorithm << ".acc_reward=" << number(r.acc_reward);
    if (!std::isnan(r.reward_likable)) *ctx.out << ' ' << r.algorithm << ".reward_likable=" << number(r.reward_likable);
  }
  if (!std::isnan(oracle)) *ctx.out << " oracle_bound=" << number(oracle);
  *ctx.out << '\n';
}

inline void params_json(const Context& ctx, const HyperParams& h) {
  write_json(ctx.out_dir / "params.json",
             {{"config_fingerprint", ctx.fingerprint}, {"seed", ctx.config.seeds.front()}, {"hyper", hyper_json(h)}});
}

inline void cmd_params(const Context& ctx) {
  const HyperParams h = resolve_hyper(ctx.config);
  params_json(ctx, h);
  const std::string kappa = h.kappa ? number(*h.kappa) : "null";
  const std::string t_learn = h.t_learn ? std::to_string(*h.t_learn) : "null";
  *ctx.out << "params t_static=" << h.t_static << " lambda=" << number(h.lambda) << " delta_t=" << h.delta_t
           << " p_T=" << number(h.p_test) << " p_R=" << number(h.p_explore) << " kappa=" << kappa
           << " t_learn=" << t_learn << '\n';
}

inline void cmd_synth(const Context& ctx) {
  const auto& c = ctx.config;
  const HyperParams hyper = resolve_hyper(c);
  params_json(ctx, hyper);
  std::vector<std::tuple<std::uint64_t, RunSummary, double>> rows;
  for (std::uint64_t seed : c.seeds) {
    SyntheticSetup setup = build_synthetic(c, seed, c.horizon);
    const auto dir = seed_dir(ctx, seed);
    nlohmann::json snap = snapshot_to_json(setup.snapshot);
    write_json(dir / "model.json", {{"config_fingerprint", ctx.fingerprint}, {"seed", seed}, {"model", snap}});
    const auto runs = run_all(ctx, *setup.env, hyper, seed, dir);
    const double oracle = oracle_upper_bound(*setup.env, c.horizon);
    for (const auto& r : runs) rows.emplace_back(seed, r, oracle);
    print_line(ctx, "synth", seed, runs, oracle);
  }
  write_summary(ctx, rows);
}

inline void cmd_replay(const Context& ctx) {
  const auto& c = ctx.config;
  ReplaySetup setup = load_replay(c);
  write_file(ctx.out_dir / "binned.csv",
             [&](std::ostream& o) { write_binned_csv(o, setup.binned, ctx.fingerprint, c.seeds.front()); });
  write_json(ctx.out_dir / "env.json", replay_snapshot(*setup.replay, ctx.fingerprint, c.seeds.front()));
  const HyperParams hyper = resolve_hyper(c, setup.replay->n_users());
  params_json(ctx, hyper);
  std::vector<std::tuple<std::uint64_t, RunSummary, double>> rows;
  for (std::uint64_t seed : c.seeds) {
    std::unique_ptr<CalibratedEnv> calibrated;
    if (c.replay.env == "calibrated") calibrated = calibrated_env(c, setup, seed);
    const Environment& env = calibrated ? static_cast<const Environment&>(*calibrated) : *setup.replay;
    const auto runs = run_all(ctx, env, hyper, seed, seed_dir(ctx, seed));
    const double oracle = calibrated ? oracle_upper_bound(env, c.horizon) : std::numeric_limits<double>::quiet_NaN();
    for (const auto& r : runs) rows.emplace_back(seed, r, oracle);
    print_line(ctx, "replay", seed, runs, oracle);
  }
  write_summary(ctx, rows);
}

inline void cmd_sweep(const Context& ctx) {
  const auto& c = ctx.config;
  const std::uint64_t env_seed = c.seeds.front();
  std::optional<SyntheticSetup> synthetic;
  std::optional<ReplaySetup> replay;
  std::unique_ptr<CalibratedEnv> calibrated;
  const Environment* env = nullptr;
  std::optional<std::size_t> n_users;
  if (c.sweep.environment == "synthetic") {
    synthetic = build_synthetic(c, env_seed, c.horizon);
    env = synthetic->env.get();
  } else {
    replay = load_replay(c);
    n_users = replay->replay->n_users();
    if (c.replay.env == "calibrated") {
      calibrated = calibrated_env(c, *replay, env_seed);
      env = calibrated.get();
    } else {
      env = replay->replay.get();
    }
  }
  const HyperParams hyper = resolve_hyper(c, n_users);
  params_json(ctx, hyper);
  const SweepResult result = sweep_batch_size(*env, c.horizon, c.sweep.delta_t, c.seeds, hyper, ctx.jobs);
  write_file(ctx.out_dir / "sweep.csv", [&](std::ostream& o) { write_sweep_csv(o, result, ctx.fingerprint, env_seed); });
  write_file(ctx.out_dir / "sweep_summary.csv",
             [&](std::ostream& o) { write_sweep_summary_csv(o, result, ctx.fingerprint, env_seed); });
  for (const auto& a : result.aggregate())
    *ctx.out << "sweep delta_t=" << a.delta_t << " n_ok=" << a.n_ok << " mean_acc_reward=" << number(a.mean_acc_reward)
             << " stderr=" << number(a.stderr_acc_reward) << '\n';
}

inline void cmd_verify(const Context& ctx) {
  const auto& c = ctx.config;
  nlohmann::json runs = nlohmann::json::array();
  for (std::uint64_t seed : c.seeds) {
    const GeneratedModel g = generate_model(c.model, seed);
    const AssumptionReport assumptions = check_assumptions(g.prefs, g.types, c.model);
    const VerificationReport l1 =
        verify_lemma1(g.prefs, g.types, c.model, c.verify.lemma1_pairs, c.verify.lemma1_items, seed);
    Lemma2Options options;
    options.jobs = ctx.jobs;
    options.length = c.hyper.t_static;
    options.lambda = c.hyper.lambda;
    nlohmann::json l2;
    bool l2_pass = false;
    try {
      const VerificationReport report = verify_lemma2(g.prefs, g.types, c.model, c.delta_tol, c.verify.lemma2_trials,
                                                      seed, options);
      l2 = report;
      l2_pass = report.pass();
    } catch (const ParameterError& e) {
      l2 = {{"suite", "lemma2"}, {"error", e.what()}};
    }
    nlohmann::json a = assumptions;
    nlohmann::json l1j = l1;
    runs.push_back({{"seed", seed},
                    {"assumptions", a},
                    {"lemma1", l1j},
                    {"lemma2", l2},
                    {"pass", assumptions.all_ok() && l1.pass() && l2_pass}});
    *ctx.out << "verify seed=" << seed << " assumptions=" << (assumptions.all_ok() ? "ok" : "FAIL")
             << " lemma1=" << (l1.pass() ? "ok" : "FAIL") << " lemma2=" << (l2_pass ? "ok" : "FAIL") << '\n';
  }
  write_json(ctx.out_dir / "verify.json",
             {{"config_fingerprint", ctx.fingerprint}, {"seed", c.seeds.front()}, {"runs", std::move(runs)}});
}

}  // namespace cli

/// Entry point shared by the executable and the tests. Returns the exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Batched collaborative filtering simulator"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::vector<std::string> overrides;
  for (const std::string name : {"params", "synth", "replay", "sweep", "verify"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "single master seed (replaces the config's seed list)");
    sub->add_option("--jobs", jobs, "worker threads for sweep / verify")->check(CLI::PositiveNumber);
    sub->add_option("--override", overrides, "KEY=VALUE with a dotted config key (repeatable)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  const std::string mode = app.get_subcommands().front()->get_name();

  cli::Context ctx;
  ctx.out = &out;
  try {
    ExperimentConfig config = load_config(config_path);
    if (!config.mode.empty() && config.mode != mode)
      throw ConfigError("/mode: config is for '" + config.mode + "' but the subcommand is '" + mode + "'");
    config.mode = mode;
    for (const auto& o : overrides) config = apply_override(config, o);
    if (seed) config.seeds = {*seed};
    if (!out_dir.empty()) config.output_dir = out_dir;
    validate_config(config);
    ctx.config = std::move(config);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  ctx.fingerprint = config_fingerprint(ctx.config);
  ctx.out_dir = ctx.config.output_dir;
  ctx.jobs = jobs.value_or(default_jobs());

  try {
    if (mode == "params") cli::cmd_params(ctx);
    else if (mode == "synth") cli::cmd_synth(ctx);
    else if (mode == "replay") cli::cmd_replay(ctx);
    else if (mode == "sweep") cli::cmd_sweep(ctx);
    else cli::cmd_verify(ctx);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace collab
