#pragma once

// Hyper-parameters of the batched recommender and their derivation from the
// model constants, the variation budgets and the horizon.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>

#include <json.hpp>

#include "collab/common.hpp"

namespace collab {

struct DerivationInputs {
  std::size_t n_users = 0;
  double delta = 0.5;
  double gamma1 = 0.0;
  double gamma2 = 1.0;
  double mu = 0.5;
  double nu = 0.5;
  std::size_t v1 = 0;  // variation budgets given to the learner
  double v2 = 0.0;
  std::size_t horizon = 0;
  double delta_tol = 0.1;  // failure tolerance (delta)
  double alpha = 0.5;
};

struct HyperParams {
  double alpha = 0.5;
  double lambda = 0.75;
  std::size_t t_static = 1;
  std::size_t delta_t = 1;
  double p_explore = 0.0;
  double p_test = 0.0;
  std::optional<std::size_t> t_learn;
  std::optional<double> kappa;
  std::size_t v1_budget = 0;
  double v2_budget = 0.0;
  double delta_tol = 0.1;
  double nu = 0.5;
  std::size_t horizon = 0;

  void validate() const {
    auto fail = [](const std::string& what) { throw ParameterError("invalid hyper-parameters: " + what); };
    if (!(p_explore >= 0.0 && p_explore <= 1.0)) fail("p_explore must lie in [0, 1]");
    if (!(p_test >= 0.0 && p_test <= 1.0)) fail("p_test must lie in [0, 1]");
    if (t_static < 1) fail("t_static >= 1 required");
    if (delta_t < 1) fail("delta_t >= 1 required");
    if (horizon > 0 && delta_t > horizon) fail("delta_t <= horizon required");
  }
};

inline void to_json(nlohmann::json& j, const HyperParams& h) {
  j = {{"alpha", h.alpha},
       {"lambda", h.lambda},
       {"t_static", h.t_static},
       {"delta_t", h.delta_t},
       {"p_explore", h.p_explore},
       {"p_test", h.p_test},
       {"t_learn", h.t_learn ? nlohmann::json(*h.t_learn) : nlohmann::json(nullptr)},
       {"kappa", h.kappa ? nlohmann::json(*h.kappa) : nlohmann::json(nullptr)},
       {"v1_budget", h.v1_budget},
       {"v2_budget", h.v2_budget},
       {"delta_tol", h.delta_tol},
       {"nu", h.nu},
       {"horizon", h.horizon}};
}

/// 2 ln(3N^2/delta) / (D^4 (g2-g1)^2): test length for reliable partition recovery.
inline double static_test_length_real(std::size_t n_users, double delta, double gamma1, double gamma2,
                                      double delta_tol) {
  if (!(gamma2 > gamma1)) throw ParameterError("derivation requires gamma2 > gamma1");
  if (!(delta > 0.0)) throw ParameterError("derivation requires delta > 0");
  if (!(delta_tol > 0.0 && delta_tol < 1.0)) throw ParameterError("tolerance delta must lie in (0, 1)");
  const double n = static_cast<double>(n_users);
  const double gap = gamma2 - gamma1;
  return 2.0 * std::log(3.0 * n * n / delta_tol) / (std::pow(delta, 4) * gap * gap);
}

inline std::size_t static_test_length(std::size_t n_users, double delta, double gamma1, double gamma2,
                                      double delta_tol) {
  return static_cast<std::size_t>(std::ceil(static_test_length_real(n_users, delta, gamma1, gamma2, delta_tol)));
}

/// Midpoint (g1+g2) D^2 + 1/2 of the admissible threshold interval.
inline double default_lambda(double delta, double gamma1, double gamma2) {
  return (gamma1 + gamma2) * delta * delta + 0.5;
}

struct LambdaInterval {
  double lower;
  double upper;
};

/// Threshold interval for a test of length L: 2 g D^2 + 1/2 -/+ sqrt((2/L) ln(3N^2/delta)).
inline LambdaInterval lambda_interval_for_length(std::size_t n_users, double delta, double gamma1, double gamma2,
                                                 double delta_tol, std::size_t length) {
  const double n = static_cast<double>(n_users);
  const double slack = std::sqrt(2.0 / static_cast<double>(length) * std::log(3.0 * n * n / delta_tol));
  return {2.0 * gamma1 * delta * delta + 0.5 + slack, 2.0 * gamma2 * delta * delta + 0.5 - slack};
}

/// Alternative form 2 g1 D^2 + 1/2 +- D^2 (g2 - g1), kept for comparison.
inline LambdaInterval lambda_interval_alternative(double delta, double gamma1, double gamma2) {
  const double centre = 2.0 * gamma1 * delta * delta + 0.5;
  const double half = delta * delta * (gamma2 - gamma1);
  return {centre - half, centre + half};
}

/// The three batch-size dependent regret terms: delta T + (T/dT) kappa + 3 dT V2 / (2 nu).
inline double batch_regret_terms(double delta_tol, double horizon, double delta_t, double kappa, double v2,
                                 double nu) {
  return delta_tol * horizon + horizon / delta_t * kappa + 3.0 * delta_t * v2 / (2.0 * nu);
}

/// Derives (t_static, lambda, kappa, delta_t, p_test, p_explore, t_learn).
/// When 1-delta-mu <= 0, kappa is undefined: pass `delta_t_override` to get
/// the remaining parameters (kappa and t_learn are then left empty). A
/// `t_static_override` replaces the test length in every downstream formula.
inline HyperParams derive_params(const DerivationInputs& in, std::optional<std::size_t> delta_t_override = {},
                                 std::optional<std::size_t> t_static_override = {}) {
  if (!(in.alpha > 0.0 && in.alpha <= 4.0 / 7.0 + 1e-12)) throw ParameterError("alpha must lie in (0, 4/7]");
  if (!(in.nu > 0.0 && in.nu < 1.0)) throw ParameterError("nu must lie in (0, 1)");
  if (in.horizon == 0) throw ParameterError("horizon must be positive");
  HyperParams h;
  h.alpha = in.alpha;
  h.horizon = in.horizon;
  h.v1_budget = in.v1;
  h.v2_budget = in.v2;
  h.delta_tol = in.delta_tol;
  h.nu = in.nu;
  if (t_static_override && *t_static_override == 0) throw ParameterError("t_static must be positive");
  h.t_static = t_static_override ? *t_static_override
                                 : static_test_length(in.n_users, in.delta, in.gamma1, in.gamma2, in.delta_tol);
  h.lambda = default_lambda(in.delta, in.gamma1, in.gamma2);
  h.p_explore = std::pow(static_cast<double>(in.n_users), -in.alpha);
  const double horizon = static_cast<double>(in.horizon);
  h.p_test = in.v1 == 0
                 ? 0.0
                 : std::clamp(std::sqrt(static_cast<double>(in.v1) / (horizon * static_cast<double>(h.t_static))),
                              0.0, 1.0);

  const double margin = 1.0 - in.delta_tol - in.mu;
  if (margin > 0.0) {
    h.kappa = static_cast<double>(h.t_static) * margin;
    const double factor = std::max(1.0, 3.0 * in.v2 / (2.0 * in.nu * margin));
    h.t_learn = static_cast<std::size_t>(std::ceil(factor * static_cast<double>(h.t_static) - 1e-9));
  } else if (!delta_t_override) {
    throw ParameterError("kappa undefined: 1 - delta - mu <= 0; supply delta_t explicitly");
  }

  if (delta_t_override) {
    h.delta_t = *delta_t_override;
  } else if (in.v2 <= 0.0) {
    h.delta_t = in.horizon;
  } else {
    const double optimum = std::sqrt(2.0 * in.nu * horizon * *h.kappa / (3.0 * in.v2));
    auto rounded = static_cast<std::size_t>(std::llround(optimum));
    // A batch must be able to hold its reference test.
    rounded = std::max(rounded, h.t_static);
    h.delta_t = std::min(in.horizon, std::max<std::size_t>(rounded, 1));
  }
  h.validate();
  return h;
}

}  // namespace collab
