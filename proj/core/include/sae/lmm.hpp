#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sae/frame.hpp"

namespace sae {

/// Floor applied to the residual variance so V stays invertible on
/// degenerate data.
inline constexpr double kVarFloor = 1e-10;

/// Fitted random-intercept linear mixed model
///   Y_it = x_it' beta + u_d + e_it,  u_d ~ N(0, sigma2_u), e ~ N(0, sigma2_e).
struct LmmFit {
  Eigen::VectorXd beta;
  std::vector<std::string> beta_names;
  double sigma2_u = 0.0;
  double sigma2_e = kVarFloor;
  /// BLUP of the domain effect, per sampled domain. Unsampled domains are
  /// absent; their predicted effect is 0 by convention.
  std::map<std::string, double> v_hat;
  double reml_loglik = 0.0;
  bool converged = false;
};

/// Population-level parameters of the same model (used for simulation).
struct LmmParams {
  Eigen::VectorXd beta;
  double sigma2_u = 0.0;
  double sigma2_e = 0.0;
};

/// Design matrix for the selected auxiliary columns over the given rows.
/// The pseudo-column name "1" produces a constant intercept column.
Eigen::MatrixXd design_matrix(const LongFrame& frame,
                              const std::vector<std::string>& aux_selection,
                              const std::vector<std::size_t>& rows);

/// REML fit of the random-intercept model on explicit (X, y, domain) data.
///
/// The restricted likelihood is profiled: for each variance ratio
/// psi = sigma2_u / sigma2_e both beta and sigma2_e have closed forms, so
/// the fit reduces to a one-dimensional maximization over log psi plus the
/// psi = 0 boundary. Boundary solutions (sigma2_u = 0) are admissible.
LmmFit fit_reml(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                const std::vector<std::string>& domains,
                std::vector<std::string> beta_names = {});

/// REML fit on the in_sample rows of a frame.
LmmFit fit_reml(const LongFrame& frame,
                const std::vector<std::string>& aux_selection);

/// Restricted log-likelihood of the random-intercept model at fixed
/// variance components, with beta profiled out (GLS). Exposed so that the
/// optimum can be verified against a dense grid.
double reml_loglik_at(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                      const std::vector<std::string>& domains,
                      double sigma2_u, double sigma2_e);

/// BLUP of the domain effects at the fitted parameters:
///   v_d = n_d sigma2_u / (n_d sigma2_u + sigma2_e) * mean GLS residual of d.
std::map<std::string, double> blup_effects(
    const LmmFit& fit, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
    const std::vector<std::string>& domains);

std::map<std::string, double> blup_effects(
    const LmmFit& fit, const LongFrame& sample,
    const std::vector<std::string>& aux_selection);

/// Fitted values X_r beta + v_hat(d) for every non-sampled row, in frame
/// order; v_hat is 0 for domains absent from the fit.
Eigen::VectorXd fitted_unobserved(const LmmFit& fit, const LongFrame& frame,
                                  const std::vector<std::string>& aux_selection);

/// Simulates a full population response under the model: one domain effect
/// per domain (shared across all periods), i.i.d. unit-level components.
/// Deterministic given the seed.
std::vector<double> simulate_population(const LmmParams& params,
                                        const Eigen::MatrixXd& x,
                                        const std::vector<std::string>& domains,
                                        std::uint64_t seed);

std::vector<double> simulate_population(const LmmParams& params,
                                        const LongFrame& frame,
                                        const std::vector<std::string>& aux_selection,
                                        std::uint64_t seed);

}  // namespace sae
