#pragma once

#include <Eigen/Dense>
#include <functional>

#include "perfinf/rng.hpp"
#include "perfinf/theta.hpp"

namespace perfinf {

/// Ground truth for the Gaussian location family under squared loss:
/// theta_t = eps^t theta0, Sigma_t = Sigma (1 - eps^{2t}) / (1 - eps^2),
/// theta_PS = 0. Never touches estimator code.
struct StableTruth {
  Theta theta_t;
  Eigen::MatrixXd sigma_t;
  Theta theta_ps;
};

StableTruth gaussian_stable_truth(double epsilon, const Eigen::VectorXd& sigma_diag,
                                  const Theta& theta0, int t);

/// Ground truth for the scalar location family: beta_star = beta1,
/// theta_PO = -b / (beta_star - 1), and the analytic plug-in risk
/// sigma^2 + (b + beta* theta)^2 - 2 theta (b + beta* theta) + theta^2.
struct OptimalTruth {
  double beta_star = 0.0;
  double theta_po = 0.0;
  double sigma = 0.0;
  double b = 0.0;
  /// Minimizer found by deterministic grid search over [-5, 5], step 1e-4.
  double grid_minimizer = 0.0;

  double plugin_risk(double theta) const;
};

OptimalTruth location_optimal_truth(double b, double beta1, double sigma);

/// Sample covariance of sqrt(N) * (estimate - truth) across replications.
/// The runner returns the scaled deviation for one replication; failures abort
/// with the completed count in the message.
Eigen::MatrixXd replication_covariance(
    const std::function<Eigen::VectorXd(RngStream&)>& scaled_deviation_runner, int reps,
    RngStream& rng);

}  // namespace perfinf
