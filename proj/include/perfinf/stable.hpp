#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "perfinf/atlas.hpp"
#include "perfinf/distribution.hpp"
#include "perfinf/game.hpp"
#include "perfinf/solvers.hpp"

namespace perfinf {

struct CovarianceDiagnostics {
  double ridge_used = 0.0;
  double psd_clip_magnitude = 0.0;
};

/// One empirical repeated-retraining run: estimates, the sample sets behind
/// them, and (once estimated) the per-step and accumulated covariances.
struct ErrTrajectory {
  Theta theta0;
  std::vector<Theta> estimates;      // theta_hat_1 .. theta_hat_T
  std::vector<SampleSet> samples;    // samples[t] generated under estimates[t-1]
  int sample_size = 0;               // N, equal across steps and players

  std::vector<Eigen::MatrixXd> step_covariances;  // sandwich term per step
  std::vector<Eigen::MatrixXd> jacobians;         // J_sol at theta_hat_{t-1}, t >= 2
  std::vector<Eigen::MatrixXd> accumulated;       // Sigma_hat_t
  Eigen::VectorXd beta_hat;                       // atlas parameter behind the jacobians
  std::vector<CovarianceDiagnostics> covariance_diagnostics;

  int steps() const { return static_cast<int>(estimates.size()); }
  bool has_covariances() const { return !accumulated.empty(); }
};

/// Empirical repeated retraining: theta_hat_1 solves the empirical first-order
/// condition on samples from D(theta0); each later step re-solves on fresh
/// samples from D(theta_hat_{t-1}). Solver errors are annotated with the step.
ErrTrajectory err_run(const GameSpec& game, const DistributionMap& map, const Theta& theta0,
                      int T, int N, RngStream& rng, const SolveOptions& opts = {});

/// Sandwich covariance of one step: V_hat^-1 H_hat V_hat^-T, where V_hat is
/// the mean gradient Jacobian at theta_hat and H_hat the centered outer
/// product of gradients (centering constant = mean gradient).
Eigen::MatrixXd sandwich_step_covariance(const GameSpec& game, const SampleSet& samples,
                                         const Theta& theta_hat,
                                         CovarianceDiagnostics* diagnostics = nullptr);

/// Plug-in estimate of the solution-map Jacobian at theta_prev:
/// -V_hat^-1 M_hat with M_hat the Monte Carlo cross moment of the gradient at
/// theta_cur and the theta-score of the fitted atlas density, both under
/// D_beta_hat(theta_prev) with n_mc draws.
Eigen::MatrixXd estimate_sol_jacobian(const Atlas& atlas, const Eigen::VectorXd& beta_hat,
                                      const Theta& theta_prev, const Theta& theta_cur,
                                      const GameSpec& game, int n_mc, RngStream& rng,
                                      CovarianceDiagnostics* diagnostics = nullptr);

/// step_cov + jac * prev_total * jac^T, symmetrized.
Eigen::MatrixXd accumulate_covariance(const Eigen::MatrixXd& step_cov,
                                      const Eigen::MatrixXd& jac,
                                      const Eigen::MatrixXd& prev_total);

/// Plain ERM fit of the atlas parameter from the trajectory's own
/// (theta_hat_{t-1}, Z_{t,k}) pairs, pooled over steps.
Eigen::VectorXd fit_trajectory_beta_erm(const ErrTrajectory& traj, const Atlas& atlas);

/// Fills step/jacobian/accumulated covariances for every step of `traj`,
/// fitting beta by ERM on the trajectory's own pairs unless `beta_hat` is
/// supplied (non-empty).
void estimate_trajectory_covariance(ErrTrajectory& traj, const GameSpec& game,
                                    const Atlas& atlas, int n_mc, RngStream& rng,
                                    const Eigen::VectorXd& beta_hat = Eigen::VectorXd());

struct ConfidenceInterval {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
  bool covers(double x) const { return lo <= x && x <= hi; }
};

struct ConfidenceReport {
  std::vector<std::vector<ConfidenceInterval>> per_step;  // [t][coordinate]
  double level = 0.0;
  std::string target;  // label only; the same intervals serve theta_t and theta_PS
  int sample_size = 0;
};

/// Per-coordinate intervals estimate +- z_{1-alpha/2} sqrt(Sigma_hat_ii / N)
/// at every step. Requires estimate_trajectory_covariance to have run.
ConfidenceReport stable_confidence_intervals(const ErrTrajectory& traj, double alpha);

}  // namespace perfinf
