#include "perfinf/oracle.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace perfinf {

StableTruth gaussian_stable_truth(double epsilon, const Eigen::VectorXd& sigma_diag,
                                  const Theta& theta0, int t) {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) {
    throw std::invalid_argument("gaussian_stable_truth: need 0 <= epsilon < 1 (contraction)");
  }
  if (t < 1) throw std::invalid_argument("gaussian_stable_truth: t must be >= 1");
  if (sigma_diag.size() != theta0.dim()) {
    throw std::invalid_argument("gaussian_stable_truth: sigma/theta dimension mismatch");
  }
  StableTruth truth;
  truth.theta_t = theta0.with_flat(std::pow(epsilon, t) * theta0.flatten());
  truth.theta_ps = theta0.with_flat(Eigen::VectorXd::Zero(theta0.dim()));
  // geometric series of the recursion Sigma_t = Sigma + eps^2 Sigma_{t-1}
  double factor = 1.0;
  if (epsilon > 0.0) {
    factor = (1.0 - std::pow(epsilon, 2 * t)) / (1.0 - epsilon * epsilon);
  }
  truth.sigma_t = (factor * sigma_diag).asDiagonal();
  return truth;
}

double OptimalTruth::plugin_risk(double theta) const {
  const double mean = b + beta_star * theta;
  return sigma * sigma + mean * mean - 2.0 * theta * mean + theta * theta;
}

OptimalTruth location_optimal_truth(double b, double beta1, double sigma) {
  if (beta1 == 1.0) {
    throw std::invalid_argument("location_optimal_truth: beta1 = 1 has no finite optimum");
  }
  OptimalTruth truth;
  truth.beta_star = beta1;
  truth.b = b;
  truth.sigma = sigma;
  truth.theta_po = -b / (beta1 - 1.0);

  // fixed deterministic grid so disagreements are reproducible
  const double lo = -5.0, hi = 5.0, step = 1e-4;
  double best_theta = lo;
  double best_value = truth.plugin_risk(lo);
  for (double theta = lo + step; theta <= hi + step / 2.0; theta += step) {
    const double value = truth.plugin_risk(theta);
    if (value < best_value) {
      best_value = value;
      best_theta = theta;
    }
  }
  truth.grid_minimizer = best_theta;
  return truth;
}

Eigen::MatrixXd replication_covariance(
    const std::function<Eigen::VectorXd(RngStream&)>& scaled_deviation_runner, int reps,
    RngStream& rng) {
  if (reps < 50) throw std::invalid_argument("replication_covariance: need reps >= 50");
  Eigen::MatrixXd rows;
  for (int r = 0; r < reps; ++r) {
    RngStream rep_stream = rng.substream({0xC0Fu, static_cast<std::uint64_t>(r)});
    Eigen::VectorXd dev;
    try {
      dev = scaled_deviation_runner(rep_stream);
    } catch (const std::exception& e) {
      throw std::runtime_error("replication_covariance: runner failed at replication " +
                               std::to_string(r) + " of " + std::to_string(reps) + ": " +
                               e.what());
    }
    if (r == 0) rows.resize(reps, dev.size());
    rows.row(r) = dev;
  }
  const Eigen::RowVectorXd mean = rows.colwise().mean();
  const Eigen::MatrixXd centered = rows.rowwise() - mean;
  return (centered.transpose() * centered) / static_cast<double>(reps - 1);
}

}  // namespace perfinf
