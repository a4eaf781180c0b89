#include "perfinf/stable.hpp"

#include <cmath>
#include <stdexcept>

#include "perfinf/optimal.hpp"
#include "perfinf/stats.hpp"

namespace perfinf {

namespace {

/// Mean of dG/dtheta^T over a set of z rows, assembled d x d.
Eigen::MatrixXd mean_gradient_jacobian(const GameSpec& game, const Theta& theta,
                                       const Eigen::MatrixXd& z,
                                       const std::vector<int>& z_dims) {
  const int d = theta.dim();
  Eigen::MatrixXd v(d, d);
  int z_off = 0;
  for (int i = 0; i < game.player_count(); ++i) {
    v.middleRows(theta.block_offset(i), theta.block_dim(i)) = player_mean_theta_jacobian(
        game.players[i], theta, z.middleCols(z_off, z_dims[i]));
    z_off += z_dims[i];
  }
  return v;
}

/// n x d matrix of stacked per-player gradients.
Eigen::MatrixXd stacked_gradient_rows(const GameSpec& game, const Theta& theta,
                                      const Eigen::MatrixXd& z,
                                      const std::vector<int>& z_dims) {
  Eigen::MatrixXd grads(z.rows(), theta.dim());
  int z_off = 0;
  for (int i = 0; i < game.player_count(); ++i) {
    grads.middleCols(theta.block_offset(i), theta.block_dim(i)) =
        player_gradient_rows(game.players[i], theta, z.middleCols(z_off, z_dims[i]));
    z_off += z_dims[i];
  }
  return grads;
}

}  // namespace

ErrTrajectory err_run(const GameSpec& game, const DistributionMap& map, const Theta& theta0,
                      int T, int N, RngStream& rng, const SolveOptions& opts) {
  if (T < 1) throw std::invalid_argument("err_run: T must be >= 1");
  if (N < 2) throw std::invalid_argument("err_run: N must be >= 2");
  ErrTrajectory traj;
  traj.theta0 = theta0;
  traj.sample_size = N;
  Theta current = theta0;
  for (int t = 1; t <= T; ++t) {
    RngStream step_stream = rng.substream({0x5A11u, static_cast<std::uint64_t>(t)});
    SampleSet samples = draw_samples(map, current, N, step_stream);
    try {
      current = solve_empirical_foc(game, samples, current, opts);
    } catch (const SolverError& e) {
      throw SolverError("err_run step " + std::to_string(t) + ": " + e.what(),
                        e.last_iterate, e.residual_norm);
    }
    traj.samples.push_back(std::move(samples));
    traj.estimates.push_back(current);
  }
  return traj;
}

Eigen::MatrixXd sandwich_step_covariance(const GameSpec& game, const SampleSet& samples,
                                         const Theta& theta_hat,
                                         CovarianceDiagnostics* diagnostics) {
  const int n = samples.size();
  if (n < 2) throw std::invalid_argument("sandwich_step_covariance: need >= 2 samples");

  const Eigen::MatrixXd v =
      mean_gradient_jacobian(game, theta_hat, samples.z, samples.z_dims);
  const Eigen::MatrixXd grads =
      stacked_gradient_rows(game, theta_hat, samples.z, samples.z_dims);
  const Eigen::RowVectorXd mean_grad = grads.colwise().mean();
  const Eigen::MatrixXd centered = grads.rowwise() - mean_grad;
  const Eigen::MatrixXd h = (centered.transpose() * centered) / n;

  double ridge = 0.0;
  const Eigen::MatrixXd v_inv = invert_with_ridge(v, &ridge);
  double clip = 0.0;
  const Eigen::MatrixXd out = psd_clip(v_inv * h * v_inv.transpose(), &clip);
  if (diagnostics != nullptr) {
    diagnostics->ridge_used = ridge;
    diagnostics->psd_clip_magnitude = clip;
  }
  return out;
}

Eigen::MatrixXd estimate_sol_jacobian(const Atlas& atlas, const Eigen::VectorXd& beta_hat,
                                      const Theta& theta_prev, const Theta& theta_cur,
                                      const GameSpec& game, int n_mc, RngStream& rng,
                                      CovarianceDiagnostics* diagnostics) {
  if (n_mc < 100) throw std::invalid_argument("estimate_sol_jacobian: n_mc must be >= 100");
  const int d = theta_cur.dim();
  const int m = game.player_count();
  const std::vector<int> z_dims = atlas.z_block_dims(theta_prev.block_dims());

  // per-player draws under the fitted atlas at theta_prev
  int total = 0;
  for (int dim : z_dims) total += dim;
  Eigen::MatrixXd z(n_mc, total);
  const std::uint64_t nonce = rng.next_u64();
  int col = 0;
  for (int i = 0; i < m; ++i) {
    RngStream player_stream = rng.substream({nonce, static_cast<std::uint64_t>(i)});
    z.middleCols(col, z_dims[i]) = atlas.sample_block(
        theta_prev, i, beta_block(atlas, beta_hat, i), n_mc, player_stream);
    col += z_dims[i];
  }

  const Eigen::MatrixXd grads = stacked_gradient_rows(game, theta_cur, z, z_dims);
  Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(n_mc, d);
  int z_off = 0;
  for (int i = 0; i < m; ++i) {
    scores += atlas.theta_score_rows(theta_prev, i, z.middleCols(z_off, z_dims[i]),
                                     beta_block(atlas, beta_hat, i));
    z_off += z_dims[i];
  }
  const Eigen::MatrixXd cross = (grads.transpose() * scores) / n_mc;

  const Eigen::MatrixXd v = mean_gradient_jacobian(game, theta_cur, z, z_dims);
  double ridge = 0.0;
  const Eigen::MatrixXd v_inv = invert_with_ridge(v, &ridge);
  if (diagnostics != nullptr) diagnostics->ridge_used = ridge;
  return -v_inv * cross;
}

Eigen::MatrixXd accumulate_covariance(const Eigen::MatrixXd& step_cov,
                                      const Eigen::MatrixXd& jac,
                                      const Eigen::MatrixXd& prev_total) {
  if (step_cov.rows() != step_cov.cols() || jac.rows() != step_cov.rows() ||
      jac.cols() != prev_total.rows() || prev_total.rows() != prev_total.cols()) {
    throw std::invalid_argument("accumulate_covariance: dimension mismatch");
  }
  return symmetrize(step_cov + jac * prev_total * jac.transpose());
}

Eigen::VectorXd fit_trajectory_beta_erm(const ErrTrajectory& traj, const Atlas& atlas) {
  if (traj.steps() < 1) throw std::invalid_argument("fit_trajectory_beta_erm: empty trajectory");
  PairedData pairs;
  pairs.z_dims = traj.samples.front().z_dims;
  const int n_total = traj.steps() * traj.sample_size;
  pairs.z.resize(n_total, traj.samples.front().total_dim());
  pairs.thetas.reserve(n_total);
  int at = 0;
  Theta generator = traj.theta0;
  for (int t = 0; t < traj.steps(); ++t) {
    const SampleSet& s = traj.samples[t];
    pairs.z.middleRows(at, s.size()) = s.z;
    for (int k = 0; k < s.size(); ++k) pairs.thetas.push_back(generator);
    at += s.size();
    generator = traj.estimates[t];
  }
  return erm_beta(pairs, atlas);
}

void estimate_trajectory_covariance(ErrTrajectory& traj, const GameSpec& game,
                                    const Atlas& atlas, int n_mc, RngStream& rng,
                                    const Eigen::VectorXd& beta_hat) {
  traj.beta_hat = beta_hat.size() > 0 ? beta_hat : fit_trajectory_beta_erm(traj, atlas);
  traj.step_covariances.clear();
  traj.jacobians.clear();
  traj.accumulated.clear();
  traj.covariance_diagnostics.assign(traj.steps(), {});

  for (int t = 0; t < traj.steps(); ++t) {
    CovarianceDiagnostics diag;
    const Eigen::MatrixXd step =
        sandwich_step_covariance(game, traj.samples[t], traj.estimates[t], &diag);
    traj.step_covariances.push_back(step);
    if (t == 0) {
      // Sigma_0 = 0: theta0 is deterministic, no propagated term
      traj.accumulated.push_back(step);
    } else {
      const Theta& prev = traj.estimates[t - 1];
      RngStream jac_stream = rng.substream({0x1ACu, static_cast<std::uint64_t>(t)});
      CovarianceDiagnostics jd;
      const Eigen::MatrixXd jac = estimate_sol_jacobian(
          atlas, traj.beta_hat, prev, traj.estimates[t], game, n_mc, jac_stream, &jd);
      diag.ridge_used = std::max(diag.ridge_used, jd.ridge_used);
      traj.jacobians.push_back(jac);
      traj.accumulated.push_back(accumulate_covariance(step, jac, traj.accumulated.back()));
    }
    double clip = 0.0;
    traj.accumulated.back() = psd_clip(traj.accumulated.back(), &clip);
    diag.psd_clip_magnitude = std::max(diag.psd_clip_magnitude, clip);
    traj.covariance_diagnostics[t] = diag;
  }
}

ConfidenceReport stable_confidence_intervals(const ErrTrajectory& traj, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("stable_confidence_intervals: alpha must be in (0, 1)");
  }
  if (!traj.has_covariances() ||
      static_cast<int>(traj.accumulated.size()) != traj.steps()) {
    throw std::invalid_argument(
        "stable_confidence_intervals: trajectory has no covariance estimates");
  }
  const double z = normal_quantile(0.5 + alpha / 2.0);
  ConfidenceReport report;
  report.level = alpha;
  report.target = "theta_t";
  report.sample_size = traj.sample_size;
  for (int t = 0; t < traj.steps(); ++t) {
    const Eigen::MatrixXd& sigma = traj.accumulated[t];
    if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-9 ||
        (sigma.diagonal().array() < -1e-12).any()) {
      throw std::invalid_argument("stable_confidence_intervals: covariance not PSD");
    }
    const Eigen::VectorXd& est = traj.estimates[t].flatten();
    std::vector<ConfidenceInterval> row(est.size());
    for (int j = 0; j < est.size(); ++j) {
      const double half = z * std::sqrt(std::max(0.0, sigma(j, j)) / traj.sample_size);
      row[j] = {est[j] - half, est[j] + half};
    }
    report.per_step.push_back(std::move(row));
  }
  return report;
}

}  // namespace perfinf
