#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "perfinf/stable.hpp"
#include "perfinf/stats.hpp"

using namespace perfinf;

namespace {

Eigen::VectorXd vec2(double a, double b) { return (Eigen::VectorXd(2) << a, b).finished(); }

const Eigen::VectorXd kSigma = vec2(0.25, 0.25);
const double kEps = 0.2;

struct StableSetup {
  std::shared_ptr<DistributionMap> map = make_gaussian_location(kEps, kSigma);
  std::shared_ptr<Atlas> atlas = make_gaussian_atlas(kSigma);
  GameSpec game = make_squared_loss_game({2});
  Theta theta0 = Theta::single(vec2(1.0, 2.0));
};

}  // namespace

TEST_CASE("err_run: each estimate is the per-step sample mean, chained") {
  StableSetup s;
  RngStream rng(41);
  const ErrTrajectory traj = err_run(s.game, *s.map, s.theta0, 4, 300, rng);
  REQUIRE(traj.steps() == 4);
  // squared loss: the empirical first-order condition is the sample mean
  for (int t = 0; t < 4; ++t) {
    const Eigen::VectorXd mean = traj.samples[t].z.colwise().mean();
    CHECK((traj.estimates[t].flatten() - mean).cwiseAbs().maxCoeff() < 1e-12);
  }
  // step t samples were generated under the previous estimate
  CHECK((traj.samples[0].theta.flatten() - s.theta0.flatten()).cwiseAbs().maxCoeff() == 0.0);
  for (int t = 1; t < 4; ++t) {
    CHECK((traj.samples[t].theta.flatten() - traj.estimates[t - 1].flatten())
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
  CHECK_THROWS_AS(err_run(s.game, *s.map, s.theta0, 0, 300, rng), std::invalid_argument);
  CHECK_THROWS_AS(err_run(s.game, *s.map, s.theta0, 3, 1, rng), std::invalid_argument);
}

TEST_CASE("err_run: eps = 0 makes the steps plain i.i.d. means") {
  StableSetup s;
  s.map = make_gaussian_location(0.0, kSigma);
  RngStream rng(43);
  const ErrTrajectory traj = err_run(s.game, *s.map, s.theta0, 3, 5000, rng);
  for (int t = 0; t < 3; ++t) {
    CHECK(traj.estimates[t].flatten().norm() < 4.0 * 0.5 * std::sqrt(2.0) / std::sqrt(5000.0));
  }
}

TEST_CASE("err_run: replication mean of theta_hat_T concentrates at the truth") {
  StableSetup s;
  const int reps = 200, N = 500, T = 8;
  RngStream root(47);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(2);
  for (int r = 0; r < reps; ++r) {
    RngStream rng = root.substream({static_cast<std::uint64_t>(r)});
    const ErrTrajectory traj = err_run(s.game, *s.map, s.theta0, T, N, rng);
    acc += traj.estimates[T - 1].flatten();
  }
  acc /= reps;
  // theta_8 = eps^8 theta0 ~ 0; Sigma_8 ~ Sigma / (1 - eps^2)
  const double tr_sigma8 = (kSigma.sum()) * (1.0 - std::pow(kEps, 16)) / (1.0 - kEps * kEps);
  CHECK(acc.norm() < 3.0 * std::sqrt(tr_sigma8 / (reps * N)));
}

TEST_CASE("sandwich covariance: squared loss gives the sample covariance of Z") {
  StableSetup s;
  RngStream rng(53);
  const SampleSet samples = draw_samples(*s.map, s.theta0, 400, rng);
  const Theta at = Theta::single(Eigen::VectorXd(samples.z.colwise().mean()));
  const Eigen::MatrixXd cov = sandwich_step_covariance(s.game, samples, at);
  // V = I exactly, so the sandwich is the centered outer-product mean
  const Eigen::MatrixXd centered = samples.z.rowwise() - samples.z.colwise().mean();
  const Eigen::MatrixXd direct = (centered.transpose() * centered) / samples.size();
  CHECK((cov - direct).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sandwich covariance: consistent for Sigma at large N") {
  StableSetup s;
  RngStream rng(59);
  const SampleSet samples = draw_samples(*s.map, s.theta0, 10'000, rng);
  const Theta at = Theta::single(Eigen::VectorXd(samples.z.colwise().mean()));
  const Eigen::MatrixXd cov = sandwich_step_covariance(s.game, samples, at);
  const Eigen::MatrixXd sigma = kSigma.asDiagonal();
  CHECK((cov - sigma).norm() / sigma.norm() < 0.05);
}

TEST_CASE("sandwich covariance: identical samples give the zero matrix") {
  StableSetup s;
  SampleSet samples;
  samples.z = Eigen::MatrixXd::Ones(20, 2);
  samples.z_dims = {2};
  samples.theta = s.theta0;
  const Eigen::MatrixXd cov =
      sandwich_step_covariance(s.game, samples, Theta::single(vec2(1.0, 1.0)));
  CHECK(cov.cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("solution-map jacobian: recovers eps * I within Monte Carlo error") {
  StableSetup s;
  const Eigen::VectorXd beta_hat = Eigen::VectorXd::Constant(1, kEps);
  const Theta prev = Theta::single(vec2(0.2, 0.4));
  const Theta cur = Theta::single(vec2(0.04, 0.08));
  const int runs = 12, n_mc = 5000;
  std::vector<Eigen::MatrixXd> jacs;
  RngStream root(61);
  for (int r = 0; r < runs; ++r) {
    RngStream rng = root.substream({static_cast<std::uint64_t>(r)});
    jacs.push_back(estimate_sol_jacobian(*s.atlas, beta_hat, prev, cur, s.game, n_mc, rng));
  }
  // the independent target: differentiate the population solution map
  // sol(theta) = eps * theta by central differences
  const double h = 1e-6;
  const double fd_diag = ((kEps * (0.2 + h)) - (kEps * (0.2 - h))) / (2.0 * h);
  CHECK(fd_diag == doctest::Approx(kEps).epsilon(1e-9));
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      double mean = 0.0, var = 0.0;
      for (const auto& j : jacs) mean += j(a, b);
      mean /= runs;
      for (const auto& j : jacs) var += std::pow(j(a, b) - mean, 2);
      const double se = std::sqrt(var / (runs - 1) / runs);
      const double target = a == b ? kEps : 0.0;
      CHECK(std::abs(mean - target) <= 3.0 * se + 1e-12);
    }
  }
}

TEST_CASE("solution-map jacobian: beta = 0 gives the zero matrix") {
  StableSetup s;
  RngStream rng(67);
  const Eigen::MatrixXd jac =
      estimate_sol_jacobian(*s.atlas, Eigen::VectorXd::Zero(1), Theta::single(vec2(1.0, 2.0)),
                            Theta::single(vec2(0.0, 0.0)), s.game, 500, rng);
  CHECK(jac.cwiseAbs().maxCoeff() < 1e-14);
  CHECK_THROWS_AS(
      estimate_sol_jacobian(*s.atlas, Eigen::VectorXd::Zero(1), s.theta0, s.theta0, s.game, 50,
                            rng),
      std::invalid_argument);
}

TEST_CASE("solution-map jacobian: Monte Carlo variance scales as 1/n") {
  StableSetup s;
  const Eigen::VectorXd beta_hat = Eigen::VectorXd::Constant(1, kEps);
  const Theta prev = Theta::single(vec2(1.0, 2.0));
  const Theta cur = Theta::single(vec2(0.2, 0.4));
  const std::vector<int> sizes = {1000, 10'000, 100'000};
  const int runs = 16;
  std::vector<double> log_n, log_var;
  RngStream root(71);
  for (std::size_t si = 0; si < sizes.size(); ++si) {
    double mean = 0.0, var = 0.0;
    std::vector<double> entries(runs);
    for (int r = 0; r < runs; ++r) {
      RngStream rng = root.substream({si, static_cast<std::uint64_t>(r)});
      entries[r] =
          estimate_sol_jacobian(*s.atlas, beta_hat, prev, cur, s.game, sizes[si], rng)(0, 0);
      mean += entries[r];
    }
    mean /= runs;
    for (double e : entries) var += (e - mean) * (e - mean);
    var /= runs - 1;
    log_n.push_back(std::log(static_cast<double>(sizes[si])));
    log_var.push_back(std::log(var));
  }
  // least-squares slope over the three points
  const double xbar = (log_n[0] + log_n[1] + log_n[2]) / 3.0;
  const double ybar = (log_var[0] + log_var[1] + log_var[2]) / 3.0;
  double num = 0.0, den = 0.0;
  for (int i = 0; i < 3; ++i) {
    num += (log_n[i] - xbar) * (log_var[i] - ybar);
    den += (log_n[i] - xbar) * (log_n[i] - xbar);
  }
  CHECK(num / den == doctest::Approx(-1.0).epsilon(0.45));
}

TEST_CASE("accumulate covariance: base cases and additivity") {
  Eigen::MatrixXd step(2, 2), prev(2, 2);
  step << 1.0, 0.2, 0.2, 2.0;
  prev << 0.5, 0.0, 0.0, 0.5;
  CHECK((accumulate_covariance(step, Eigen::MatrixXd::Identity(2, 2),
                               Eigen::MatrixXd::Zero(2, 2)) -
         step)
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK((accumulate_covariance(step, Eigen::MatrixXd::Identity(2, 2), prev) - (step + prev))
            .cwiseAbs()
            .maxCoeff() < 1e-14);
  CHECK_THROWS_AS(
      accumulate_covariance(step, Eigen::MatrixXd::Identity(3, 2), prev),
      std::invalid_argument);
}

TEST_CASE("accumulate covariance: t-fold recursion reproduces the geometric closed form") {
  const Eigen::MatrixXd sigma = kSigma.asDiagonal();
  const Eigen::MatrixXd jac = kEps * Eigen::MatrixXd::Identity(2, 2);
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(2, 2);
  for (int t = 1; t <= 8; ++t) {
    total = accumulate_covariance(sigma, jac, total);
    const double factor = (1.0 - std::pow(kEps, 2 * t)) / (1.0 - kEps * kEps);
    CHECK((total - factor * sigma).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("trajectory covariance pipeline: calibrated, symmetric, monotone") {
  StableSetup s;
  RngStream rng(73);
  ErrTrajectory traj = err_run(s.game, *s.map, s.theta0, 5, 4000, rng);
  estimate_trajectory_covariance(traj, s.game, *s.atlas, 20'000, rng);
  REQUIRE(traj.has_covariances());
  CHECK(std::abs(traj.beta_hat[0] - kEps) < 0.02);
  for (int t = 0; t < traj.steps(); ++t) {
    const Eigen::MatrixXd& sig = traj.accumulated[t];
    CHECK((sig - sig.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sig);
    CHECK(es.eigenvalues().minCoeff() >= -1e-10);
    // the propagated term only adds mass
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> diff(
        Eigen::MatrixXd(sig - traj.step_covariances[t]));
    CHECK(diff.eigenvalues().minCoeff() >= -1e-10);
    // and the estimate lands near the closed form (loose at this size)
    const double factor = (1.0 - std::pow(kEps, 2 * (t + 1))) / (1.0 - kEps * kEps);
    const Eigen::MatrixXd target = factor * Eigen::MatrixXd(kSigma.asDiagonal());
    CHECK((sig - target).norm() / target.norm() < 0.2);
  }
}

TEST_CASE("confidence intervals: width uses the nominal-level multiplier") {
  StableSetup s;
  RngStream rng(79);
  ErrTrajectory traj = err_run(s.game, *s.map, s.theta0, 2, 500, rng);
  estimate_trajectory_covariance(traj, s.game, *s.atlas, 1000, rng);
  const ConfidenceReport report = stable_confidence_intervals(traj, 0.95);
  REQUIRE(report.per_step.size() == 2);
  for (int t = 0; t < 2; ++t) {
    for (int j = 0; j < 2; ++j) {
      const ConfidenceInterval& ci = report.per_step[t][j];
      const double est = traj.estimates[t].flatten()[j];
      CHECK(ci.lo <= est);
      CHECK(est <= ci.hi);
      const double implied =
          ci.width() / (2.0 * std::sqrt(traj.accumulated[t](j, j) / traj.sample_size));
      CHECK(implied == doctest::Approx(1.959964).epsilon(1e-5));
    }
  }
  CHECK_THROWS_AS(stable_confidence_intervals(traj, 1.5), std::invalid_argument);
}

TEST_CASE("confidence intervals: zero covariance degenerates to the estimate") {
  StableSetup s;
  RngStream rng(83);
  ErrTrajectory traj = err_run(s.game, *s.map, s.theta0, 1, 50, rng);
  traj.step_covariances = {Eigen::MatrixXd::Zero(2, 2)};
  traj.accumulated = {Eigen::MatrixXd::Zero(2, 2)};
  const ConfidenceReport report = stable_confidence_intervals(traj, 0.95);
  CHECK(report.per_step[0][0].width() == 0.0);
  CHECK(report.per_step[0][0].lo == traj.estimates[0].flatten()[0]);

  // a trajectory without covariances is rejected
  ErrTrajectory bare = err_run(s.game, *s.map, s.theta0, 1, 50, rng);
  CHECK_THROWS_AS(stable_confidence_intervals(bare, 0.95), std::invalid_argument);

  // and so is a non-PSD covariance
  ErrTrajectory broken = err_run(s.game, *s.map, s.theta0, 1, 50, rng);
  Eigen::MatrixXd bad(2, 2);
  bad << -1.0, 0.0, 0.0, 1.0;
  broken.step_covariances = {bad};
  broken.accumulated = {bad};
  CHECK_THROWS_AS(stable_confidence_intervals(broken, 0.95), std::invalid_argument);
}

TEST_CASE("solver failures inside err_run carry the step index") {
  StableSetup s;
  SolveOptions opts;
  opts.max_inner_iterations = 1;  // force an inner-cap failure
  RngStream rng(91);
  try {
    err_run(s.game, *s.map, s.theta0, 2, 50, rng, opts);
    FAIL("expected SolverError");
  } catch (const SolverError& e) {
    CHECK(std::string(e.what()).find("err_run step 1") != std::string::npos);
  }
}

TEST_CASE("trajectory beta fit converges to the sensitivity") {
  StableSetup s;
  RngStream rng(89);
  const ErrTrajectory traj = err_run(s.game, *s.map, s.theta0, 3, 2000, rng);
  const Eigen::VectorXd beta = fit_trajectory_beta_erm(traj, *s.atlas);
  CHECK(std::abs(beta[0] - kEps) < 0.02);
}
