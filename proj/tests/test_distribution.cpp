#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "perfinf/atlas.hpp"
#include "perfinf/distribution.hpp"

using namespace perfinf;

namespace {

Eigen::VectorXd vec2(double a, double b) { return (Eigen::VectorXd(2) << a, b).finished(); }

/// Central finite difference of the log density in theta.
Eigen::VectorXd fd_theta_score(const DistributionMap& map, const Theta& theta,
                               const Eigen::RowVectorXd& z) {
  Eigen::VectorXd out(theta.dim());
  for (int j = 0; j < theta.dim(); ++j) {
    const double h = 1e-6 * (1.0 + std::abs(theta.flatten()[j]));
    Eigen::VectorXd up = theta.flatten();
    Eigen::VectorXd dn = theta.flatten();
    up[j] += h;
    dn[j] -= h;
    out[j] = (map.log_density(theta.with_flat(up), z) -
              map.log_density(theta.with_flat(dn), z)) /
             (2.0 * h);
  }
  return out;
}

}  // namespace

TEST_CASE("gaussian location: sample mean tracks eps * theta") {
  const auto map = make_gaussian_location(0.2, vec2(0.25, 0.25));
  const Theta theta = Theta::single(vec2(1.0, 2.0));
  RngStream rng(11);
  const int n = 100'000;
  const SampleSet s = draw_samples(*map, theta, n, rng);
  const Eigen::RowVectorXd mean = s.z.colwise().mean();
  const double tol = 3.0 * 0.5 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(mean[0] - 0.2) < tol);
  CHECK(std::abs(mean[1] - 0.4) < tol);
}

TEST_CASE("gaussian location: eps = 0 removes the theta dependence") {
  const auto map = make_gaussian_location(0.0, vec2(0.25, 0.25));
  RngStream rng(12);
  const SampleSet s = draw_samples(*map, Theta::single(vec2(-3.0, 7.0)), 100'000, rng);
  const Eigen::RowVectorXd mean = s.z.colwise().mean();
  const double tol = 4.0 * 0.5 / std::sqrt(1e5);
  CHECK(std::abs(mean[0]) < tol);
  CHECK(std::abs(mean[1]) < tol);
}

TEST_CASE("gaussian location: score vanishes at the mean and matches differences") {
  const auto map = make_gaussian_location(0.2, vec2(0.25, 0.25));
  const Theta theta = Theta::single(vec2(1.0, 2.0));
  const Eigen::RowVectorXd z = (Eigen::RowVectorXd(2) << 0.2, 0.4).finished();
  const Eigen::VectorXd score = map->theta_score(theta, z);
  CHECK(score.cwiseAbs().maxCoeff() < 1e-14);
  CHECK((score - fd_theta_score(*map, theta, z)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("gaussian location: construction guards") {
  CHECK_THROWS_AS(make_gaussian_location(0.2, vec2(0.25, -0.1)), std::invalid_argument);
  CHECK_THROWS_AS(make_gaussian_location(-0.1, vec2(0.25, 0.25)), std::invalid_argument);
}

TEST_CASE("location family: analytic means") {
  const Eigen::VectorXd b = Eigen::VectorXd::Constant(1, 1.0);
  RngStream rng(13);
  const int n = 100'000;
  const double tol = 4.0 * 0.5 / std::sqrt(static_cast<double>(n));

  const auto pure = make_location_family(b, 0.5, 0.3, 0.0, 0.5);
  const SampleSet s1 =
      draw_samples(*pure, Theta::single(Eigen::VectorXd::Constant(1, 0.4)), n, rng);
  CHECK(std::abs(s1.z.col(0).mean() - 1.2) < tol);  // b + beta1 * 0.4

  const auto mis = make_location_family(b, 0.5, 0.3, 0.5, 0.5);
  const SampleSet s2 =
      draw_samples(*mis, Theta::single(Eigen::VectorXd::Constant(1, 1.0)), n, rng);
  CHECK(std::abs(s2.z.col(0).mean() - 1.65) < tol);  // b + beta1 + 0.5 * beta2

  const SampleSet s3 =
      draw_samples(*mis, Theta::single(Eigen::VectorXd::Zero(1)), n, rng);
  CHECK(std::abs(s3.z.col(0).mean() - 1.0) < tol);  // theta = 0 leaves only b

  CHECK_THROWS_AS(make_location_family(b, 0.5, 0.3, 0.0, 0.0), std::invalid_argument);
}

TEST_CASE("sampling is deterministic given the stream") {
  const auto map = make_gaussian_location(0.2, vec2(0.25, 0.25));
  const Theta theta = Theta::single(vec2(1.0, 2.0));
  RngStream a(99), b(99);
  const SampleSet s1 = draw_samples(*map, theta, 500, a);
  const SampleSet s2 = draw_samples(*map, theta, 500, b);
  CHECK(s1.stream_id == s2.stream_id);
  CHECK((s1.z - s2.z).cwiseAbs().maxCoeff() == 0.0);
  // consecutive draws from one stream differ
  RngStream c(99);
  const SampleSet s3 = draw_samples(*map, theta, 500, c);
  const SampleSet s4 = draw_samples(*map, theta, 500, c);
  CHECK((s3.z - s4.z).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("sampling rejects bad arguments") {
  const auto map = make_gaussian_location(0.2, vec2(0.25, 0.25));
  RngStream rng(1);
  CHECK_THROWS_AS(draw_samples(*map, Theta::single(vec2(1.0, 2.0)), 0, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(draw_samples(*map, Theta::single(Eigen::VectorXd::Ones(3)), 10, rng),
                  std::invalid_argument);
}

TEST_CASE("score consistency on a random probe grid") {
  const auto gauss = make_gaussian_location(0.2, vec2(0.25, 0.8));
  const auto loc = make_location_family(vec2(1.0, -0.5), 0.5, 0.3, 0.4, 0.7);
  RngStream rng(405);
  for (int probe = 0; probe < 100; ++probe) {
    const Theta theta = Theta::single(vec2(rng.uniform(-2, 2), rng.uniform(-2, 2)));
    const Eigen::RowVectorXd z =
        (Eigen::RowVectorXd(2) << rng.uniform(-3, 3), rng.uniform(-3, 3)).finished();
    for (const auto& map : {gauss, loc}) {
      const Eigen::VectorXd analytic = map->theta_score(theta, z);
      const Eigen::VectorXd fd = fd_theta_score(*map, theta, z);
      CHECK((analytic - fd).cwiseAbs().maxCoeff() < 1e-5);
    }
  }
}

TEST_CASE("per-player marginals are drawn independently") {
  // two scalar players share the map; cross-player correlation dies as 1/sqrt(n)
  const auto map = make_gaussian_location(0.2, vec2(0.25, 0.25));
  const Theta theta({Eigen::VectorXd::Constant(1, 1.0), Eigen::VectorXd::Constant(1, 2.0)});
  RngStream rng(77);
  const int n = 10'000;
  const SampleSet s = draw_samples(*map, theta, n, rng);
  const Eigen::VectorXd x = s.z.col(0).array() - s.z.col(0).mean();
  const Eigen::VectorXd y = s.z.col(1).array() - s.z.col(1).mean();
  const double rho = x.dot(y) / std::sqrt(x.squaredNorm() * y.squaredNorm());
  CHECK(std::abs(rho) < 5.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("sensitivity witness: shift coupling moves samples by eps * dtheta") {
  const double eps = 0.2;
  const auto map = make_gaussian_location(eps, vec2(0.25, 0.25));
  const Theta theta1 = Theta::single(vec2(1.0, 2.0));
  const Theta theta2 = Theta::single(vec2(-0.5, 3.0));
  RngStream a(31), b(31);
  const SampleSet s1 = draw_samples(*map, theta1, 2000, a);
  const SampleSet s2 = draw_samples(*map, theta2, 2000, b);
  const Eigen::RowVectorXd shift =
      eps * (theta2.flatten() - theta1.flatten()).transpose();
  // common random numbers realize the coupling Y = X + eps (theta2 - theta1)
  CHECK(((s2.z.rowwise() - shift) - s1.z).cwiseAbs().maxCoeff() < 1e-12);
  // hence W1(D(theta1), D(theta2)) <= E|X - Y|_1 = eps * |dtheta|_1
  const double mean_l1 = (s2.z - s1.z).cwiseAbs().rowwise().sum().mean();
  CHECK(mean_l1 == doctest::Approx(
                       eps * (theta2.flatten() - theta1.flatten()).lpNorm<1>())
                       .epsilon(1e-10));
  CHECK(map->sensitivity(0) == eps);
}

TEST_CASE("linear atlas: fitting loss derivatives") {
  const auto atlas = make_linear_atlas(Eigen::VectorXd::Constant(1, 1.0), 0.5);
  const Theta theta1 = Theta::single(Eigen::VectorXd::Constant(1, 1.0));
  const Eigen::RowVectorXd z2 = Eigen::RowVectorXd::Constant(1, 2.0);
  const Eigen::VectorXd beta1 = Eigen::VectorXd::Constant(1, 1.0);

  CHECK(atlas->fitting_loss_beta_gradient(theta1, 0, z2, beta1)[0] == doctest::Approx(-2.0));
  // finite-difference cross-check on r
  const double h = 1e-6;
  const double fd = (atlas->fitting_loss(theta1, 0, z2, Eigen::VectorXd::Constant(1, 1.0 + h)) -
                     atlas->fitting_loss(theta1, 0, z2, Eigen::VectorXd::Constant(1, 1.0 - h))) /
                    (2.0 * h);
  CHECK(fd == doctest::Approx(-2.0).epsilon(1e-6));

  const Theta theta0 = Theta::single(Eigen::VectorXd::Zero(1));
  CHECK(atlas->fitting_loss_beta_gradient(theta0, 0, z2, beta1)[0] == 0.0);

  const Theta theta2 = Theta::single(Eigen::VectorXd::Constant(1, 2.0));
  CHECK(atlas->fitting_loss_beta_hessian(theta2, 0, z2, beta1)(0, 0) == doctest::Approx(8.0));
  const double fd_h =
      (atlas->fitting_loss_beta_gradient(theta2, 0, z2, Eigen::VectorXd::Constant(1, 1.0 + h))[0] -
       atlas->fitting_loss_beta_gradient(theta2, 0, z2,
                                         Eigen::VectorXd::Constant(1, 1.0 - h))[0]) /
      (2.0 * h);
  CHECK(fd_h == doctest::Approx(8.0).epsilon(1e-7));

  CHECK_THROWS_AS(make_linear_atlas(Eigen::VectorXd::Constant(1, 1.0), 0.0),
                  std::invalid_argument);
}

TEST_CASE("atlas density integrates to one and scores match differences") {
  const auto atlas = make_linear_atlas(Eigen::VectorXd::Constant(1, 1.0), 0.5);
  const Theta theta = Theta::single(Eigen::VectorXd::Constant(1, 0.7));
  const Eigen::VectorXd beta = Eigen::VectorXd::Constant(1, 0.5);

  // trapezoid over +-10 sd around the mean
  const double mu = atlas->mean_block(theta, 0, beta)[0];
  const double lo = mu - 5.0, hi = mu + 5.0;
  const int grid = 20'000;
  double integral = 0.0;
  for (int i = 0; i <= grid; ++i) {
    const double z = lo + (hi - lo) * i / grid;
    const double w = (i == 0 || i == grid) ? 0.5 : 1.0;
    integral += w * std::exp(atlas->log_density_block(
                    theta, 0, Eigen::RowVectorXd::Constant(1, z), beta));
  }
  integral *= (hi - lo) / grid;
  CHECK(integral == doctest::Approx(1.0).epsilon(1e-6));

  // theta-score and beta-score against finite differences of the log density
  RngStream rng(9);
  for (int probe = 0; probe < 100; ++probe) {
    const Theta tp = Theta::single(Eigen::VectorXd::Constant(1, rng.uniform(-2, 2)));
    const Eigen::RowVectorXd zp = Eigen::RowVectorXd::Constant(1, rng.uniform(-2, 4));
    const double h = 1e-6;
    const double fd_t =
        (atlas->log_density_block(tp.with_flat(tp.flatten().array() + h), 0, zp, beta) -
         atlas->log_density_block(tp.with_flat(tp.flatten().array() - h), 0, zp, beta)) /
        (2.0 * h);
    CHECK(std::abs(atlas->theta_score(tp, 0, zp, beta)[0] - fd_t) < 1e-5);
    const double fd_b = (atlas->log_density_block(tp, 0, zp, beta.array() + h) -
                         atlas->log_density_block(tp, 0, zp, beta.array() - h)) /
                        (2.0 * h);
    CHECK(std::abs(atlas->beta_score(tp, 0, zp, beta)[0] - fd_b) < 1e-5);
  }
}

TEST_CASE("batched atlas rows agree with per-row calls") {
  const auto atlas = make_linear_atlas(vec2(1.0, -0.5), 0.5);
  const Theta theta = Theta::single(vec2(0.7, -0.2));
  const Eigen::VectorXd beta = Eigen::VectorXd::Constant(1, 0.4);
  RngStream rng(21);
  Eigen::MatrixXd z(50, 2);
  for (int i = 0; i < z.size(); ++i) z(i / 2, i % 2) = rng.uniform(-2, 2);

  const Eigen::VectorXd batch = atlas->log_density_rows(theta, 0, z, beta);
  const Eigen::MatrixXd scores = atlas->theta_score_rows(theta, 0, z, beta);
  const Eigen::MatrixXd grads = atlas->fitting_loss_beta_gradient_rows(theta, 0, z, beta);
  for (int k = 0; k < z.rows(); ++k) {
    CHECK(batch[k] == doctest::Approx(atlas->log_density_block(theta, 0, z.row(k), beta))
                          .epsilon(1e-12));
    CHECK((scores.row(k).transpose() - atlas->theta_score(theta, 0, z.row(k), beta))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
    CHECK((grads.row(k).transpose() -
           atlas->fitting_loss_beta_gradient(theta, 0, z.row(k), beta))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
  }
}

TEST_CASE("families are addressable by name with numeric parameters") {
  const auto gauss = make_distribution_map("gaussian_location", {0.2, 0.25, 0.25});
  CHECK(gauss->sensitivity(0) == 0.2);
  CHECK(gauss->total_z_dim() == 2);

  const auto loc = make_distribution_map("location_family", {0.5, 0.3, 0.25, 0.5, 1.0});
  CHECK(loc->total_z_dim() == 1);
  RngStream rng(19);
  const Theta theta = Theta::single(Eigen::VectorXd::Constant(1, 1.0));
  // mean b + beta1 + eps*beta2 = 1.575 at theta = 1
  CHECK(std::abs(loc->sample_block(theta, 0, 20'000, rng).col(0).mean() - 1.575) < 0.02);

  const auto atlas = make_atlas("linear_atlas", {0.5, 1.0});
  CHECK(atlas->total_z_dim() == 1);
  const auto gatlas = make_atlas("gaussian_atlas", {0.25, 0.25});
  CHECK(gatlas->total_z_dim() == 2);

  CHECK_THROWS_AS(make_distribution_map("no_such_family", {1.0}), std::invalid_argument);
  CHECK_THROWS_AS(make_distribution_map("gaussian_location", {0.2}), std::invalid_argument);
  CHECK_THROWS_AS(make_atlas("no_such_atlas", {1.0}), std::invalid_argument);
}

TEST_CASE("theta flatten round-trip and block access") {
  Theta t({vec2(1.0, 2.0), Eigen::VectorXd::Constant(1, 3.0)});
  CHECK(t.players() == 2);
  CHECK(t.dim() == 3);
  CHECK(t.block_dim(1) == 1);
  const Theta back = Theta::unflatten(t.flatten(), t.block_dims());
  CHECK((back.flatten() - t.flatten()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.block(0)[1] == 2.0);
  CHECK_THROWS_AS(Theta::unflatten(Eigen::VectorXd::Ones(2), {2, 1}), std::invalid_argument);
}

TEST_CASE("param box projection") {
  const ParamBox box = ParamBox::cube(2, -1.0, 1.0);
  CHECK((box.project(vec2(3.0, -0.5)) - vec2(1.0, -0.5)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(box.contains(box.project(vec2(100.0, -100.0))));
  CHECK_THROWS_AS(ParamBox(vec2(1.0, 0.0), vec2(0.0, 1.0)), std::invalid_argument);
}
