#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "perfinf/distribution.hpp"
#include "perfinf/solvers.hpp"

using namespace perfinf;

namespace {

Eigen::VectorXd vec2(double a, double b) { return (Eigen::VectorXd(2) << a, b).finished(); }

SampleSet fixed_samples(const Eigen::MatrixXd& z, std::vector<int> z_dims, const Theta& theta) {
  SampleSet s;
  s.z = z;
  s.z_dims = std::move(z_dims);
  s.theta = theta;
  return s;
}

/// Two scalar players with gradient G_i = theta^i - z^i + 0.1 theta^{-i}.
GameSpec coupled_two_player_game() {
  GameSpec game;
  game.theta_dims = {1, 1};
  game.boxes = {ParamBox::unbounded(1), ParamBox::unbounded(1)};
  game.alpha = 0.9;  // smallest eigenvalue of the symmetrized coupling matrix
  game.beta_smoothness = {1.0, 1.0};
  for (int i = 0; i < 2; ++i) {
    const int other = 1 - i;
    PlayerLoss p;
    p.loss = [i, other](const Theta& theta, const Eigen::RowVectorXd& z) {
      const double own = theta.block(i)[0];
      return 0.5 * (own - z[0]) * (own - z[0]) + 0.1 * own * theta.block(other)[0];
    };
    p.gradient = [i, other](const Theta& theta, const Eigen::RowVectorXd& z) {
      Eigen::VectorXd g(1);
      g[0] = theta.block(i)[0] - z[0] + 0.1 * theta.block(other)[0];
      return g;
    };
    p.theta_jacobian = [i, other](const Theta& theta, const Eigen::RowVectorXd&) {
      Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(1, theta.dim());
      jac(0, theta.block_offset(i)) = 1.0;
      jac(0, theta.block_offset(other)) = 0.1;
      return jac;
    };
    game.players.push_back(std::move(p));
  }
  return game;
}

}  // namespace

TEST_CASE("squared loss reduces to the sample mean") {
  const GameSpec game = make_squared_loss_game({2});
  RngStream rng(3);
  Eigen::MatrixXd z(50, 2);
  for (int k = 0; k < 50; ++k) {
    z(k, 0) = rng.uniform(-4, 4);
    z(k, 1) = rng.uniform(-4, 4);
  }
  const Theta init = Theta::single(vec2(5.0, -5.0));
  const SampleSet s = fixed_samples(z, {2}, init);
  SolveDiagnostics diag;
  const Theta result = solve_empirical_foc(game, s, init, {}, &diag);
  const Eigen::VectorXd mean = z.colwise().mean();
  CHECK((result.flatten() - mean).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(diag.residual_norm <= 1e-8);
  CHECK_FALSE(diag.boundary_active);
}

TEST_CASE("single sample returns that sample") {
  const GameSpec game = make_squared_loss_game({2});
  const Eigen::MatrixXd z = vec2(0.7, -1.3).transpose();
  const SampleSet s = fixed_samples(z, {2}, Theta::single(vec2(0, 0)));
  const Theta result = solve_empirical_foc(game, s, Theta::single(vec2(0, 0)));
  CHECK((result.flatten() - vec2(0.7, -1.3)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("two-player coupled game matches the linear-system solve") {
  const GameSpec game = coupled_two_player_game();
  RngStream rng(17);
  Eigen::MatrixXd z(40, 2);
  for (int k = 0; k < 40; ++k) {
    z(k, 0) = rng.normal(1.0, 0.5);
    z(k, 1) = rng.normal(-2.0, 0.5);
  }
  const Theta init({Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)});
  const SampleSet s = fixed_samples(z, {1, 1}, init);
  const Theta result = solve_empirical_foc(game, s, init);

  Eigen::MatrixXd a(2, 2);
  a << 1.0, 0.1, 0.1, 1.0;
  const Eigen::VectorXd mean = z.colwise().mean();
  const Eigen::VectorXd direct = a.partialPivLu().solve(mean);
  CHECK((result.flatten() - direct).cwiseAbs().maxCoeff() < 1e-6);

  // simultaneous-update mode reaches the same point
  SolveOptions simultaneous;
  simultaneous.mode = SolveOptions::Mode::kSimultaneous;
  const Theta result2 = solve_empirical_foc(game, s, init, simultaneous);
  CHECK((result2.flatten() - direct).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("solution is invariant to the initial point") {
  const GameSpec game = coupled_two_player_game();
  RngStream rng(23);
  Eigen::MatrixXd z(30, 2);
  for (int k = 0; k < 30; ++k) {
    z(k, 0) = rng.normal(0.5, 1.0);
    z(k, 1) = rng.normal(1.5, 1.0);
  }
  const Theta shape({Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)});
  const SampleSet s = fixed_samples(z, {1, 1}, shape);
  SolveOptions opts;
  opts.check_init_invariance = true;
  const Theta a = solve_empirical_foc(game, s, shape.with_flat(vec2(9.0, -9.0)), opts);
  const Theta b = solve_empirical_foc(game, s, shape.with_flat(vec2(-3.0, 3.0)), opts);
  CHECK((a.flatten() - b.flatten()).norm() <= 2e-8);
}

TEST_CASE("gradient-descent path (no hessian, no jacobian) still solves") {
  GameSpec game = make_squared_loss_game({2});
  game.players[0].theta_jacobian = nullptr;
  game.players[0].mean_theta_jacobian = nullptr;
  RngStream rng(29);
  Eigen::MatrixXd z(25, 2);
  for (int k = 0; k < 25; ++k) {
    z(k, 0) = rng.normal(2.0, 1.0);
    z(k, 1) = rng.normal(-1.0, 1.0);
  }
  const Theta init = Theta::single(vec2(0, 0));
  const SampleSet s = fixed_samples(z, {2}, init);
  const Theta result = solve_empirical_foc(game, s, init);
  CHECK((result.flatten() - z.colwise().mean().transpose()).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("boundary-active solutions are flagged, not failed") {
  const GameSpec game =
      make_squared_loss_game({2}, 0.5, {ParamBox::cube(2, -1.0, 1.0)});
  const Eigen::MatrixXd z = vec2(2.0, 0.0).transpose();  // mean outside the box
  const SampleSet s = fixed_samples(z, {2}, Theta::single(vec2(0, 0)));
  SolveDiagnostics diag;
  const Theta result = solve_empirical_foc(game, s, Theta::single(vec2(0, 0)), {}, &diag);
  CHECK(result.flatten()[0] == doctest::Approx(1.0));
  CHECK(result.flatten()[1] == doctest::Approx(0.0));
  CHECK(diag.boundary_active);
}

TEST_CASE("solve options are validated") {
  const GameSpec game = make_squared_loss_game({2});
  const SampleSet s = fixed_samples(Eigen::MatrixXd::Ones(5, 2), {2},
                                    Theta::single(vec2(0, 0)));
  SolveOptions bad;
  bad.tol = 0.0;
  CHECK_THROWS_AS(solve_empirical_foc(game, s, Theta::single(vec2(0, 0)), bad),
                  std::invalid_argument);
  bad.tol = 1e-8;
  bad.max_sweeps = 0;
  CHECK_THROWS_AS(solve_empirical_foc(game, s, Theta::single(vec2(0, 0)), bad),
                  std::invalid_argument);
}

TEST_CASE("non-contractive coupling exhausts the sweep cap with a SolverError") {
  // cross-coupling 5x the own-block slope: best-response sweeps diverge
  GameSpec game;
  game.theta_dims = {1, 1};
  game.boxes = {ParamBox::unbounded(1), ParamBox::unbounded(1)};
  for (int i = 0; i < 2; ++i) {
    const int other = 1 - i;
    PlayerLoss p;
    p.gradient = [i, other](const Theta& theta, const Eigen::RowVectorXd& z) {
      Eigen::VectorXd g(1);
      g[0] = theta.block(i)[0] - z[0] + 5.0 * theta.block(other)[0];
      return g;
    };
    p.theta_jacobian = [i](const Theta& theta, const Eigen::RowVectorXd&) {
      Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(1, theta.dim());
      jac(0, theta.block_offset(i)) = 1.0;
      return jac;
    };
    game.players.push_back(std::move(p));
  }
  const Theta init({Eigen::VectorXd::Constant(1, 1.0), Eigen::VectorXd::Constant(1, 1.0)});
  const SampleSet s = fixed_samples(Eigen::MatrixXd::Ones(4, 2), {1, 1}, init);
  SolveOptions opts;
  opts.max_sweeps = 30;
  CHECK_THROWS_AS(solve_empirical_foc(game, s, init, opts), SolverError);
}

TEST_CASE("sample-set shape mismatches raise argument errors") {
  const GameSpec game = make_squared_loss_game({2});
  SampleSet empty;
  empty.z.resize(0, 2);
  empty.z_dims = {2};
  CHECK_THROWS_AS(solve_empirical_foc(game, empty, Theta::single(vec2(0, 0))),
                  std::invalid_argument);
  const SampleSet wrong = fixed_samples(Eigen::MatrixXd::Zero(5, 2), {1, 1},
                                        Theta({Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)}));
  CHECK_THROWS_AS(solve_empirical_foc(game, wrong, Theta::single(vec2(0, 0))),
                  std::invalid_argument);
}

TEST_CASE("fixed point iteration: contraction map") {
  const Theta theta0 = Theta::single(vec2(1.0, 2.0));
  const auto contraction = [](const Theta& t) { return t.with_flat(0.2 * t.flatten()); };
  const FixedPointResult r = fixed_point_iterate(contraction, theta0, 1e-10, 100);
  CHECK(r.value.flatten().norm() < 1e-9);
  CHECK(r.contraction_ratio == doctest::Approx(0.2).epsilon(1e-9));
  CHECK(static_cast<int>(r.trace.size()) == r.iterations + 1);
}

TEST_CASE("fixed point iteration: identity map returns immediately") {
  const Theta theta0 = Theta::single(vec2(1.0, 2.0));
  const FixedPointResult r =
      fixed_point_iterate([](const Theta& t) { return t; }, theta0, 1e-10, 100);
  CHECK(r.iterations == 1);
  CHECK((r.value.flatten() - theta0.flatten()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("fixed point iteration: affine scalar map") {
  const Theta theta0 = Theta::single(Eigen::VectorXd::Zero(1));
  const auto affine = [](const Theta& t) { return t.with_flat(0.5 * t.flatten().array() + 1.0); };
  const FixedPointResult r = fixed_point_iterate(affine, theta0, 1e-8, 200);
  CHECK(std::abs(r.value.flatten()[0] - 2.0) <= 2e-8);  // hand-solved theta = 0.5 theta + 1
  CHECK(r.contraction_ratio == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("fixed point iteration: cap exceeded carries the trace") {
  const Theta theta0 = Theta::single(Eigen::VectorXd::Constant(1, 1.0));
  try {
    fixed_point_iterate([](const Theta& t) { return t.with_flat(-t.flatten()); }, theta0, 1e-8,
                        10);
    FAIL("expected SolverError");
  } catch (const SolverError& e) {
    CHECK(e.trace.size() == 11);
  }
}

TEST_CASE("contraction coefficient arithmetic") {
  const auto map1 = make_gaussian_location(0.2, Eigen::VectorXd::Constant(1, 0.25));
  GameSpec single = make_squared_loss_game({1});  // alpha = beta = 1
  CHECK(contraction_coefficient(single, *map1) == doctest::Approx(0.2));

  const auto map0 = make_gaussian_location(0.0, Eigen::VectorXd::Constant(1, 0.25));
  CHECK(contraction_coefficient(single, *map0) == 0.0);

  GameSpec two = make_squared_loss_game({1, 1});
  struct TwoEps final : DistributionMap {
    int total_z_dim() const override { return 2; }
    Eigen::MatrixXd sample_block(const Theta&, int, int n, RngStream&) const override {
      return Eigen::MatrixXd::Zero(n, 1);
    }
    double sensitivity(int player) const override { return player == 0 ? 0.3 : 0.4; }
  } two_eps;
  CHECK(contraction_coefficient(two, two_eps) == doctest::Approx(0.5));

  GameSpec missing = two;
  missing.alpha.reset();
  CHECK_THROWS_AS(contraction_coefficient(missing, two_eps), std::invalid_argument);

  CHECK(compatibility(two, two_eps) == std::optional<bool>(true));
  CHECK(compatibility(missing, two_eps) == std::nullopt);
  GameSpec weak = two;
  weak.alpha = 0.3;  // C = sqrt(0.25) / 0.3 > 1
  CHECK(compatibility(weak, two_eps) == std::optional<bool>(false));
}

TEST_CASE("built-in game gradients match finite differences") {
  RngStream rng(31);
  for (const GameSpec& game : {make_squared_loss_game({2}), coupled_two_player_game()}) {
    const std::vector<int> z_dims =
        game.theta_dims;  // built-ins use matching z blocks
    for (int probe = 0; probe < 20; ++probe) {
      Eigen::VectorXd flat(game.total_dim());
      Eigen::RowVectorXd z(game.total_dim());
      for (int j = 0; j < flat.size(); ++j) {
        flat[j] = rng.uniform(-2, 2);
        z[j] = rng.uniform(-2, 2);
      }
      const Theta theta(flat, game.theta_dims);
      CHECK(max_gradient_fd_error(game, theta, z, z_dims) < 1e-5);
    }
  }
}
