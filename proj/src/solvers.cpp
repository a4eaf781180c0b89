#include "perfinf/solvers.hpp"

#include <cmath>

namespace perfinf {

namespace {

Eigen::VectorXd stacked_gradient(const std::vector<PlayerObjective>& players,
                                 const Theta& theta) {
  Eigen::VectorXd g(theta.dim());
  for (int i = 0; i < static_cast<int>(players.size()); ++i) {
    g.segment(theta.block_offset(i), theta.block_dim(i)) = players[i].gradient(theta);
  }
  return g;
}

/// Norm of theta - Pi_box(theta - g): zero exactly at a projected stationary point.
double projected_residual(const Theta& theta, const Eigen::VectorXd& g,
                          const std::vector<ParamBox>& boxes) {
  double acc = 0.0;
  for (int i = 0; i < theta.players(); ++i) {
    const Eigen::VectorXd block = theta.block(i);
    const Eigen::VectorXd moved =
        boxes[i].project(block - g.segment(theta.block_offset(i), theta.block_dim(i)));
    acc += (block - moved).squaredNorm();
  }
  return std::sqrt(acc);
}

Eigen::MatrixXd fd_block_hessian(const PlayerObjective& player, const Theta& theta, int block) {
  const int off = theta.block_offset(block);
  const int d = theta.block_dim(block);
  const double h = 1e-5 * (1.0 + theta.flatten().norm());
  Eigen::MatrixXd hess(d, d);
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd up = theta.flatten();
    Eigen::VectorXd dn = theta.flatten();
    up[off + j] += h;
    dn[off + j] -= h;
    hess.col(j) =
        (player.gradient(theta.with_flat(up)) - player.gradient(theta.with_flat(dn))) /
        (2.0 * h);
  }
  return hess;
}

/// Solves player i's block condition holding the other blocks fixed.
/// Returns the updated full theta.
Theta solve_single_block(const std::vector<PlayerObjective>& players,
                         const std::vector<ParamBox>& boxes, Theta theta, int i,
                         double inner_tol, const SolveOptions& opts) {
  const PlayerObjective& player = players[i];
  const int off = theta.block_offset(i);
  const int d = theta.block_dim(i);
  const bool use_newton = static_cast<bool>(player.hessian) || !player.value;

  Eigen::VectorXd g = player.gradient(theta);
  for (int iter = 0; iter < opts.max_inner_iterations; ++iter) {
    const Eigen::VectorXd block = theta.block(i);
    const double res = (block - boxes[i].project(block - g)).norm();
    if (res <= inner_tol) return theta;

    if (use_newton) {
      const Eigen::MatrixXd hess =
          player.hessian ? player.hessian(theta) : fd_block_hessian(player, theta, i);
      Eigen::VectorXd step = hess.partialPivLu().solve(-g);
      if (!step.allFinite()) step = -g;
      double lambda = opts.damping;
      bool accepted = false;
      for (int attempt = 0; attempt < 40; ++attempt) {
        Eigen::VectorXd trial_flat = theta.flatten();
        trial_flat.segment(off, d) = boxes[i].project(block + lambda * step);
        const Theta trial = theta.with_flat(trial_flat);
        const Eigen::VectorXd g_trial = player.gradient(trial);
        const Eigen::VectorXd tb = trial.block(i);
        const double res_trial = (tb - boxes[i].project(tb - g_trial)).norm();
        if (res_trial < res || (tb - block).norm() == 0.0) {
          theta = trial;
          g = g_trial;
          accepted = true;
          break;
        }
        lambda *= 0.5;
      }
      if (!accepted) {
        throw SolverError("inner Newton stalled for player " + std::to_string(i),
                          theta.flatten(), res);
      }
    } else {
      // backtracking projected gradient descent on the objective value
      const double f = player.value(theta);
      double step = 1.0;
      bool accepted = false;
      for (int attempt = 0; attempt < 60; ++attempt) {
        Eigen::VectorXd trial_flat = theta.flatten();
        trial_flat.segment(off, d) = boxes[i].project(block - step * g);
        const Theta trial = theta.with_flat(trial_flat);
        const Eigen::VectorXd move = trial.block(i).eval() - block;
        if (move.norm() == 0.0) {
          theta = trial;
          accepted = true;
          break;
        }
        // Armijo: move ~ -step*g, so move.dot(g) < 0 enforces sufficient decrease
        if (player.value(trial) <= f + 1e-4 * move.dot(g)) {
          theta = trial;
          g = player.gradient(theta);
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) {
        throw SolverError("line search stalled for player " + std::to_string(i),
                          theta.flatten(), res);
      }
    }
  }
  const Eigen::VectorXd block = theta.block(i);
  throw SolverError("inner iteration cap reached for player " + std::to_string(i),
                    theta.flatten(), (block - boxes[i].project(block - g)).norm());
}

}  // namespace

Theta solve_coupled_foc(const std::vector<PlayerObjective>& players,
                        const std::vector<ParamBox>& boxes, const Theta& init,
                        const SolveOptions& opts, SolveDiagnostics* diagnostics) {
  const int m = static_cast<int>(players.size());
  if (m == 0 || static_cast<int>(boxes.size()) != m || init.players() != m) {
    throw std::invalid_argument("solve_coupled_foc: player/box/theta shape mismatch");
  }
  if (!(opts.tol > 0.0) || opts.max_inner_iterations < 1 || opts.max_sweeps < 1) {
    throw std::invalid_argument("solve_coupled_foc: tol must be > 0 and iteration caps >= 1");
  }
  Theta theta = project_onto(init, boxes);
  const double inner_tol = 0.3 * opts.tol / std::sqrt(static_cast<double>(m));

  double proj_res = 0.0;
  int sweep = 0;
  for (; sweep < opts.max_sweeps; ++sweep) {
    if (opts.mode == SolveOptions::Mode::kSimultaneous && m > 1) {
      const Theta base = theta;
      Eigen::VectorXd next = base.flatten();
      for (int i = 0; i < m; ++i) {
        const Theta solved = solve_single_block(players, boxes, base, i, inner_tol, opts);
        next.segment(base.block_offset(i), base.block_dim(i)) = solved.block(i);
      }
      theta = base.with_flat(next);
    } else {
      for (int i = 0; i < m; ++i) {
        theta = solve_single_block(players, boxes, theta, i, inner_tol, opts);
      }
    }
    proj_res = projected_residual(theta, stacked_gradient(players, theta), boxes);
    if (proj_res <= opts.tol) break;
  }
  const Eigen::VectorXd g = stacked_gradient(players, theta);
  const double plain_res = g.norm();
  if (proj_res > opts.tol) {
    throw SolverError("best-response sweeps did not converge (residual " +
                          std::to_string(proj_res) + ")",
                      theta.flatten(), plain_res);
  }
  if (diagnostics != nullptr) {
    diagnostics->sweeps = sweep + 1;
    diagnostics->residual_norm = plain_res;
    diagnostics->boundary_active = plain_res > opts.tol;
  }
  return theta;
}

Theta solve_empirical_foc(const GameSpec& game, const SampleSet& samples, const Theta& init,
                          const SolveOptions& opts, SolveDiagnostics* diagnostics) {
  if (samples.size() < 1) throw std::invalid_argument("solve_empirical_foc: empty sample set");
  if (init.block_dims() != game.theta_dims) {
    throw std::invalid_argument("solve_empirical_foc: theta shape does not match game");
  }
  if (static_cast<int>(samples.z_dims.size()) != game.player_count()) {
    throw std::invalid_argument("solve_empirical_foc: sample partition does not match game");
  }
  const int n = samples.size();
  std::vector<PlayerObjective> objectives(game.player_count());
  for (int i = 0; i < game.player_count(); ++i) {
    const PlayerLoss& p = game.players[i];
    const auto block = samples.player_block(i);
    objectives[i].gradient = [&p, block, n](const Theta& theta) {
      Eigen::VectorXd acc = p.gradient(theta, block.row(0));
      for (int k = 1; k < n; ++k) acc += p.gradient(theta, block.row(k));
      return Eigen::VectorXd(acc / n);
    };
    if (p.loss) {
      objectives[i].value = [&p, block, n](const Theta& theta) {
        double acc = 0.0;
        for (int k = 0; k < n; ++k) acc += p.loss(theta, block.row(k));
        return acc / n;
      };
    }
    if (p.theta_jacobian) {
      const int off_i = init.block_offset(i);
      const int d_i = init.block_dim(i);
      objectives[i].hessian = [&p, block, n, off_i, d_i](const Theta& theta) {
        Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(d_i, d_i);
        for (int k = 0; k < n; ++k) {
          acc += p.theta_jacobian(theta, block.row(k)).block(0, off_i, d_i, d_i);
        }
        return Eigen::MatrixXd(acc / n);
      };
    }
  }
  const Theta result = solve_coupled_foc(objectives, game.boxes, init, opts, diagnostics);
  if (opts.check_init_invariance) {
    Eigen::VectorXd center(init.dim());
    for (int i = 0; i < init.players(); ++i) {
      const auto& box = game.boxes[i];
      for (int j = 0; j < box.dim(); ++j) {
        const double lo = std::isfinite(box.lower[j]) ? box.lower[j] : -1.0;
        const double hi = std::isfinite(box.upper[j]) ? box.upper[j] : 1.0;
        center[init.block_offset(i) + j] = 0.5 * (lo + hi);
      }
    }
    const Theta alt =
        solve_coupled_foc(objectives, game.boxes, init.with_flat(center), opts, nullptr);
    if ((alt.flatten() - result.flatten()).norm() > 2.0 * opts.tol) {
      throw SolverError("solution depends on initialization (non-convex input?)",
                        result.flatten(),
                        (alt.flatten() - result.flatten()).norm());
    }
  }
  return result;
}

FixedPointResult fixed_point_iterate(const std::function<Theta(const Theta&)>& map_fn,
                                     const Theta& theta0, double tol, int max_iter) {
  if (tol <= 0.0) throw std::invalid_argument("fixed_point_iterate: tol must be positive");
  FixedPointResult out;
  out.trace.push_back(theta0.flatten());
  Theta theta = theta0;
  double prev_delta = -1.0;
  for (int k = 0; k < max_iter; ++k) {
    const Theta next = map_fn(theta);
    out.trace.push_back(next.flatten());
    const double delta = (next.flatten() - theta.flatten()).norm();
    if (prev_delta > 1e-300) {
      out.contraction_ratio = std::max(out.contraction_ratio, delta / prev_delta);
    }
    prev_delta = delta;
    theta = next;
    out.iterations = k + 1;
    if (delta <= tol) {
      out.value = theta;
      return out;
    }
  }
  SolverError err("fixed_point_iterate: max_iter reached", theta.flatten(), prev_delta);
  err.trace = out.trace;
  throw err;
}

double contraction_coefficient(const GameSpec& game, const DistributionMap& map) {
  if (!game.alpha.has_value() ||
      static_cast<int>(game.beta_smoothness.size()) != game.player_count()) {
    throw std::invalid_argument("contraction_coefficient: missing alpha/beta metadata");
  }
  const double alpha = *game.alpha;
  if (alpha <= 0.0) throw std::invalid_argument("contraction_coefficient: alpha must be > 0");
  double acc = 0.0;
  for (int i = 0; i < game.player_count(); ++i) {
    const double term = game.beta_smoothness[i] * map.sensitivity(i) / alpha;
    acc += term * term;
  }
  return std::sqrt(acc);
}

std::optional<bool> compatibility(const GameSpec& game, const DistributionMap& map) {
  if (!game.alpha.has_value() ||
      static_cast<int>(game.beta_smoothness.size()) != game.player_count()) {
    return std::nullopt;
  }
  return contraction_coefficient(game, map) < 1.0;
}

}  // namespace perfinf
