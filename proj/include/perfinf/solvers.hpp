#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "perfinf/distribution.hpp"
#include "perfinf/game.hpp"
#include "perfinf/theta.hpp"

namespace perfinf {

struct SolveDiagnostics {
  int sweeps = 0;
  double residual_norm = 0.0;
  /// Projection was binding at the returned point (the first-order condition
  /// holds only in the projected sense).
  bool boundary_active = false;
};

class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, Eigen::VectorXd last_iterate, double residual)
      : std::runtime_error(what),
        last_iterate(std::move(last_iterate)),
        residual_norm(residual) {}

  Eigen::VectorXd last_iterate;
  double residual_norm = 0.0;
  std::vector<Eigen::VectorXd> trace;  // filled by fixed_point_iterate
};

/// One player's averaged first-order system: mean gradient over a sample (or a
/// weighted Monte Carlo estimate), with optional objective value and Hessian.
struct PlayerObjective {
  std::function<double(const Theta&)> value;             // optional
  std::function<Eigen::VectorXd(const Theta&)> gradient;  // required, dim d_i
  std::function<Eigen::MatrixXd(const Theta&)> hessian;   // optional, d_i x d_i
};

/// Solves the coupled per-player conditions mean_gradient_i(theta) = 0 with
/// each block projected into its box. Gauss-Seidel best-response sweeps by
/// default; damped Newton inside when a Hessian is available, otherwise
/// backtracking gradient descent on the objective value.
///
/// Exit contract: projected-gradient norm <= opts.tol, else SolverError. When
/// the plain residual exceeds tol at a box boundary the result is returned
/// with diagnostics->boundary_active set.
Theta solve_coupled_foc(const std::vector<PlayerObjective>& players,
                        const std::vector<ParamBox>& boxes, const Theta& init,
                        const SolveOptions& opts, SolveDiagnostics* diagnostics = nullptr);

/// Simultaneous empirical first-order condition on one sample set:
/// per player, (1/N) sum_k G_i(theta, Z_k^i) = 0 holding the other blocks at
/// their returned values, projected into the boxes.
Theta solve_empirical_foc(const GameSpec& game, const SampleSet& samples, const Theta& init,
                          const SolveOptions& opts = {},
                          SolveDiagnostics* diagnostics = nullptr);

struct FixedPointResult {
  Theta value;
  std::vector<Eigen::VectorXd> trace;  // flattened iterates including theta0
  double contraction_ratio = 0.0;      // max over steps of ratio of step norms
  int iterations = 0;
};

/// Iterates theta <- map_fn(theta) until the step norm drops below tol.
/// Throws SolverError (with the trace) when max_iter is exceeded.
FixedPointResult fixed_point_iterate(const std::function<Theta(const Theta&)>& map_fn,
                                     const Theta& theta0, double tol, int max_iter);

/// C = sqrt(sum_i (beta_i * eps_i / alpha)^2); C < 1 certifies linear-rate
/// convergence of repeated retraining. Requires declared metadata.
double contraction_coefficient(const GameSpec& game, const DistributionMap& map);

/// C < 1 when the metadata is present, nullopt otherwise.
std::optional<bool> compatibility(const GameSpec& game, const DistributionMap& map);

}  // namespace perfinf
