#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <vector>

#include "perfinf/theta.hpp"

namespace perfinf {

/// One player's loss callbacks. `gradient` is the block gradient
/// G_i = grad_{theta^i} loss_i(theta, z^i); `theta_jacobian`, when provided,
/// is the full-row derivative dG_i/dtheta^T (d_i x d). The `_rows` variants
/// are optional batched fast paths over an n x dz_i block of draws; estimators
/// fall back to per-row loops when they are absent. Callbacks must be
/// re-entrant: solves may run concurrently.
struct PlayerLoss {
  std::function<double(const Theta&, const Eigen::RowVectorXd&)> loss;
  std::function<Eigen::VectorXd(const Theta&, const Eigen::RowVectorXd&)> gradient;
  std::function<Eigen::MatrixXd(const Theta&, const Eigen::RowVectorXd&)> theta_jacobian;

  std::function<Eigen::VectorXd(const Theta&, const Eigen::MatrixXd&)> loss_rows;
  std::function<Eigen::MatrixXd(const Theta&, const Eigen::MatrixXd&)> gradient_rows;
  /// Mean of dG_i/dtheta^T over the rows (d_i x d).
  std::function<Eigen::MatrixXd(const Theta&, const Eigen::MatrixXd&)> mean_theta_jacobian;
};

/// An m-player decision-dependent game: losses, parameter boxes, and the
/// declared regularity metadata (strong monotonicity alpha, per-player joint
/// smoothness beta_i). Metadata is never estimated.
struct GameSpec {
  std::vector<PlayerLoss> players;
  std::vector<ParamBox> boxes;
  std::vector<int> theta_dims;

  std::optional<double> alpha;
  std::vector<double> beta_smoothness;

  int player_count() const { return static_cast<int>(players.size()); }
  int total_dim() const {
    int d = 0;
    for (int di : theta_dims) d += di;
    return d;
  }
};

struct SolveOptions {
  double tol = 1e-8;
  int max_inner_iterations = 10'000;
  int max_sweeps = 500;
  double damping = 1.0;
  enum class Mode { kGaussSeidel, kSimultaneous };
  Mode mode = Mode::kGaussSeidel;
  /// Re-solve from the box center and compare (debug aid for convexity bugs).
  bool check_init_invariance = false;
};

/// Squared-error game: loss_i = scale * ||z^i - theta^i||^2 per player.
/// scale = 0.5 gives the classic 1/2 ||z - theta||^2. Batched callbacks set.
GameSpec make_squared_loss_game(const std::vector<int>& dims, double scale = 0.5,
                                std::vector<ParamBox> boxes = {});

/// Batched evaluation helpers: use the fast path when the game provides one,
/// otherwise loop over rows.
Eigen::VectorXd player_loss_rows(const PlayerLoss& player, const Theta& theta,
                                 const Eigen::MatrixXd& z_block);
Eigen::MatrixXd player_gradient_rows(const PlayerLoss& player, const Theta& theta,
                                     const Eigen::MatrixXd& z_block);
/// Mean of dG_i/dtheta^T over rows; finite differences of the gradient when no
/// jacobian callback exists (central, h = 1e-5 * (1 + |theta|)).
Eigen::MatrixXd player_mean_theta_jacobian(const PlayerLoss& player, const Theta& theta,
                                           const Eigen::MatrixXd& z_block);

/// Max gradient-vs-finite-difference error of loss_i over one probe point.
/// Used by tests to validate user-supplied callbacks.
double max_gradient_fd_error(const GameSpec& game, const Theta& theta_probe,
                             const Eigen::RowVectorXd& z_probe_full,
                             const std::vector<int>& z_dims);

}  // namespace perfinf
