#include "perfinf/game.hpp"

#include <cmath>
#include <stdexcept>

namespace perfinf {

GameSpec make_squared_loss_game(const std::vector<int>& dims, double scale,
                                std::vector<ParamBox> boxes) {
  GameSpec game;
  game.theta_dims = dims;
  if (boxes.empty()) {
    for (int d : dims) boxes.push_back(ParamBox::unbounded(d));
  }
  if (boxes.size() != dims.size()) {
    throw std::invalid_argument("make_squared_loss_game: box count != player count");
  }
  game.boxes = std::move(boxes);
  game.alpha = 2.0 * scale;
  game.beta_smoothness.assign(dims.size(), 2.0 * scale);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const int player = static_cast<int>(i);
    PlayerLoss p;
    p.loss = [player, scale](const Theta& theta, const Eigen::RowVectorXd& z) {
      return scale * (z.transpose() - theta.block(player)).squaredNorm();
    };
    p.gradient = [player, scale](const Theta& theta, const Eigen::RowVectorXd& z) {
      return Eigen::VectorXd(2.0 * scale * (theta.block(player) - z.transpose()));
    };
    p.theta_jacobian = [player, scale](const Theta& theta, const Eigen::RowVectorXd&) {
      Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(theta.block_dim(player), theta.dim());
      jac.block(0, theta.block_offset(player), theta.block_dim(player),
                theta.block_dim(player)) =
          2.0 * scale *
          Eigen::MatrixXd::Identity(theta.block_dim(player), theta.block_dim(player));
      return jac;
    };
    p.loss_rows = [player, scale](const Theta& theta, const Eigen::MatrixXd& z) {
      const Eigen::MatrixXd centered =
          z.rowwise() - Eigen::RowVectorXd(theta.block(player).transpose());
      return Eigen::VectorXd(scale * centered.rowwise().squaredNorm());
    };
    p.gradient_rows = [player, scale](const Theta& theta, const Eigen::MatrixXd& z) {
      return Eigen::MatrixXd(
          2.0 * scale *
          ((-z).rowwise() + Eigen::RowVectorXd(theta.block(player).transpose())));
    };
    p.mean_theta_jacobian = [player, scale](const Theta& theta, const Eigen::MatrixXd&) {
      Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(theta.block_dim(player), theta.dim());
      jac.block(0, theta.block_offset(player), theta.block_dim(player),
                theta.block_dim(player)) =
          2.0 * scale *
          Eigen::MatrixXd::Identity(theta.block_dim(player), theta.block_dim(player));
      return jac;
    };
    game.players.push_back(std::move(p));
  }
  return game;
}

Eigen::VectorXd player_loss_rows(const PlayerLoss& player, const Theta& theta,
                                 const Eigen::MatrixXd& z_block) {
  if (player.loss_rows) return player.loss_rows(theta, z_block);
  const int n = static_cast<int>(z_block.rows());
  Eigen::VectorXd out(n);
  for (int k = 0; k < n; ++k) out[k] = player.loss(theta, z_block.row(k));
  return out;
}

Eigen::MatrixXd player_gradient_rows(const PlayerLoss& player, const Theta& theta,
                                     const Eigen::MatrixXd& z_block) {
  if (player.gradient_rows) return player.gradient_rows(theta, z_block);
  const int n = static_cast<int>(z_block.rows());
  Eigen::VectorXd first = player.gradient(theta, z_block.row(0));
  Eigen::MatrixXd out(n, first.size());
  out.row(0) = first;
  for (int k = 1; k < n; ++k) out.row(k) = player.gradient(theta, z_block.row(k));
  return out;
}

Eigen::MatrixXd player_mean_theta_jacobian(const PlayerLoss& player, const Theta& theta,
                                           const Eigen::MatrixXd& z_block) {
  if (player.mean_theta_jacobian) return player.mean_theta_jacobian(theta, z_block);
  const int n = static_cast<int>(z_block.rows());
  if (player.theta_jacobian) {
    Eigen::MatrixXd acc = player.theta_jacobian(theta, z_block.row(0));
    for (int k = 1; k < n; ++k) acc += player.theta_jacobian(theta, z_block.row(k));
    return Eigen::MatrixXd(acc / n);
  }
  // central differences of the mean block gradient over the full theta
  const double h = 1e-5 * (1.0 + theta.flatten().norm());
  const int d = theta.dim();
  const Eigen::MatrixXd probe = player_gradient_rows(player, theta, z_block);
  Eigen::MatrixXd jac(probe.cols(), d);
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd up = theta.flatten();
    Eigen::VectorXd dn = theta.flatten();
    up[j] += h;
    dn[j] -= h;
    const Eigen::RowVectorXd gu =
        player_gradient_rows(player, theta.with_flat(up), z_block).colwise().mean();
    const Eigen::RowVectorXd gd =
        player_gradient_rows(player, theta.with_flat(dn), z_block).colwise().mean();
    jac.col(j) = (gu - gd).transpose() / (2.0 * h);
  }
  return jac;
}

double max_gradient_fd_error(const GameSpec& game, const Theta& theta_probe,
                             const Eigen::RowVectorXd& z_probe_full,
                             const std::vector<int>& z_dims) {
  double worst = 0.0;
  int z_off = 0;
  for (int i = 0; i < game.player_count(); ++i) {
    const Eigen::RowVectorXd z_i = z_probe_full.segment(z_off, z_dims[i]);
    z_off += z_dims[i];
    const Eigen::VectorXd grad = game.players[i].gradient(theta_probe, z_i);
    const int off = theta_probe.block_offset(i);
    for (int j = 0; j < theta_probe.block_dim(i); ++j) {
      const double h = 1e-6 * (1.0 + std::abs(theta_probe.flatten()[off + j]));
      Eigen::VectorXd up = theta_probe.flatten();
      Eigen::VectorXd dn = theta_probe.flatten();
      up[off + j] += h;
      dn[off + j] -= h;
      const double fd = (game.players[i].loss(theta_probe.with_flat(up), z_i) -
                         game.players[i].loss(theta_probe.with_flat(dn), z_i)) /
                        (2.0 * h);
      worst = std::max(worst, std::abs(fd - grad[j]));
    }
  }
  return worst;
}

}  // namespace perfinf
