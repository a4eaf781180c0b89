#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "perfinf/rng.hpp"
#include "perfinf/theta.hpp"

namespace perfinf {

/// Parametric family D_beta(theta) used as a plug-in surrogate for the unknown
/// distribution map, together with the fitting loss r_i(theta, z^i; beta_i).
///
/// Unlike DistributionMap, densities and scores are mandatory here: all of the
/// plug-in machinery (importance weights, implicit-function Jacobians) needs
/// them. Players are independent; per-player beta blocks stack like Theta.
class Atlas {
 public:
  virtual ~Atlas() = default;

  virtual int total_z_dim() const = 0;
  virtual std::vector<int> z_block_dims(const std::vector<int>& theta_dims) const {
    return theta_dims;
  }
  virtual int beta_dim(int player) const = 0;

  /// Fitting loss r_i(theta, z^i; beta_i) and its analytic beta derivatives.
  virtual double fitting_loss(const Theta& theta, int player, const Eigen::RowVectorXd& z_i,
                              const Eigen::VectorXd& beta_i) const = 0;
  virtual Eigen::VectorXd fitting_loss_beta_gradient(const Theta& theta, int player,
                                                     const Eigen::RowVectorXd& z_i,
                                                     const Eigen::VectorXd& beta_i) const = 0;
  virtual Eigen::MatrixXd fitting_loss_beta_hessian(const Theta& theta, int player,
                                                    const Eigen::RowVectorXd& z_i,
                                                    const Eigen::VectorXd& beta_i) const = 0;

  /// n draws of player i's marginal under D_beta(theta).
  virtual Eigen::MatrixXd sample_block(const Theta& theta, int player,
                                       const Eigen::VectorXd& beta_i, int n,
                                       RngStream& rng) const = 0;
  /// log p_beta of player i's marginal at z_i.
  virtual double log_density_block(const Theta& theta, int player, const Eigen::RowVectorXd& z_i,
                                   const Eigen::VectorXd& beta_i) const = 0;
  /// grad_theta log p_beta of player i's marginal, full theta dimension.
  virtual Eigen::VectorXd theta_score(const Theta& theta, int player,
                                      const Eigen::RowVectorXd& z_i,
                                      const Eigen::VectorXd& beta_i) const = 0;
  /// grad_{beta_i} log p_beta of player i's marginal.
  virtual Eigen::VectorXd beta_score(const Theta& theta, int player,
                                     const Eigen::RowVectorXd& z_i,
                                     const Eigen::VectorXd& beta_i) const = 0;

  /// Marginal mean and standard deviation of D_beta(theta), used for proposals.
  virtual Eigen::VectorXd mean_block(const Theta& theta, int player,
                                     const Eigen::VectorXd& beta_i) const = 0;
  virtual Eigen::VectorXd sd_block(const Theta& theta, int player) const = 0;

  /// Batched row-wise variants over an n x dz_i block of draws at one theta.
  /// Defaults loop over rows; built-in families override with vectorized code.
  virtual Eigen::VectorXd log_density_rows(const Theta& theta, int player,
                                           const Eigen::MatrixXd& z,
                                           const Eigen::VectorXd& beta_i) const;
  /// n x theta.dim matrix of theta scores.
  virtual Eigen::MatrixXd theta_score_rows(const Theta& theta, int player,
                                           const Eigen::MatrixXd& z,
                                           const Eigen::VectorXd& beta_i) const;
  /// n x beta_dim matrix of fitting-loss beta gradients.
  virtual Eigen::MatrixXd fitting_loss_beta_gradient_rows(const Theta& theta, int player,
                                                          const Eigen::MatrixXd& z,
                                                          const Eigen::VectorXd& beta_i) const;

  /// Declared (user-supplied) misspecification eta_i and smoothness gamma_i.
  double misspecification(int) const { return eta_; }
  double smoothness(int) const { return gamma_; }
  void set_misspecification(double eta) { eta_ = eta; }
  void set_smoothness(double gamma) { gamma_ = gamma; }

 private:
  double eta_ = 0.0;
  double gamma_ = 0.0;
};

/// Offset of player i's beta block inside a stacked beta vector.
int beta_offset(const Atlas& atlas, int player);
int total_beta_dim(const Atlas& atlas, int players);
Eigen::VectorXd beta_block(const Atlas& atlas, const Eigen::VectorXd& stacked, int player);

/// Linear location atlas D_beta(theta) = b + beta * theta + N(0, diag(var)),
/// with fitting loss r(theta, Z; beta) = ||Z - beta*theta||^2 (b enters the
/// density but not the fitting loss). One scalar beta per player.
/// `sigma` is the noise standard deviation, shared across coordinates.
std::shared_ptr<Atlas> make_linear_atlas(const Eigen::VectorXd& b, double sigma);

/// Zero-intercept variant matching the Gaussian location map; `sigma_diag`
/// holds per-coordinate variances.
std::shared_ptr<Atlas> make_gaussian_atlas(const Eigen::VectorXd& sigma_diag);

/// Name-addressable construction for config-driven runs.
///   "linear_atlas":   params = [sigma, b_1, ..., b_d]
///   "gaussian_atlas": params = [var_1, ..., var_d]
std::shared_ptr<Atlas> make_atlas(const std::string& family, const std::vector<double>& params);

}  // namespace perfinf
