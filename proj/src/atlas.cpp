#include "perfinf/atlas.hpp"

#include <cmath>
#include <stdexcept>

namespace perfinf {

int beta_offset(const Atlas& atlas, int player) {
  int at = 0;
  for (int i = 0; i < player; ++i) at += atlas.beta_dim(i);
  return at;
}

int total_beta_dim(const Atlas& atlas, int players) {
  int total = 0;
  for (int i = 0; i < players; ++i) total += atlas.beta_dim(i);
  return total;
}

Eigen::VectorXd beta_block(const Atlas& atlas, const Eigen::VectorXd& stacked, int player) {
  return stacked.segment(beta_offset(atlas, player), atlas.beta_dim(player));
}

Eigen::VectorXd Atlas::log_density_rows(const Theta& theta, int player, const Eigen::MatrixXd& z,
                                        const Eigen::VectorXd& beta_i) const {
  Eigen::VectorXd out(z.rows());
  for (int k = 0; k < z.rows(); ++k) out[k] = log_density_block(theta, player, z.row(k), beta_i);
  return out;
}

Eigen::MatrixXd Atlas::theta_score_rows(const Theta& theta, int player, const Eigen::MatrixXd& z,
                                        const Eigen::VectorXd& beta_i) const {
  Eigen::MatrixXd out(z.rows(), theta.dim());
  for (int k = 0; k < z.rows(); ++k) {
    out.row(k) = theta_score(theta, player, z.row(k), beta_i);
  }
  return out;
}

Eigen::MatrixXd Atlas::fitting_loss_beta_gradient_rows(const Theta& theta, int player,
                                                       const Eigen::MatrixXd& z,
                                                       const Eigen::VectorXd& beta_i) const {
  Eigen::MatrixXd out(z.rows(), beta_dim(player));
  for (int k = 0; k < z.rows(); ++k) {
    out.row(k) = fitting_loss_beta_gradient(theta, player, z.row(k), beta_i);
  }
  return out;
}

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;

class LinearLocationAtlas final : public Atlas {
 public:
  LinearLocationAtlas(Eigen::VectorXd b, Eigen::VectorXd variance_diag)
      : b_(std::move(b)), variance_(std::move(variance_diag)) {
    if (b_.size() != variance_.size()) {
      throw std::invalid_argument("linear_atlas: b and variance dimensions differ");
    }
    if (variance_.size() < 1 || (variance_.array() <= 0.0).any()) {
      throw std::invalid_argument("linear_atlas: variances must be positive");
    }
    sd_ = variance_.cwiseSqrt();
  }

  int total_z_dim() const override { return static_cast<int>(b_.size()); }
  int beta_dim(int) const override { return 1; }

  double fitting_loss(const Theta& theta, int player, const Eigen::RowVectorXd& z_i,
                      const Eigen::VectorXd& beta_i) const override {
    const Eigen::VectorXd resid = z_i.transpose() - beta_i[0] * theta.block(player);
    return resid.squaredNorm();
  }

  Eigen::VectorXd fitting_loss_beta_gradient(const Theta& theta, int player,
                                             const Eigen::RowVectorXd& z_i,
                                             const Eigen::VectorXd& beta_i) const override {
    const Eigen::VectorXd t = theta.block(player);
    const Eigen::VectorXd resid = z_i.transpose() - beta_i[0] * t;
    Eigen::VectorXd g(1);
    g[0] = -2.0 * t.dot(resid);
    return g;
  }

  Eigen::MatrixXd fitting_loss_beta_hessian(const Theta& theta, int player,
                                            const Eigen::RowVectorXd&,
                                            const Eigen::VectorXd&) const override {
    Eigen::MatrixXd h(1, 1);
    h(0, 0) = 2.0 * theta.block(player).squaredNorm();
    return h;
  }

  Eigen::MatrixXd sample_block(const Theta& theta, int player, const Eigen::VectorXd& beta_i,
                               int n, RngStream& rng) const override {
    const int off = theta.block_offset(player);
    const int d = theta.block_dim(player);
    Eigen::MatrixXd out(n, d);
    for (int k = 0; k < n; ++k) {
      for (int j = 0; j < d; ++j) {
        const double mu = b_[off + j] + beta_i[0] * theta.flatten()[off + j];
        out(k, j) = mu + sd_[off + j] * rng.normal();
      }
    }
    return out;
  }

  double log_density_block(const Theta& theta, int player, const Eigen::RowVectorXd& z_i,
                           const Eigen::VectorXd& beta_i) const override {
    const int off = theta.block_offset(player);
    const int d = theta.block_dim(player);
    double acc = 0.0;
    for (int j = 0; j < d; ++j) {
      const double mu = b_[off + j] + beta_i[0] * theta.flatten()[off + j];
      const double r = z_i[j] - mu;
      acc += -0.5 * (kLogTwoPi + std::log(variance_[off + j])) -
             0.5 * r * r / variance_[off + j];
    }
    return acc;
  }

  Eigen::VectorXd theta_score(const Theta& theta, int player, const Eigen::RowVectorXd& z_i,
                              const Eigen::VectorXd& beta_i) const override {
    const int off = theta.block_offset(player);
    const int d = theta.block_dim(player);
    Eigen::VectorXd score = Eigen::VectorXd::Zero(theta.dim());
    for (int j = 0; j < d; ++j) {
      const double mu = b_[off + j] + beta_i[0] * theta.flatten()[off + j];
      score[off + j] = beta_i[0] * (z_i[j] - mu) / variance_[off + j];
    }
    return score;
  }

  Eigen::VectorXd beta_score(const Theta& theta, int player, const Eigen::RowVectorXd& z_i,
                             const Eigen::VectorXd& beta_i) const override {
    const int off = theta.block_offset(player);
    const int d = theta.block_dim(player);
    double acc = 0.0;
    for (int j = 0; j < d; ++j) {
      const double mu = b_[off + j] + beta_i[0] * theta.flatten()[off + j];
      acc += theta.flatten()[off + j] * (z_i[j] - mu) / variance_[off + j];
    }
    Eigen::VectorXd s(1);
    s[0] = acc;
    return s;
  }

  Eigen::VectorXd mean_block(const Theta& theta, int player,
                             const Eigen::VectorXd& beta_i) const override {
    const int off = theta.block_offset(player);
    const int d = theta.block_dim(player);
    return b_.segment(off, d) + beta_i[0] * theta.block(player);
  }

  Eigen::VectorXd sd_block(const Theta& theta, int player) const override {
    return sd_.segment(theta.block_offset(player), theta.block_dim(player));
  }

  Eigen::VectorXd log_density_rows(const Theta& theta, int player, const Eigen::MatrixXd& z,
                                   const Eigen::VectorXd& beta_i) const override {
    const int off = theta.block_offset(player);
    const int d = theta.block_dim(player);
    const Eigen::RowVectorXd mu = mean_block(theta, player, beta_i).transpose();
    const Eigen::RowVectorXd inv_var = variance_.segment(off, d).cwiseInverse().transpose();
    double log_norm = 0.0;
    for (int j = 0; j < d; ++j) {
      log_norm += -0.5 * (kLogTwoPi + std::log(variance_[off + j]));
    }
    const Eigen::MatrixXd centered = z.rowwise() - mu;
    return (log_norm -
            0.5 * (centered.array().square().rowwise() * inv_var.array()).rowwise().sum())
        .matrix();
  }

  Eigen::MatrixXd theta_score_rows(const Theta& theta, int player, const Eigen::MatrixXd& z,
                                   const Eigen::VectorXd& beta_i) const override {
    const int off = theta.block_offset(player);
    const int d = theta.block_dim(player);
    const Eigen::RowVectorXd mu = mean_block(theta, player, beta_i).transpose();
    const Eigen::RowVectorXd inv_var = variance_.segment(off, d).cwiseInverse().transpose();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(z.rows(), theta.dim());
    out.middleCols(off, d) =
        beta_i[0] * ((z.rowwise() - mu).array().rowwise() * inv_var.array()).matrix();
    return out;
  }

  Eigen::MatrixXd fitting_loss_beta_gradient_rows(const Theta& theta, int player,
                                                  const Eigen::MatrixXd& z,
                                                  const Eigen::VectorXd& beta_i) const override {
    const Eigen::VectorXd t = theta.block(player);
    // -2 theta^T (z - beta theta) per row
    Eigen::MatrixXd out(z.rows(), 1);
    out.col(0) = -2.0 * (z * t - Eigen::VectorXd::Constant(z.rows(), beta_i[0] * t.squaredNorm()));
    return out;
  }

 private:
  Eigen::VectorXd b_;
  Eigen::VectorXd variance_;
  Eigen::VectorXd sd_;
};

}  // namespace

std::shared_ptr<Atlas> make_linear_atlas(const Eigen::VectorXd& b, double sigma) {
  if (sigma <= 0.0) throw std::invalid_argument("linear_atlas: sigma must be positive");
  return std::make_shared<LinearLocationAtlas>(
      b, Eigen::VectorXd::Constant(b.size(), sigma * sigma));
}

std::shared_ptr<Atlas> make_gaussian_atlas(const Eigen::VectorXd& sigma_diag) {
  return std::make_shared<LinearLocationAtlas>(Eigen::VectorXd::Zero(sigma_diag.size()),
                                               sigma_diag);
}

std::shared_ptr<Atlas> make_atlas(const std::string& family, const std::vector<double>& params) {
  if (family == "linear_atlas") {
    if (params.size() < 2) throw std::invalid_argument("linear_atlas needs [sigma, b_1, ..., b_d]");
    const Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(
        params.data() + 1, static_cast<int>(params.size()) - 1);
    return make_linear_atlas(b, params[0]);
  }
  if (family == "gaussian_atlas") {
    if (params.empty()) throw std::invalid_argument("gaussian_atlas needs [var_1, ..., var_d]");
    return make_gaussian_atlas(
        Eigen::Map<const Eigen::VectorXd>(params.data(), static_cast<int>(params.size())));
  }
  throw std::invalid_argument("unknown atlas family: " + family);
}

}  // namespace perfinf
