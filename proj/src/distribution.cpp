#include "perfinf/distribution.hpp"

#include <cmath>
#include <stdexcept>

namespace perfinf {

int SampleSet::block_offset(int player) const {
  int at = 0;
  for (int i = 0; i < player; ++i) at += z_dims[i];
  return at;
}

Eigen::Block<const Eigen::MatrixXd> SampleSet::player_block(int player) const {
  return z.block(0, block_offset(player), z.rows(), z_dims[player]);
}

double DistributionMap::log_density(const Theta&, const Eigen::RowVectorXd&) const {
  throw std::logic_error("DistributionMap: density not available for this map");
}

Eigen::VectorXd DistributionMap::theta_score(const Theta&, const Eigen::RowVectorXd&) const {
  throw std::logic_error("DistributionMap: theta score not available for this map");
}

SampleSet draw_samples(const DistributionMap& map, const Theta& theta, int n, RngStream& rng) {
  if (n < 1) throw std::invalid_argument("draw_samples: n must be >= 1");
  const std::vector<int> z_dims = map.z_block_dims(theta.block_dims());
  int total = 0;
  for (int d : z_dims) total += d;
  if (total != map.total_z_dim()) {
    throw std::invalid_argument("draw_samples: theta dimensions do not match map");
  }
  SampleSet out;
  out.theta = theta;
  out.z_dims = z_dims;
  out.z.resize(n, total);
  out.stream_id = rng.next_u64();
  int col = 0;
  for (int i = 0; i < static_cast<int>(z_dims.size()); ++i) {
    RngStream player_stream = rng.substream({out.stream_id, static_cast<std::uint64_t>(i)});
    out.z.block(0, col, n, z_dims[i]) = map.sample_block(theta, i, n, player_stream);
    col += z_dims[i];
  }
  return out;
}

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;

class GaussianLocationMap final : public DistributionMap {
 public:
  GaussianLocationMap(double epsilon, Eigen::VectorXd variance_diag)
      : epsilon_(epsilon), variance_(std::move(variance_diag)) {
    if (epsilon_ < 0.0) throw std::invalid_argument("gaussian_location: epsilon must be >= 0");
    if (variance_.size() < 1 || (variance_.array() <= 0.0).any()) {
      throw std::invalid_argument("gaussian_location: variances must be positive");
    }
    sd_ = variance_.cwiseSqrt();
  }

  int total_z_dim() const override { return static_cast<int>(variance_.size()); }

  Eigen::MatrixXd sample_block(const Theta& theta, int player, int n,
                               RngStream& rng) const override {
    const int off = theta.block_offset(player);
    const int d = theta.block_dim(player);
    Eigen::MatrixXd out(n, d);
    for (int k = 0; k < n; ++k) {
      for (int j = 0; j < d; ++j) {
        out(k, j) = epsilon_ * theta.flatten()[off + j] + sd_[off + j] * rng.normal();
      }
    }
    return out;
  }

  bool has_density() const override { return true; }

  double log_density(const Theta& theta, const Eigen::RowVectorXd& z) const override {
    const Eigen::VectorXd resid = z.transpose() - epsilon_ * theta.flatten();
    double acc = 0.0;
    for (int j = 0; j < resid.size(); ++j) {
      acc += -0.5 * (kLogTwoPi + std::log(variance_[j])) -
             0.5 * resid[j] * resid[j] / variance_[j];
    }
    return acc;
  }

  Eigen::VectorXd theta_score(const Theta& theta, const Eigen::RowVectorXd& z) const override {
    // grad_theta log p = eps * Sigma^-1 (z - eps*theta)
    return epsilon_ * (z.transpose() - epsilon_ * theta.flatten()).cwiseQuotient(variance_);
  }

  double sensitivity(int) const override { return epsilon_; }

 private:
  double epsilon_;
  Eigen::VectorXd variance_;
  Eigen::VectorXd sd_;
};

class LocationFamilyMap final : public DistributionMap {
 public:
  LocationFamilyMap(Eigen::VectorXd b, double beta1, double beta2, double epsilon_mis,
                    double sigma)
      : b_(std::move(b)), beta1_(beta1), beta2_(beta2), eps_mis_(epsilon_mis), sigma_(sigma) {
    if (sigma_ <= 0.0) throw std::invalid_argument("location_family: sigma must be positive");
    if (b_.size() < 1) throw std::invalid_argument("location_family: b must be non-empty");
  }

  int total_z_dim() const override { return static_cast<int>(b_.size()); }

  Eigen::VectorXd mean(const Theta& theta) const {
    const Eigen::VectorXd& t = theta.flatten();
    return b_ + beta1_ * t + eps_mis_ * beta2_ * t.cwiseProduct(t);
  }

  Eigen::MatrixXd sample_block(const Theta& theta, int player, int n,
                               RngStream& rng) const override {
    const int off = theta.block_offset(player);
    const int d = theta.block_dim(player);
    const Eigen::VectorXd mu = mean(theta);
    Eigen::MatrixXd out(n, d);
    for (int k = 0; k < n; ++k) {
      for (int j = 0; j < d; ++j) {
        out(k, j) = mu[off + j] + sigma_ * rng.normal();
      }
    }
    return out;
  }

  bool has_density() const override { return true; }

  double log_density(const Theta& theta, const Eigen::RowVectorXd& z) const override {
    const Eigen::VectorXd resid = z.transpose() - mean(theta);
    const double var = sigma_ * sigma_;
    double acc = 0.0;
    for (int j = 0; j < resid.size(); ++j) {
      acc += -0.5 * (kLogTwoPi + std::log(var)) - 0.5 * resid[j] * resid[j] / var;
    }
    return acc;
  }

  Eigen::VectorXd theta_score(const Theta& theta, const Eigen::RowVectorXd& z) const override {
    // mean_j depends on theta_j only: d mean_j / d theta_j = beta1 + 2*eps*beta2*theta_j
    const Eigen::VectorXd& t = theta.flatten();
    const Eigen::VectorXd resid = z.transpose() - mean(theta);
    const Eigen::VectorXd slope =
        Eigen::VectorXd::Constant(t.size(), beta1_) + 2.0 * eps_mis_ * beta2_ * t;
    return slope.cwiseProduct(resid) / (sigma_ * sigma_);
  }

  double sensitivity(int) const override {
    // declared over the unit box |theta| <= 1
    return std::abs(beta1_) + 2.0 * std::abs(eps_mis_ * beta2_);
  }

 private:
  Eigen::VectorXd b_;
  double beta1_, beta2_, eps_mis_, sigma_;
};

class UniformThetaSampler final : public ThetaSampler {
 public:
  explicit UniformThetaSampler(std::vector<ParamBox> boxes) : boxes_(std::move(boxes)) {
    for (const auto& box : boxes_) {
      if (!box.lower.allFinite() || !box.upper.allFinite()) {
        throw std::invalid_argument("uniform_theta_sampler: boxes must be bounded");
      }
    }
  }

  Theta sample(RngStream& rng) const override {
    std::vector<Eigen::VectorXd> blocks;
    blocks.reserve(boxes_.size());
    for (const auto& box : boxes_) {
      Eigen::VectorXd v(box.dim());
      for (int j = 0; j < box.dim(); ++j) v[j] = rng.uniform(box.lower[j], box.upper[j]);
      blocks.push_back(std::move(v));
    }
    return Theta(std::move(blocks));
  }

  std::vector<int> block_dims() const override {
    std::vector<int> dims;
    dims.reserve(boxes_.size());
    for (const auto& box : boxes_) dims.push_back(box.dim());
    return dims;
  }

 private:
  std::vector<ParamBox> boxes_;
};

}  // namespace

std::shared_ptr<DistributionMap> make_gaussian_location(double epsilon,
                                                        const Eigen::VectorXd& sigma_diag) {
  return std::make_shared<GaussianLocationMap>(epsilon, sigma_diag);
}

std::shared_ptr<DistributionMap> make_location_family(const Eigen::VectorXd& b, double beta1,
                                                      double beta2, double epsilon_mis,
                                                      double sigma) {
  return std::make_shared<LocationFamilyMap>(b, beta1, beta2, epsilon_mis, sigma);
}

std::shared_ptr<DistributionMap> make_distribution_map(const std::string& family,
                                                       const std::vector<double>& params) {
  if (family == "gaussian_location") {
    if (params.size() < 2) {
      throw std::invalid_argument("gaussian_location needs [epsilon, var_1, ..., var_d]");
    }
    const Eigen::VectorXd var = Eigen::Map<const Eigen::VectorXd>(
        params.data() + 1, static_cast<int>(params.size()) - 1);
    return make_gaussian_location(params[0], var);
  }
  if (family == "location_family") {
    if (params.size() < 5) {
      throw std::invalid_argument(
          "location_family needs [beta1, beta2, eps_mis, sigma, b_1, ..., b_d]");
    }
    const Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(
        params.data() + 4, static_cast<int>(params.size()) - 4);
    return make_location_family(b, params[0], params[1], params[2], params[3]);
  }
  throw std::invalid_argument("unknown distribution family: " + family);
}

std::shared_ptr<ThetaSampler> make_uniform_theta_sampler(std::vector<ParamBox> boxes) {
  return std::make_shared<UniformThetaSampler>(std::move(boxes));
}

}  // namespace perfinf
