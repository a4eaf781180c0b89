#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "perfinf/rng.hpp"
#include "perfinf/theta.hpp"

namespace perfinf {

/// A batch of i.i.d. draws Z = (Z^1, ..., Z^m) generated under one theta.
struct SampleSet {
  Eigen::MatrixXd z;          // n x total z dimension
  std::vector<int> z_dims;    // per-player column partition
  Theta theta;                // generating parameter
  std::uint64_t stream_id = 0;

  int size() const { return static_cast<int>(z.rows()); }
  int total_dim() const { return static_cast<int>(z.cols()); }
  int block_offset(int player) const;
  /// Columns of player i.
  Eigen::Block<const Eigen::MatrixXd> player_block(int player) const;
};

/// Parameter-indexed data distribution D(theta) = D_1(theta) x ... x D_m(theta).
///
/// Per-player marginals are sampled independently. The z-block partition
/// follows the theta blocks for the built-in families. Densities and scores
/// are optional: the true map in an experiment usually has none declared.
class DistributionMap {
 public:
  virtual ~DistributionMap() = default;

  virtual int total_z_dim() const = 0;
  virtual std::vector<int> z_block_dims(const std::vector<int>& theta_dims) const {
    return theta_dims;
  }

  /// n draws of player i's marginal under D_i(theta), one row per draw.
  virtual Eigen::MatrixXd sample_block(const Theta& theta, int player, int n,
                                       RngStream& rng) const = 0;

  virtual bool has_density() const { return false; }
  /// log p(theta, z) of the full product density, z a full row.
  virtual double log_density(const Theta& theta, const Eigen::RowVectorXd& z) const;
  /// grad_theta log p(theta, z), full theta dimension.
  virtual Eigen::VectorXd theta_score(const Theta& theta, const Eigen::RowVectorXd& z) const;

  /// Declared sensitivity of D_i(theta) in theta (metadata, not estimated).
  virtual double sensitivity(int player) const = 0;
};

/// Draws n joint rows; players use independent substreams keyed off `rng`.
/// Deterministic given the stream: the same stream state yields the same set.
SampleSet draw_samples(const DistributionMap& map, const Theta& theta, int n, RngStream& rng);

/// D(theta) = N(epsilon * theta, diag(sigma_diag)).
/// sigma_diag holds the per-coordinate variances.
std::shared_ptr<DistributionMap> make_gaussian_location(double epsilon,
                                                        const Eigen::VectorXd& sigma_diag);

/// Z = b + beta1 * theta + epsilon_mis * beta2 * theta^2 + N(0, sigma^2 I),
/// theta^2 taken coordinate-wise. epsilon_mis = 0 is the pure linear model.
std::shared_ptr<DistributionMap> make_location_family(const Eigen::VectorXd& b, double beta1,
                                                      double beta2, double epsilon_mis,
                                                      double sigma);

/// Name-addressable construction for config-driven runs.
///   "gaussian_location": params = [epsilon, var_1, ..., var_d]
///   "location_family":   params = [beta1, beta2, eps_mis, sigma, b_1, ..., b_d]
/// Unknown names or bad parameter counts raise invalid_argument.
std::shared_ptr<DistributionMap> make_distribution_map(const std::string& family,
                                                       const std::vector<double>& params);

/// Design distribution D_theta for paired-data generation.
class ThetaSampler {
 public:
  virtual ~ThetaSampler() = default;
  virtual Theta sample(RngStream& rng) const = 0;
  virtual std::vector<int> block_dims() const = 0;
};

/// Uniform draws over per-player boxes.
std::shared_ptr<ThetaSampler> make_uniform_theta_sampler(std::vector<ParamBox> boxes);

}  // namespace perfinf
