#pragma once

#include <Eigen/Dense>
#include <array>
#include <memory>
#include <vector>

#include "perfinf/atlas.hpp"
#include "perfinf/distribution.hpp"
#include "perfinf/game.hpp"
#include "perfinf/solvers.hpp"

namespace perfinf {

/// Paired draws (theta_k, Z_k) with theta_k from a user-specified design
/// distribution and Z_k from the map at theta_k. The generating map doubles as
/// the conditional resampler Z | theta needed by the covariance estimator.
struct PairedData {
  std::vector<Theta> thetas;
  Eigen::MatrixXd z;        // N x total z dim, per-player column partition
  std::vector<int> z_dims;
  std::shared_ptr<const DistributionMap> conditional_resampler;
  std::shared_ptr<const ThetaSampler> design;

  int size() const { return static_cast<int>(z.rows()); }
  int player_count() const { return static_cast<int>(z_dims.size()); }
  int z_block_offset(int player) const;
};

PairedData draw_paired_data(std::shared_ptr<const DistributionMap> map,
                            std::shared_ptr<const ThetaSampler> design, int n,
                            RngStream& rng);

/// Takes rows `idx` of `data` (fold extraction).
PairedData subset_pairs(const PairedData& data, const std::vector<int>& idx);

struct RegressorSpec {
  int degree = 3;
  double ridge = 1e-8;
};

/// Per-coordinate polynomial least squares from theta to a gradient vector.
/// The basis holds all monomials of total degree <= degree; the degree drops
/// automatically (with a flag) when a fold is smaller than the basis.
class PolynomialRegressor {
 public:
  PolynomialRegressor() = default;
  static PolynomialRegressor fit(const std::vector<Theta>& thetas, const Eigen::MatrixXd& targets,
                                 const RegressorSpec& spec);

  Eigen::VectorXd predict(const Theta& theta) const;
  /// Row-per-theta predictions.
  Eigen::MatrixXd predict_rows(const std::vector<Theta>& thetas) const;

  int output_dim() const { return static_cast<int>(coef_.cols()); }
  int degree_used() const { return degree_used_; }
  bool degree_reduced() const { return degree_reduced_; }

 private:
  Eigen::VectorXd features(const Eigen::VectorXd& flat) const;

  std::vector<std::vector<int>> exponents_;
  Eigen::MatrixXd coef_;  // basis x output
  int degree_used_ = 0;
  bool degree_reduced_ = false;
};

/// Plain per-player ERM of the atlas fitting loss on one fold (Newton).
Eigen::VectorXd erm_beta(const PairedData& fold, const Atlas& atlas);

/// Regressors s_hat_i(theta) for E[grad_beta r_i | theta], one per player.
std::vector<PolynomialRegressor> fit_conditional_gradient(const PairedData& fold,
                                                          const Atlas& atlas,
                                                          const Eigen::VectorXd& beta_tilde,
                                                          const RegressorSpec& spec);

/// De-correlation matrices M_hat_i = Cov(grad_beta r_i, s_hat_i) Cov(s_hat_i)^+,
/// one per player; `ranks`, when given, receives Cov(s_hat) numerical ranks.
std::vector<Eigen::MatrixXd> decorrelation_matrices(
    const PairedData& fold, const Atlas& atlas, const Eigen::VectorXd& beta_tilde,
    const std::vector<PolynomialRegressor>& s_hat, std::vector<int>* ranks = nullptr);

/// Minimizer of the recalibrated fold objective: fold-mean fitting loss plus
/// the de-correlated Monte Carlo correction, weighted by the total sample
/// count `n_total` (not the fold size).
Eigen::VectorXd recalibrated_fold_beta(const PairedData& fold,
                                       const std::vector<Theta>& mc_thetas, const Atlas& atlas,
                                       const std::vector<Eigen::MatrixXd>& m_hats,
                                       const std::vector<PolynomialRegressor>& s_hats,
                                       int n_total);

struct RecalibratedFit {
  Eigen::VectorXd beta;                          // Step-7 weighted average
  std::array<Eigen::VectorXd, 3> fold_betas;     // per rotation
  std::array<Eigen::VectorXd, 3> initial_betas;  // initial ERM fits per rotation
  std::array<std::vector<PolynomialRegressor>, 3> regressors;
  std::array<std::vector<Eigen::MatrixXd>, 3> decorrelation;
  std::array<int, 3> fold_sizes{};
  int mc_theta_count = 0;
  bool mc_count_warning = false;  // mc_theta_count < 10 N
};

/// Three-fold cross-fitted recalibrated estimation of the atlas parameter.
/// Folds are a deterministic permutation of the pairs; the Monte Carlo theta
/// draws are shared across the three rotations.
RecalibratedFit recalibrated_beta(const PairedData& data, const Atlas& atlas,
                                  int mc_theta_count, const RegressorSpec& spec,
                                  RngStream& rng);

struct BetaCovarianceDiagnostics {
  double ridge_used = 0.0;
  double psd_clip_magnitude = 0.0;
  /// Richardson-extrapolated variant removing the O(1/M) inner-average bias.
  Eigen::MatrixXd sigma_extrapolated;
};

/// Recalibrated-estimator covariance: per player H^-1 (V_a - c V_b) H^-1 with
/// V_b the covariance of within-theta averages over `inner_mc` fresh draws of
/// Z | theta from the data's conditional resampler; assembled block-diagonally.
/// `mc_theta_count` (the N_tilde actually used by the fit) sets the
/// finite-ratio factor c = N_tilde / (N_tilde + N); 0 means the N/N_tilde -> 0
/// limit, c = 1.
Eigen::MatrixXd beta_covariance(const PairedData& data, const Atlas& atlas,
                                const Eigen::VectorXd& beta_hat, int inner_mc, RngStream& rng,
                                int mc_theta_count = 0,
                                BetaCovarianceDiagnostics* diagnostics = nullptr);

/// ERM-estimator covariance: per player H^-1 V_a H^-1, block-diagonal.
Eigen::MatrixXd erm_beta_covariance(const PairedData& data, const Atlas& atlas,
                                    const Eigen::VectorXd& beta_hat,
                                    double* ridge_used = nullptr);

/// Fixed proposal distribution q = q_1 x ... x q_m for importance sampling.
class Proposal {
 public:
  virtual ~Proposal() = default;
  virtual int player_count() const = 0;
  virtual int z_dim(int player) const = 0;
  virtual Eigen::MatrixXd sample(int player, int n, RngStream& rng) const = 0;
  virtual double log_density(int player, const Eigen::RowVectorXd& z_i) const = 0;
  virtual Eigen::VectorXd log_density_rows(int player, const Eigen::MatrixXd& z) const;
};

std::shared_ptr<Proposal> make_gaussian_proposal(std::vector<Eigen::VectorXd> means,
                                                 std::vector<Eigen::VectorXd> sds);

/// Gaussian proposal centered at the atlas mean at theta = 0 with 3x the atlas
/// standard deviation; covers the support of the built-in families.
std::shared_ptr<Proposal> make_default_proposal(const Atlas& atlas,
                                                const Eigen::VectorXd& beta,
                                                const Theta& shape_hint);

struct PluginOptimum {
  Theta theta;
  double max_weight = 0.0;
  double min_effective_sample_size = 0.0;  // min over players of (sum w)^2 / sum w^2
  long clipped_weights = 0;
  SolveDiagnostics solve;
};

/// Importance-sampling plug-in optimum: solves the weighted empirical
/// first-order condition (1/n) sum_k grad_theta [w_k(theta) loss(theta, Z_k)]
/// = 0 with w_k = p_beta(theta, Z_k) / q(Z_k), Z_k ~ q. The theta dependence
/// of the weights is part of the gradient. Weights are clipped at 1e8.
PluginOptimum plugin_optimum(const Atlas& atlas, const Eigen::VectorXd& beta_hat,
                             const GameSpec& game, const Proposal& proposal, int n,
                             RngStream& rng, const SolveOptions& opts = {});

/// Monte Carlo estimate (1/n) sum w_k loss(theta, Z_k) of the plug-in risk at
/// one theta, summed over players. Diagnostic companion to plugin_optimum.
double importance_weighted_risk(const Atlas& atlas, const Eigen::VectorXd& beta,
                                const GameSpec& game, const Proposal& proposal,
                                const Theta& theta, int n, RngStream& rng);

/// d(sol)/d(beta) at (theta_hat, beta_hat): -J1^-1 J2 with J1, J2 the Monte
/// Carlo mean derivatives of the weighted gradient in theta and beta under the
/// proposal (central differences on common draws).
Eigen::MatrixXd plugin_jacobian(const Atlas& atlas, const Eigen::VectorXd& beta_hat,
                                const Theta& theta_hat, const GameSpec& game,
                                const Proposal& proposal, int n, RngStream& rng,
                                double* ridge_used = nullptr);

/// J Sigma_beta J^T, symmetrized.
Eigen::MatrixXd optimum_covariance(const Eigen::MatrixXd& jac,
                                   const Eigen::MatrixXd& sigma_beta);

/// sum_i 8 M_i eta_i / lambda_i: diagnostic bound on the squared distance
/// between the true and plug-in optima (all inputs user-supplied).
double error_gap_bound(const std::vector<double>& loss_bounds,
                       const std::vector<double>& misspec,
                       const std::vector<double>& convexity);

enum class BetaMethod { kErm, kRecalibrated };

struct PluginInferenceOptions {
  int mc_theta_count = 50'000;  // N_tilde
  int n_is = 100'000;           // importance-sample count
  int inner_mc = 100;           // M for V_b
  RegressorSpec regressor;
  SolveOptions solver;
};

/// Full per-replication pipeline: fit beta (by `method`), estimate its
/// covariance, solve the plug-in optimum, and propagate the covariance
/// through the solution-map Jacobian.
struct PluginInference {
  Eigen::VectorXd beta_hat;
  Eigen::MatrixXd sigma_beta;
  PluginOptimum optimum;
  Eigen::MatrixXd jac_sol_beta;
  Eigen::MatrixXd sigma_theta;
};

PluginInference run_plugin_inference(const PairedData& data, const Atlas& atlas,
                                     const GameSpec& game, const Proposal& proposal,
                                     BetaMethod method, const PluginInferenceOptions& opts,
                                     RngStream& rng);

}  // namespace perfinf
