#include "perfinf/optimal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "perfinf/stats.hpp"

namespace perfinf {

namespace {

constexpr double kWeightClip = 1e8;
constexpr double kLogTwoPi = 1.8378770664093454836;

Eigen::RowVectorXd pair_z_block(const PairedData& data, int k, int player) {
  return data.z.block(k, data.z_block_offset(player), 1, data.z_dims[player]);
}

/// Newton minimization of the fold-mean fitting loss for one player, shifted
/// by a constant gradient correction (zero for plain ERM).
Eigen::VectorXd newton_fit_beta_player(const PairedData& fold, const Atlas& atlas, int player,
                                       const Eigen::VectorXd& correction) {
  const int p = atlas.beta_dim(player);
  const int n = fold.size();
  if (n < 1) throw std::invalid_argument("beta fit: empty fold");
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  for (int iter = 0; iter < 100; ++iter) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(p, p);
    for (int k = 0; k < n; ++k) {
      const Eigen::RowVectorXd z_i = pair_z_block(fold, k, player);
      g += atlas.fitting_loss_beta_gradient(fold.thetas[k], player, z_i, beta);
      h += atlas.fitting_loss_beta_hessian(fold.thetas[k], player, z_i, beta);
    }
    g /= n;
    h /= n;
    if (correction.size() > 0) g -= correction;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(h);
    if (!lu.isInvertible()) {
      throw SolverError("beta fit: singular fitting-loss Hessian (degenerate design?)", beta,
                        g.norm());
    }
    if (g.norm() <= 1e-10 * (1.0 + beta.norm())) return beta;
    beta -= lu.solve(g);
  }
  throw SolverError("beta fit: Newton did not converge", beta, 0.0);
}

void enumerate_monomials(int dim, int max_degree, std::vector<int>& current,
                         std::vector<std::vector<int>>& out) {
  if (static_cast<int>(current.size()) == dim) {
    out.push_back(current);
    return;
  }
  const int used = std::accumulate(current.begin(), current.end(), 0);
  for (int e = 0; e <= max_degree - used; ++e) {
    current.push_back(e);
    enumerate_monomials(dim, max_degree, current, out);
    current.pop_back();
  }
}

std::vector<std::vector<int>> monomial_exponents(int dim, int degree) {
  std::vector<std::vector<int>> out;
  std::vector<int> current;
  enumerate_monomials(dim, degree, current, out);
  return out;
}

}  // namespace

int PairedData::z_block_offset(int player) const {
  int at = 0;
  for (int i = 0; i < player; ++i) at += z_dims[i];
  return at;
}

PairedData draw_paired_data(std::shared_ptr<const DistributionMap> map,
                            std::shared_ptr<const ThetaSampler> design, int n,
                            RngStream& rng) {
  if (n < 1) throw std::invalid_argument("draw_paired_data: n must be >= 1");
  PairedData data;
  data.conditional_resampler = map;
  data.design = design;
  data.thetas.reserve(n);
  for (int k = 0; k < n; ++k) {
    Theta theta = design->sample(rng);
    if (k == 0) {
      data.z_dims = map->z_block_dims(theta.block_dims());
      int total = 0;
      for (int d : data.z_dims) total += d;
      data.z.resize(n, total);
    }
    int col = 0;
    for (int i = 0; i < static_cast<int>(data.z_dims.size()); ++i) {
      data.z.block(k, col, 1, data.z_dims[i]) = map->sample_block(theta, i, 1, rng);
      col += data.z_dims[i];
    }
    data.thetas.push_back(std::move(theta));
  }
  return data;
}

PairedData subset_pairs(const PairedData& data, const std::vector<int>& idx) {
  PairedData out;
  out.z_dims = data.z_dims;
  out.conditional_resampler = data.conditional_resampler;
  out.design = data.design;
  out.z.resize(static_cast<int>(idx.size()), data.z.cols());
  out.thetas.reserve(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    out.z.row(static_cast<int>(r)) = data.z.row(idx[r]);
    out.thetas.push_back(data.thetas[idx[r]]);
  }
  return out;
}

PolynomialRegressor PolynomialRegressor::fit(const std::vector<Theta>& thetas,
                                             const Eigen::MatrixXd& targets,
                                             const RegressorSpec& spec) {
  const int n = static_cast<int>(thetas.size());
  if (n < 1 || targets.rows() != n) {
    throw std::invalid_argument("PolynomialRegressor: empty or mismatched fit data");
  }
  const int dim = thetas.front().dim();
  PolynomialRegressor reg;
  int degree = std::max(0, spec.degree);
  reg.exponents_ = monomial_exponents(dim, degree);
  while (static_cast<int>(reg.exponents_.size()) > n && degree > 0) {
    --degree;
    reg.exponents_ = monomial_exponents(dim, degree);
    reg.degree_reduced_ = true;
  }
  reg.degree_used_ = degree;
  const int basis = static_cast<int>(reg.exponents_.size());
  Eigen::MatrixXd phi(n, basis);
  for (int k = 0; k < n; ++k) phi.row(k) = reg.features(thetas[k].flatten());
  const Eigen::MatrixXd gram =
      phi.transpose() * phi + spec.ridge * Eigen::MatrixXd::Identity(basis, basis);
  reg.coef_ = gram.ldlt().solve(phi.transpose() * targets);
  return reg;
}

Eigen::VectorXd PolynomialRegressor::features(const Eigen::VectorXd& flat) const {
  Eigen::VectorXd out(exponents_.size());
  for (std::size_t b = 0; b < exponents_.size(); ++b) {
    double v = 1.0;
    for (int j = 0; j < flat.size(); ++j) {
      for (int e = 0; e < exponents_[b][j]; ++e) v *= flat[j];
    }
    out[static_cast<int>(b)] = v;
  }
  return out;
}

Eigen::VectorXd PolynomialRegressor::predict(const Theta& theta) const {
  return coef_.transpose() * features(theta.flatten());
}

Eigen::MatrixXd PolynomialRegressor::predict_rows(const std::vector<Theta>& thetas) const {
  Eigen::MatrixXd out(static_cast<int>(thetas.size()), coef_.cols());
  for (std::size_t k = 0; k < thetas.size(); ++k) {
    out.row(static_cast<int>(k)) = coef_.transpose() * features(thetas[k].flatten());
  }
  return out;
}

Eigen::VectorXd erm_beta(const PairedData& fold, const Atlas& atlas) {
  const int m = fold.player_count();
  Eigen::VectorXd beta(total_beta_dim(atlas, m));
  for (int i = 0; i < m; ++i) {
    beta.segment(beta_offset(atlas, i), atlas.beta_dim(i)) =
        newton_fit_beta_player(fold, atlas, i, Eigen::VectorXd());
  }
  return beta;
}

std::vector<PolynomialRegressor> fit_conditional_gradient(const PairedData& fold,
                                                          const Atlas& atlas,
                                                          const Eigen::VectorXd& beta_tilde,
                                                          const RegressorSpec& spec) {
  const int m = fold.player_count();
  std::vector<PolynomialRegressor> out;
  out.reserve(m);
  for (int i = 0; i < m; ++i) {
    const Eigen::VectorXd beta_i = beta_block(atlas, beta_tilde, i);
    Eigen::MatrixXd targets(fold.size(), atlas.beta_dim(i));
    for (int k = 0; k < fold.size(); ++k) {
      targets.row(k) =
          atlas.fitting_loss_beta_gradient(fold.thetas[k], i, pair_z_block(fold, k, i), beta_i);
    }
    out.push_back(PolynomialRegressor::fit(fold.thetas, targets, spec));
  }
  return out;
}

std::vector<Eigen::MatrixXd> decorrelation_matrices(
    const PairedData& fold, const Atlas& atlas, const Eigen::VectorXd& beta_tilde,
    const std::vector<PolynomialRegressor>& s_hat, std::vector<int>* ranks) {
  const int m = fold.player_count();
  if (static_cast<int>(s_hat.size()) != m) {
    throw std::invalid_argument("decorrelation_matrices: one regressor per player required");
  }
  if (ranks != nullptr) ranks->assign(m, 0);
  std::vector<Eigen::MatrixXd> out;
  out.reserve(m);
  for (int i = 0; i < m; ++i) {
    const int q = s_hat[i].output_dim();
    if (fold.size() < q + 2) {
      throw std::invalid_argument("decorrelation_matrices: fold smaller than regressor output + 2");
    }
    const Eigen::VectorXd beta_i = beta_block(atlas, beta_tilde, i);
    Eigen::MatrixXd grads(fold.size(), atlas.beta_dim(i));
    for (int k = 0; k < fold.size(); ++k) {
      grads.row(k) =
          atlas.fitting_loss_beta_gradient(fold.thetas[k], i, pair_z_block(fold, k, i), beta_i);
    }
    const Eigen::MatrixXd s_rows = s_hat[i].predict_rows(fold.thetas);
    const Eigen::MatrixXd cross = sample_cross_covariance(grads, s_rows);
    int rank = 0;
    const Eigen::MatrixXd s_cov_inv = psd_pseudo_inverse(sample_covariance(s_rows), &rank);
    if (ranks != nullptr) (*ranks)[i] = rank;
    out.push_back(cross * s_cov_inv);
  }
  return out;
}

Eigen::VectorXd recalibrated_fold_beta(const PairedData& fold,
                                       const std::vector<Theta>& mc_thetas, const Atlas& atlas,
                                       const std::vector<Eigen::MatrixXd>& m_hats,
                                       const std::vector<PolynomialRegressor>& s_hats,
                                       int n_total) {
  const int m = fold.player_count();
  if (static_cast<int>(m_hats.size()) != m || static_cast<int>(s_hats.size()) != m) {
    throw std::invalid_argument("recalibrated_fold_beta: per-player M_hat and s_hat required");
  }
  const double n_tilde = static_cast<double>(mc_thetas.size());
  Eigen::VectorXd beta(total_beta_dim(atlas, m));
  for (int i = 0; i < m; ++i) {
    Eigen::VectorXd correction;
    if (!mc_thetas.empty()) {
      const double weight = n_tilde / (static_cast<double>(n_total) + n_tilde);
      const Eigen::VectorXd mean_fold_s =
          s_hats[i].predict_rows(fold.thetas).colwise().mean();
      const Eigen::VectorXd mean_mc_s = s_hats[i].predict_rows(mc_thetas).colwise().mean();
      correction = weight * (m_hats[i] * (mean_fold_s - mean_mc_s));
    }
    beta.segment(beta_offset(atlas, i), atlas.beta_dim(i)) =
        newton_fit_beta_player(fold, atlas, i, correction);
  }
  return beta;
}

RecalibratedFit recalibrated_beta(const PairedData& data, const Atlas& atlas,
                                  int mc_theta_count, const RegressorSpec& spec,
                                  RngStream& rng) {
  const int n = data.size();
  if (n < 9) throw std::invalid_argument("recalibrated_beta: need N >= 9 (three nonempty folds)");
  if (mc_theta_count < n) {
    throw std::invalid_argument("recalibrated_beta: Monte Carlo theta count must be >= N");
  }
  if (!data.design) {
    throw std::invalid_argument("recalibrated_beta: paired data has no design sampler");
  }

  RecalibratedFit fit;
  fit.mc_theta_count = mc_theta_count;
  fit.mc_count_warning = mc_theta_count < 10 * n;

  // deterministic permutation, then contiguous folds with remainders first
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(perm[i], perm[j]);
  }
  const int base = n / 3;
  const int rem = n % 3;
  std::array<std::vector<int>, 3> folds;
  int at = 0;
  for (int j = 0; j < 3; ++j) {
    const int size = base + (j < rem ? 1 : 0);
    folds[j].assign(perm.begin() + at, perm.begin() + at + size);
    at += size;
    fit.fold_sizes[j] = size;
  }

  // Monte Carlo theta draws, shared across the three rotations
  std::vector<Theta> mc_thetas;
  mc_thetas.reserve(mc_theta_count);
  for (int k = 0; k < mc_theta_count; ++k) mc_thetas.push_back(data.design->sample(rng));

  Eigen::VectorXd beta;
  for (int j = 0; j < 3; ++j) {
    try {
      const PairedData final_fold = subset_pairs(data, folds[j]);
      const PairedData regressor_fold = subset_pairs(data, folds[(j + 1) % 3]);
      const PairedData initial_fold = subset_pairs(data, folds[(j + 2) % 3]);

      fit.initial_betas[j] = erm_beta(initial_fold, atlas);
      fit.regressors[j] =
          fit_conditional_gradient(regressor_fold, atlas, fit.initial_betas[j], spec);
      fit.decorrelation[j] =
          decorrelation_matrices(final_fold, atlas, fit.initial_betas[j], fit.regressors[j]);
      fit.fold_betas[j] = recalibrated_fold_beta(final_fold, mc_thetas, atlas,
                                                 fit.decorrelation[j], fit.regressors[j], n);
    } catch (const std::exception& e) {
      throw std::runtime_error("recalibrated_beta rotation " + std::to_string(j + 1) + ": " +
                               e.what());
    }
    const double weight = static_cast<double>(fit.fold_sizes[j]) / n;
    if (j == 0) {
      beta = weight * fit.fold_betas[j];
    } else {
      beta += weight * fit.fold_betas[j];
    }
  }
  fit.beta = beta;
  return fit;
}

Eigen::MatrixXd beta_covariance(const PairedData& data, const Atlas& atlas,
                                const Eigen::VectorXd& beta_hat, int inner_mc, RngStream& rng,
                                int mc_theta_count, BetaCovarianceDiagnostics* diagnostics) {
  const int n = data.size();
  const int m = data.player_count();
  if (inner_mc < 2) throw std::invalid_argument("beta_covariance: inner_mc must be >= 2");
  if (!data.conditional_resampler) {
    throw std::invalid_argument("beta_covariance: paired data has no conditional resampler");
  }
  const int b_total = total_beta_dim(atlas, m);
  // finite-ratio factor from the general-ratio covariance; 1 in the limit
  const double vb_scale =
      mc_theta_count > 0
          ? static_cast<double>(mc_theta_count) / (static_cast<double>(mc_theta_count) + n)
          : 1.0;
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(b_total, b_total);
  Eigen::MatrixXd sigma_ext = Eigen::MatrixXd::Zero(b_total, b_total);
  double worst_ridge = 0.0;
  const int half = (inner_mc + 1) / 2;
  const std::uint64_t nonce = rng.next_u64();

  for (int i = 0; i < m; ++i) {
    const Eigen::VectorXd beta_i = beta_block(atlas, beta_hat, i);
    const int p = atlas.beta_dim(i);

    Eigen::MatrixXd grads(n, p);
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(p, p);
    for (int k = 0; k < n; ++k) {
      const Eigen::RowVectorXd z_i = pair_z_block(data, k, i);
      grads.row(k) = atlas.fitting_loss_beta_gradient(data.thetas[k], i, z_i, beta_i);
      hess += atlas.fitting_loss_beta_hessian(data.thetas[k], i, z_i, beta_i);
    }
    hess /= n;
    const Eigen::RowVectorXd grad_mean = grads.colwise().mean();
    const Eigen::MatrixXd centered_a = grads.rowwise() - grad_mean;
    const Eigen::MatrixXd v_a = (centered_a.transpose() * centered_a) / n;

    RngStream resample_stream = rng.substream({nonce, static_cast<std::uint64_t>(i)});
    Eigen::MatrixXd inner_means(n, p);
    Eigen::MatrixXd inner_means_half(n, p);
    for (int k = 0; k < n; ++k) {
      const Eigen::MatrixXd draws = data.conditional_resampler->sample_block(
          data.thetas[k], i, inner_mc, resample_stream);
      const Eigen::MatrixXd rows =
          atlas.fitting_loss_beta_gradient_rows(data.thetas[k], i, draws, beta_i);
      inner_means.row(k) = rows.colwise().mean();
      inner_means_half.row(k) = rows.topRows(half).colwise().mean();
    }
    const Eigen::RowVectorXd w_mean = inner_means.colwise().mean();
    const Eigen::MatrixXd centered_b = inner_means.rowwise() - w_mean;
    const Eigen::MatrixXd v_b = (centered_b.transpose() * centered_b) / n;
    const Eigen::RowVectorXd w_mean_half = inner_means_half.colwise().mean();
    const Eigen::MatrixXd centered_bh = inner_means_half.rowwise() - w_mean_half;
    const Eigen::MatrixXd v_b_half = (centered_bh.transpose() * centered_bh) / n;

    double ridge = 0.0;
    const Eigen::MatrixXd h_inv = invert_with_ridge(hess, &ridge);
    worst_ridge = std::max(worst_ridge, ridge);
    const int off = beta_offset(atlas, i);
    sigma.block(off, off, p, p) = h_inv * (v_a - vb_scale * v_b) * h_inv.transpose();
    // Richardson in 1/M: V_b(M) = C + c/M, so 2 V_b(M) - V_b(M/2) ~ C
    sigma_ext.block(off, off, p, p) =
        h_inv * (v_a - vb_scale * (2.0 * v_b - v_b_half)) * h_inv.transpose();
  }

  double clip = 0.0;
  const Eigen::MatrixXd out = psd_clip(sigma, &clip);
  if (diagnostics != nullptr) {
    diagnostics->ridge_used = worst_ridge;
    diagnostics->psd_clip_magnitude = clip;
    diagnostics->sigma_extrapolated = psd_clip(sigma_ext);
  }
  return out;
}

Eigen::MatrixXd erm_beta_covariance(const PairedData& data, const Atlas& atlas,
                                    const Eigen::VectorXd& beta_hat, double* ridge_used) {
  const int n = data.size();
  const int m = data.player_count();
  const int b_total = total_beta_dim(atlas, m);
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(b_total, b_total);
  double worst_ridge = 0.0;
  for (int i = 0; i < m; ++i) {
    const Eigen::VectorXd beta_i = beta_block(atlas, beta_hat, i);
    const int p = atlas.beta_dim(i);
    Eigen::MatrixXd grads(n, p);
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(p, p);
    for (int k = 0; k < n; ++k) {
      const Eigen::RowVectorXd z_i = pair_z_block(data, k, i);
      grads.row(k) = atlas.fitting_loss_beta_gradient(data.thetas[k], i, z_i, beta_i);
      hess += atlas.fitting_loss_beta_hessian(data.thetas[k], i, z_i, beta_i);
    }
    hess /= n;
    const Eigen::RowVectorXd grad_mean = grads.colwise().mean();
    const Eigen::MatrixXd centered = grads.rowwise() - grad_mean;
    const Eigen::MatrixXd v_a = (centered.transpose() * centered) / n;
    double ridge = 0.0;
    const Eigen::MatrixXd h_inv = invert_with_ridge(hess, &ridge);
    worst_ridge = std::max(worst_ridge, ridge);
    const int off = beta_offset(atlas, i);
    sigma.block(off, off, p, p) = h_inv * v_a * h_inv.transpose();
  }
  if (ridge_used != nullptr) *ridge_used = worst_ridge;
  return psd_clip(sigma);
}

Eigen::VectorXd Proposal::log_density_rows(int player, const Eigen::MatrixXd& z) const {
  Eigen::VectorXd out(z.rows());
  for (int k = 0; k < z.rows(); ++k) out[k] = log_density(player, z.row(k));
  return out;
}

namespace {

class GaussianProposal final : public Proposal {
 public:
  GaussianProposal(std::vector<Eigen::VectorXd> means, std::vector<Eigen::VectorXd> sds)
      : means_(std::move(means)), sds_(std::move(sds)) {
    if (means_.size() != sds_.size() || means_.empty()) {
      throw std::invalid_argument("gaussian_proposal: mean/sd player mismatch");
    }
    for (std::size_t i = 0; i < means_.size(); ++i) {
      if (means_[i].size() != sds_[i].size() || (sds_[i].array() <= 0.0).any()) {
        throw std::invalid_argument("gaussian_proposal: bad mean/sd block");
      }
    }
  }

  int player_count() const override { return static_cast<int>(means_.size()); }
  int z_dim(int player) const override { return static_cast<int>(means_[player].size()); }

  Eigen::MatrixXd sample(int player, int n, RngStream& rng) const override {
    const Eigen::VectorXd& mu = means_[player];
    const Eigen::VectorXd& sd = sds_[player];
    Eigen::MatrixXd out(n, mu.size());
    for (int k = 0; k < n; ++k) {
      for (int j = 0; j < mu.size(); ++j) out(k, j) = mu[j] + sd[j] * rng.normal();
    }
    return out;
  }

  double log_density(int player, const Eigen::RowVectorXd& z_i) const override {
    const Eigen::VectorXd& mu = means_[player];
    const Eigen::VectorXd& sd = sds_[player];
    double acc = 0.0;
    for (int j = 0; j < mu.size(); ++j) {
      const double r = (z_i[j] - mu[j]) / sd[j];
      acc += -0.5 * (kLogTwoPi + 2.0 * std::log(sd[j])) - 0.5 * r * r;
    }
    return acc;
  }

  Eigen::VectorXd log_density_rows(int player, const Eigen::MatrixXd& z) const override {
    const Eigen::RowVectorXd mu = means_[player].transpose();
    const Eigen::RowVectorXd inv_sd = sds_[player].cwiseInverse().transpose();
    double log_norm = 0.0;
    for (int j = 0; j < mu.size(); ++j) {
      log_norm += -0.5 * (kLogTwoPi + 2.0 * std::log(sds_[player][j]));
    }
    const Eigen::MatrixXd scaled = (z.rowwise() - mu).array().rowwise() * inv_sd.array();
    return (log_norm - 0.5 * scaled.array().square().rowwise().sum()).matrix();
  }

 private:
  std::vector<Eigen::VectorXd> means_;
  std::vector<Eigen::VectorXd> sds_;
};

struct IsBatch {
  std::vector<Eigen::MatrixXd> z;      // per player, n x dz_i
  std::vector<Eigen::VectorXd> log_q;  // per player, n
};

IsBatch draw_is_batch(const Proposal& proposal, int n, RngStream& rng) {
  IsBatch batch;
  const int m = proposal.player_count();
  batch.z.reserve(m);
  batch.log_q.reserve(m);
  const std::uint64_t nonce = rng.next_u64();
  for (int i = 0; i < m; ++i) {
    RngStream player_stream = rng.substream({nonce, static_cast<std::uint64_t>(i)});
    batch.z.push_back(proposal.sample(i, n, player_stream));
    batch.log_q.push_back(proposal.log_density_rows(i, batch.z.back()));
  }
  return batch;
}

struct WeightStats {
  double max_weight = 0.0;
  double min_ess = 0.0;
  long clipped = 0;
  bool first = true;

  void absorb(const Eigen::VectorXd& w, long clipped_count) {
    const double sum = w.sum();
    const double sum_sq = w.squaredNorm();
    const double ess = sum_sq > 0.0 ? sum * sum / sum_sq : 0.0;
    max_weight = std::max(max_weight, w.maxCoeff());
    min_ess = first ? ess : std::min(min_ess, ess);
    clipped += clipped_count;
    first = false;
  }
};

/// Importance weights of player i at theta: p_beta / q, clipped.
Eigen::VectorXd is_weights(const Atlas& atlas, const IsBatch& batch, const Theta& theta, int i,
                           const Eigen::VectorXd& beta_i, long* clipped) {
  Eigen::VectorXd w =
      (atlas.log_density_rows(theta, i, batch.z[i], beta_i) - batch.log_q[i]).array().exp();
  long count = 0;
  for (int k = 0; k < w.size(); ++k) {
    if (w[k] > kWeightClip) {
      w[k] = kWeightClip;
      ++count;
    }
  }
  if (clipped != nullptr) *clipped = count;
  return w;
}

/// Mean over draws of grad_{theta^i} [w_k(theta) * loss_i(theta, Z_k)].
Eigen::VectorXd is_player_mean_gradient(const Atlas& atlas, const GameSpec& game,
                                        const IsBatch& batch, const Theta& theta, int i,
                                        const Eigen::VectorXd& beta_i,
                                        WeightStats* stats = nullptr) {
  long clipped = 0;
  const Eigen::VectorXd w = is_weights(atlas, batch, theta, i, beta_i, &clipped);
  if (stats != nullptr) stats->absorb(w, clipped);
  const Eigen::MatrixXd& z = batch.z[i];
  const Eigen::MatrixXd grads = player_gradient_rows(game.players[i], theta, z);
  const Eigen::VectorXd losses = player_loss_rows(game.players[i], theta, z);
  const Eigen::MatrixXd scores = atlas.theta_score_rows(theta, i, z, beta_i)
                                     .middleCols(theta.block_offset(i), theta.block_dim(i));
  // w .* (G + loss .* score), averaged over rows
  const Eigen::ArrayXXd combined =
      grads.array() + scores.array().colwise() * losses.array();
  return (combined.colwise() * w.array()).colwise().sum().transpose() / z.rows();
}

double is_player_mean_value(const Atlas& atlas, const GameSpec& game, const IsBatch& batch,
                            const Theta& theta, int i, const Eigen::VectorXd& beta_i) {
  const Eigen::VectorXd w = is_weights(atlas, batch, theta, i, beta_i, nullptr);
  const Eigen::VectorXd losses = player_loss_rows(game.players[i], theta, batch.z[i]);
  return w.dot(losses) / batch.z[i].rows();
}

Eigen::VectorXd is_stacked_mean_gradient(const Atlas& atlas, const GameSpec& game,
                                         const IsBatch& batch, const Theta& theta,
                                         const Eigen::VectorXd& beta,
                                         WeightStats* stats = nullptr) {
  Eigen::VectorXd g(theta.dim());
  for (int i = 0; i < game.player_count(); ++i) {
    g.segment(theta.block_offset(i), theta.block_dim(i)) = is_player_mean_gradient(
        atlas, game, batch, theta, i, beta_block(atlas, beta, i), stats);
  }
  return g;
}

Theta default_init(const GameSpec& game) {
  Eigen::VectorXd flat(game.total_dim());
  int at = 0;
  for (int i = 0; i < game.player_count(); ++i) {
    const ParamBox& box = game.boxes[i];
    for (int j = 0; j < box.dim(); ++j) {
      const double lo = std::isfinite(box.lower[j]) ? box.lower[j] : -1.0;
      const double hi = std::isfinite(box.upper[j]) ? box.upper[j] : 1.0;
      flat[at++] = 0.5 * (lo + hi);
    }
  }
  return Theta(flat, game.theta_dims);
}

}  // namespace

std::shared_ptr<Proposal> make_gaussian_proposal(std::vector<Eigen::VectorXd> means,
                                                 std::vector<Eigen::VectorXd> sds) {
  return std::make_shared<GaussianProposal>(std::move(means), std::move(sds));
}

std::shared_ptr<Proposal> make_default_proposal(const Atlas& atlas, const Eigen::VectorXd& beta,
                                                const Theta& shape_hint) {
  const Theta origin = shape_hint.with_flat(Eigen::VectorXd::Zero(shape_hint.dim()));
  std::vector<Eigen::VectorXd> means, sds;
  for (int i = 0; i < origin.players(); ++i) {
    means.push_back(atlas.mean_block(origin, i, beta_block(atlas, beta, i)));
    sds.push_back(3.0 * atlas.sd_block(origin, i));
  }
  return make_gaussian_proposal(std::move(means), std::move(sds));
}

PluginOptimum plugin_optimum(const Atlas& atlas, const Eigen::VectorXd& beta_hat,
                             const GameSpec& game, const Proposal& proposal, int n,
                             RngStream& rng, const SolveOptions& opts) {
  if (n < 1000) throw std::invalid_argument("plugin_optimum: n must be >= 1000");
  const IsBatch batch = draw_is_batch(proposal, n, rng);
  const int m = game.player_count();

  std::vector<PlayerObjective> objectives(m);
  for (int i = 0; i < m; ++i) {
    const Eigen::VectorXd beta_i = beta_block(atlas, beta_hat, i);
    objectives[i].gradient = [&atlas, &game, &batch, i, beta_i](const Theta& theta) {
      return is_player_mean_gradient(atlas, game, batch, theta, i, beta_i);
    };
    objectives[i].value = [&atlas, &game, &batch, i, beta_i](const Theta& theta) {
      return is_player_mean_value(atlas, game, batch, theta, i, beta_i);
    };
    auto grad_fn = objectives[i].gradient;
    objectives[i].hessian = [grad_fn, i](const Theta& theta) {
      const int off = theta.block_offset(i);
      const int d = theta.block_dim(i);
      const double h = 1e-5 * (1.0 + theta.flatten().norm());
      Eigen::MatrixXd hess(d, d);
      for (int j = 0; j < d; ++j) {
        Eigen::VectorXd up = theta.flatten();
        Eigen::VectorXd dn = theta.flatten();
        up[off + j] += h;
        dn[off + j] -= h;
        hess.col(j) =
            (grad_fn(theta.with_flat(up)) - grad_fn(theta.with_flat(dn))) / (2.0 * h);
      }
      return hess;
    };
  }

  PluginOptimum out;
  out.theta = solve_coupled_foc(objectives, game.boxes, default_init(game), opts, &out.solve);

  WeightStats stats;
  for (int i = 0; i < m; ++i) {
    long clipped = 0;
    const Eigen::VectorXd w =
        is_weights(atlas, batch, out.theta, i, beta_block(atlas, beta_hat, i), &clipped);
    stats.absorb(w, clipped);
  }
  out.max_weight = stats.max_weight;
  out.min_effective_sample_size = stats.min_ess;
  out.clipped_weights = stats.clipped;
  if (out.min_effective_sample_size < 0.01 * n) {
    throw std::runtime_error(
        "plugin_optimum: effective sample size below 1% of draws; choose a proposal closer to "
        "the plug-in map at the solution");
  }
  return out;
}

double importance_weighted_risk(const Atlas& atlas, const Eigen::VectorXd& beta,
                                const GameSpec& game, const Proposal& proposal,
                                const Theta& theta, int n, RngStream& rng) {
  const IsBatch batch = draw_is_batch(proposal, n, rng);
  double acc = 0.0;
  for (int i = 0; i < game.player_count(); ++i) {
    acc += is_player_mean_value(atlas, game, batch, theta, i, beta_block(atlas, beta, i));
  }
  return acc;
}

Eigen::MatrixXd plugin_jacobian(const Atlas& atlas, const Eigen::VectorXd& beta_hat,
                                const Theta& theta_hat, const GameSpec& game,
                                const Proposal& proposal, int n, RngStream& rng,
                                double* ridge_used) {
  const IsBatch batch = draw_is_batch(proposal, n, rng);
  const int d = theta_hat.dim();
  const int b = static_cast<int>(beta_hat.size());
  const double h_theta = 1e-5 * (1.0 + theta_hat.flatten().norm());
  const double h_beta = 1e-5 * (1.0 + beta_hat.norm());

  Eigen::MatrixXd j1(d, d);
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd up = theta_hat.flatten();
    Eigen::VectorXd dn = theta_hat.flatten();
    up[j] += h_theta;
    dn[j] -= h_theta;
    j1.col(j) = (is_stacked_mean_gradient(atlas, game, batch, theta_hat.with_flat(up), beta_hat) -
                 is_stacked_mean_gradient(atlas, game, batch, theta_hat.with_flat(dn), beta_hat)) /
                (2.0 * h_theta);
  }
  Eigen::MatrixXd j2(d, b);
  for (int j = 0; j < b; ++j) {
    Eigen::VectorXd up = beta_hat;
    Eigen::VectorXd dn = beta_hat;
    up[j] += h_beta;
    dn[j] -= h_beta;
    j2.col(j) = (is_stacked_mean_gradient(atlas, game, batch, theta_hat, up) -
                 is_stacked_mean_gradient(atlas, game, batch, theta_hat, dn)) /
                (2.0 * h_beta);
  }
  const Eigen::MatrixXd j1_inv = invert_with_ridge(j1, ridge_used);
  return -j1_inv * j2;
}

Eigen::MatrixXd optimum_covariance(const Eigen::MatrixXd& jac,
                                   const Eigen::MatrixXd& sigma_beta) {
  if (jac.cols() != sigma_beta.rows() || sigma_beta.rows() != sigma_beta.cols()) {
    throw std::invalid_argument("optimum_covariance: dimension mismatch");
  }
  return symmetrize(jac * sigma_beta * jac.transpose());
}

double error_gap_bound(const std::vector<double>& loss_bounds,
                       const std::vector<double>& misspec,
                       const std::vector<double>& convexity) {
  const std::size_t m = loss_bounds.size();
  if (misspec.size() != m || convexity.size() != m || m == 0) {
    throw std::invalid_argument("error_gap_bound: per-player inputs of equal length required");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (loss_bounds[i] <= 0.0 || misspec[i] < 0.0) {
      throw std::invalid_argument("error_gap_bound: loss bounds must be positive, misspec >= 0");
    }
    if (convexity[i] <= 0.0) {
      throw std::invalid_argument("error_gap_bound: convexity parameters must be positive");
    }
    acc += 8.0 * loss_bounds[i] * misspec[i] / convexity[i];
  }
  return acc;
}

PluginInference run_plugin_inference(const PairedData& data, const Atlas& atlas,
                                     const GameSpec& game, const Proposal& proposal,
                                     BetaMethod method, const PluginInferenceOptions& opts,
                                     RngStream& rng) {
  PluginInference out;
  if (method == BetaMethod::kRecalibrated) {
    RecalibratedFit fit =
        recalibrated_beta(data, atlas, opts.mc_theta_count, opts.regressor, rng);
    out.beta_hat = fit.beta;
    out.sigma_beta =
        beta_covariance(data, atlas, out.beta_hat, opts.inner_mc, rng, opts.mc_theta_count);
  } else {
    out.beta_hat = erm_beta(data, atlas);
    out.sigma_beta = erm_beta_covariance(data, atlas, out.beta_hat);
  }
  out.optimum =
      plugin_optimum(atlas, out.beta_hat, game, proposal, opts.n_is, rng, opts.solver);
  out.jac_sol_beta =
      plugin_jacobian(atlas, out.beta_hat, out.optimum.theta, game, proposal, opts.n_is, rng);
  out.sigma_theta = optimum_covariance(out.jac_sol_beta, out.sigma_beta);
  return out;
}

}  // namespace perfinf
