#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

namespace perfinf {

/// Standard normal CDF.
double normal_cdf(double x);

/// Standard normal quantile Phi^-1(p), p in (0, 1).
double normal_quantile(double p);

/// Chi-square quantile with k degrees of freedom, p in (0, 1).
double chi_square_quantile(double p, double k);

/// Regularized lower incomplete gamma P(a, x).
double regularized_gamma_p(double a, double x);

/// Pearson correlation of two equal-length sequences.
double pearson_correlation(const std::vector<double>& x, const std::vector<double>& y);

/// (A + A^T) / 2.
Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& a);

/// Clips negative eigenvalues of a symmetric matrix at zero.
/// `clip_magnitude`, when given, receives the most negative eigenvalue removed.
Eigen::MatrixXd psd_clip(const Eigen::MatrixXd& a, double* clip_magnitude = nullptr);

/// Inverts `a`, falling back to a ridge a + lambda*I with
/// lambda = 1e-10 * tr(a)/d (doubled until invertible) when `a` is singular.
/// `ridge_used`, when given, receives the final lambda (0 when none).
Eigen::MatrixXd invert_with_ridge(const Eigen::MatrixXd& a, double* ridge_used = nullptr);

/// Sample covariance of rows (centered at the column means, 1/(n-1)).
Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& rows);

/// Sample cross-covariance Cov(x, y) of paired rows, 1/(n-1).
Eigen::MatrixXd sample_cross_covariance(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix.
/// `rank`, when given, receives the numerical rank.
Eigen::MatrixXd psd_pseudo_inverse(const Eigen::MatrixXd& a, int* rank = nullptr);

/// Runs body(0..n-1) on `workers` threads (0 = hardware concurrency).
/// Exceptions thrown by the body are rethrown on the caller thread.
void parallel_for(int n, int workers, const std::function<void(int)>& body);

}  // namespace perfinf
