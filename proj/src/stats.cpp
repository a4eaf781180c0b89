#include "perfinf/stats.hpp"

#include <atomic>
#include <cmath>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace perfinf {

double normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

namespace {

// Acklam's rational approximation, refined below with one Halley step.
double normal_quantile_approx(double p) {
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > 1.0 - plow) {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

}  // namespace

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::invalid_argument("normal_quantile: p must be in (0, 1)");
  }
  double x = normal_quantile_approx(p);
  // one Halley refinement against erfc
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  x = x - u / (1.0 + x * u / 2.0);
  return x;
}

double regularized_gamma_p(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw std::invalid_argument("regularized_gamma_p: bad arguments");
  if (x == 0.0) return 0.0;
  const double lg = std::lgamma(a);
  if (x < a + 1.0) {
    // series representation
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - lg);
  }
  // continued fraction for Q(a, x), P = 1 - Q
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < 1e-15) break;
  }
  const double q = std::exp(-x + a * std::log(x) - lg) * h;
  return 1.0 - q;
}

double chi_square_quantile(double p, double k) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::invalid_argument("chi_square_quantile: p must be in (0, 1)");
  }
  if (k <= 0.0) throw std::invalid_argument("chi_square_quantile: k must be positive");
  const double a = k / 2.0;
  // Wilson-Hilferty starting point
  const double z = normal_quantile(p);
  double x = k * std::pow(1.0 - 2.0 / (9.0 * k) + z * std::sqrt(2.0 / (9.0 * k)), 3.0);
  if (!(x > 0.0)) x = k * 0.5;
  double lo = 0.0, hi = std::max(4.0 * x, k + 40.0 * std::sqrt(2.0 * k) + 100.0);
  while (regularized_gamma_p(a, hi / 2.0) < p) hi *= 2.0;
  // Newton with bisection safeguard on P(a, x/2) = p
  for (int iter = 0; iter < 200; ++iter) {
    const double f = regularized_gamma_p(a, x / 2.0) - p;
    if (f > 0.0) {
      hi = x;
    } else {
      lo = x;
    }
    const double log_pdf = (a - 1.0) * std::log(x / 2.0) - x / 2.0 - std::lgamma(a) -
                           std::log(2.0);
    const double pdf = std::exp(log_pdf);
    double next = (pdf > 0.0) ? x - f / pdf : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::fabs(next - x) < 1e-12 * (1.0 + x)) return next;
    x = next;
  }
  return x;
}

double pearson_correlation(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("pearson_correlation: need >= 2 paired values");
  }
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& a) { return 0.5 * (a + a.transpose()); }

Eigen::MatrixXd psd_clip(const Eigen::MatrixXd& a, double* clip_magnitude) {
  const Eigen::MatrixXd sym = symmetrize(a);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  Eigen::VectorXd vals = es.eigenvalues();
  double worst = 0.0;
  for (int i = 0; i < vals.size(); ++i) {
    if (vals[i] < 0.0) {
      worst = std::min(worst, vals[i]);
      vals[i] = 0.0;
    }
  }
  if (clip_magnitude != nullptr) *clip_magnitude = -worst;
  if (worst == 0.0) return sym;
  return es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd invert_with_ridge(const Eigen::MatrixXd& a, double* ridge_used) {
  if (a.rows() != a.cols()) throw std::invalid_argument("invert_with_ridge: square matrix required");
  const int d = static_cast<int>(a.rows());
  if (ridge_used != nullptr) *ridge_used = 0.0;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (lu.isInvertible()) return lu.inverse();
  double lambda = 1e-10 * std::abs(a.trace()) / d;
  if (lambda <= 0.0) lambda = 1e-10;
  for (int attempt = 0; attempt < 60; ++attempt) {
    Eigen::FullPivLU<Eigen::MatrixXd> ridged(a + lambda * Eigen::MatrixXd::Identity(d, d));
    if (ridged.isInvertible()) {
      if (ridge_used != nullptr) *ridge_used = lambda;
      return ridged.inverse();
    }
    lambda *= 2.0;
  }
  throw std::runtime_error("invert_with_ridge: matrix not invertible even with ridge");
}

Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& rows) {
  const int n = static_cast<int>(rows.rows());
  if (n < 2) throw std::invalid_argument("sample_covariance: need >= 2 rows");
  const Eigen::RowVectorXd mean = rows.colwise().mean();
  const Eigen::MatrixXd centered = rows.rowwise() - mean;
  return (centered.transpose() * centered) / static_cast<double>(n - 1);
}

Eigen::MatrixXd sample_cross_covariance(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  const int n = static_cast<int>(x.rows());
  if (n != y.rows() || n < 2) {
    throw std::invalid_argument("sample_cross_covariance: need >= 2 paired rows");
  }
  const Eigen::RowVectorXd mx = x.colwise().mean();
  const Eigen::RowVectorXd my = y.colwise().mean();
  return ((x.rowwise() - mx).transpose() * (y.rowwise() - my)) / static_cast<double>(n - 1);
}

Eigen::MatrixXd psd_pseudo_inverse(const Eigen::MatrixXd& a, int* rank) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(a));
  const Eigen::VectorXd vals = es.eigenvalues();
  const double tol = std::max(1e-12, vals.cwiseAbs().maxCoeff() * a.rows() * 1e-14);
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(vals.size());
  int r = 0;
  for (int i = 0; i < vals.size(); ++i) {
    if (vals[i] > tol) {
      inv[i] = 1.0 / vals[i];
      ++r;
    }
  }
  if (rank != nullptr) *rank = r;
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

void parallel_for(int n, int workers, const std::function<void(int)>& body) {
  if (n <= 0) return;
  int count = workers > 0 ? workers : static_cast<int>(std::thread::hardware_concurrency());
  if (count <= 0) count = 1;
  count = std::min(count, n);
  if (count == 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(count);
  for (int w = 0; w < count; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace perfinf
