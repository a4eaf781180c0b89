#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "perfinf/optimal.hpp"
#include "perfinf/stable.hpp"

namespace perfinf {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StableConfig {
  std::vector<double> eps_grid = {0.01, 0.05, 0.2};
  Eigen::VectorXd sigma_diag = (Eigen::VectorXd(2) << 0.25, 0.25).finished();
  Eigen::VectorXd theta0 = (Eigen::VectorXd(2) << 1.0, 2.0).finished();
  int T = 10;
  int N = 2000;
  int reps = 200;
  int n_mc = 20'000;  // Monte Carlo draws per solution-map Jacobian
};

struct OptimalConfig {
  std::vector<double> misspec_grid = {0.0, 0.25, 0.5};
  double b = 1.0;
  double beta1 = 0.5;
  double beta2 = 0.3;
  double sigma = 0.5;
  int N = 3000;
  int n_tilde = 50'000;
  int n_is = 100'000;
  int inner_m = 100;
  int reps = 200;
  RegressorSpec regressor;
};

struct ExperimentConfig {
  std::string target = "stable";  // coverage target: stable | optimal
  double alpha = 0.95;
  std::uint64_t seed = 42;
  int workers = 0;  // 0 = hardware concurrency
  std::string out_dir = "out";
  bool paper_scale = false;

  double stable_sim_eps = 0.2;  // stable-sim / qq sensitivity
  int qq_t = 5;                 // qq step

  StableConfig stable;
  OptimalConfig optimal;
  SolveOptions solver;

  /// Counts from the reference protocol: reps=1000, N=5000 (stable) / 15000
  /// (optimal), n_tilde = n_is = 1e6, n_mc = 1e5.
  void apply_paper_scale();
};

/// Parses a JSON config file (keys mirror the config structs; see README).
/// Throws ConfigError, naming the path, when the file is missing or invalid.
ExperimentConfig load_config_file(const std::string& path);

/// PERF_INF_SEED, when set, overrides the configured seed.
void apply_env_seed(ExperimentConfig& cfg);

/// One stable replication: trajectory estimates and accumulated covariances.
struct StableRep {
  bool failed = false;
  std::string error;
  std::vector<Eigen::VectorXd> estimates;  // flattened theta_hat_t, t = 1..T
  std::vector<Eigen::MatrixXd> sigmas;     // accumulated Sigma_hat_t
};

/// Runs `reps` independent ERR replications at one sensitivity. Replications
/// are scheduled over workers but each owns a substream keyed by
/// (seed, grid_index, rep), so results never depend on the worker count.
std::vector<StableRep> run_stable_batch(const ExperimentConfig& cfg, double eps,
                                        int grid_index);

struct CoverageCell {
  double grid_value = 0.0;  // eps or eps_mis
  int t = 0;                // stable target step (0 for optimal cells)
  std::string method;       // optimal cells: erm | recal
  std::string target;       // theta_t | theta_ps | theta_po
  int coordinate = 0;
  double coverage = 0.0;
  double mc_se = 0.0;  // sqrt(p (1-p) / reps)
  double mean_width = 0.0;
  int reps = 0;
  int failures = 0;
};

struct CoverageReport {
  std::vector<CoverageCell> cells;
  long total_failures = 0;
};

/// Coverage of the per-step confidence intervals against the closed-form
/// theta_t, and the same intervals read against theta_PS.
CoverageReport run_coverage_stable(const ExperimentConfig& cfg);

struct OptimalRepRow {
  int rep = 0;
  std::string method;  // erm | recal
  double eps_mis = 0.0;
  bool failed = false;
  std::string error;
  double beta_hat = 0.0;
  double theta_hat = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  bool covered = false;
  double width = 0.0;
};

struct OptimalReport {
  CoverageReport coverage;
  std::vector<OptimalRepRow> rows;
  double theta_po_truth = 0.0;
  double beta_star = 0.0;
};

/// ERM and recalibrated plug-in pipelines side by side over the
/// misspecification grid, with intervals targeting theta_PO^{beta*}.
OptimalReport run_coverage_optimal(const ExperimentConfig& cfg);

/// Sorted Mahalanobis distances N (est - truth)^T Sigma^-1 (est - truth)
/// paired with chi-square quantiles at plotting positions (k - 0.5) / K.
/// Rows with singular covariance are skipped and counted.
std::vector<std::pair<double, double>> qq_data(const std::vector<Theta>& estimates,
                                               const std::vector<Eigen::MatrixXd>& covariances,
                                               const std::vector<Theta>& truths, int N,
                                               int* skipped = nullptr);

/// Pearson correlation of the two qq_data columns.
double qq_correlation(const std::vector<std::pair<double, double>>& pairs);

/// CSV/JSON writers (schemas in docs/outputs.md). Deterministic byte output.
void write_stable_coverage_outputs(const CoverageReport& report, const ExperimentConfig& cfg);
void write_optimal_outputs(const OptimalReport& report, const ExperimentConfig& cfg);
void write_stable_sim_outputs(const std::vector<StableRep>& reps, const ExperimentConfig& cfg);
void write_qq_outputs(const std::vector<std::pair<double, double>>& pairs, double correlation,
                      int skipped, const ExperimentConfig& cfg);

/// Entry point behind the CLI binary. Exit codes: 0 success, 2 config error,
/// 3 runtime error.
int cli_main(int argc, char** argv);

}  // namespace perfinf
