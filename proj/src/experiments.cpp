#include "perfinf/experiments.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "perfinf/oracle.hpp"
#include "perfinf/stats.hpp"

namespace perfinf {

namespace {

using nlohmann::json;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Eigen::VectorXd to_vector(const json& arr, const std::string& key) {
  if (!arr.is_array() || arr.empty()) {
    throw ConfigError("config: '" + key + "' must be a non-empty array");
  }
  Eigen::VectorXd out(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) out[static_cast<int>(i)] = arr[i].get<double>();
  return out;
}

json vector_to_json(const Eigen::VectorXd& v) {
  json arr = json::array();
  for (int i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open output file " + path.string());
  out << content;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::filesystem::path prepare_out_dir(const ExperimentConfig& cfg) {
  std::filesystem::path dir(cfg.out_dir);
  std::filesystem::create_directories(dir);
  return dir;
}

json config_echo(const ExperimentConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["alpha"] = cfg.alpha;
  j["paper_scale"] = cfg.paper_scale;
  j["stable"] = {{"eps_grid", cfg.stable.eps_grid},
                 {"sigma_diag", vector_to_json(cfg.stable.sigma_diag)},
                 {"theta0", vector_to_json(cfg.stable.theta0)},
                 {"T", cfg.stable.T},
                 {"N", cfg.stable.N},
                 {"reps", cfg.stable.reps},
                 {"n_mc", cfg.stable.n_mc}};
  j["optimal"] = {{"misspec_grid", cfg.optimal.misspec_grid},
                  {"b", cfg.optimal.b},
                  {"beta1", cfg.optimal.beta1},
                  {"beta2", cfg.optimal.beta2},
                  {"sigma", cfg.optimal.sigma},
                  {"N", cfg.optimal.N},
                  {"N_tilde", cfg.optimal.n_tilde},
                  {"n_is", cfg.optimal.n_is},
                  {"inner_M", cfg.optimal.inner_m},
                  {"reps", cfg.optimal.reps},
                  {"regressor_degree", cfg.optimal.regressor.degree}};
  j["solver"] = {{"tol", cfg.solver.tol},
                 {"max_iter", cfg.solver.max_inner_iterations},
                 {"max_sweeps", cfg.solver.max_sweeps},
                 {"mode", cfg.solver.mode == SolveOptions::Mode::kGaussSeidel
                              ? "gauss_seidel"
                              : "simultaneous"}};
  return j;
}

}  // namespace

void ExperimentConfig::apply_paper_scale() {
  paper_scale = true;
  stable.reps = 1000;
  stable.N = 5000;
  stable.n_mc = 100'000;
  optimal.reps = 1000;
  optimal.N = 15'000;
  optimal.n_tilde = 1'000'000;
  optimal.n_is = 1'000'000;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  ExperimentConfig cfg;
  try {
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("alpha")) cfg.alpha = j["alpha"].get<double>();
    if (j.contains("workers")) cfg.workers = j["workers"].get<int>();
    if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
    if (j.contains("target")) cfg.target = j["target"].get<std::string>();
    if (j.contains("stable_sim_eps")) cfg.stable_sim_eps = j["stable_sim_eps"].get<double>();
    if (j.contains("qq_t")) cfg.qq_t = j["qq_t"].get<int>();
    if (j.contains("stable")) {
      const json& s = j["stable"];
      if (s.contains("eps_grid")) cfg.stable.eps_grid = s["eps_grid"].get<std::vector<double>>();
      if (s.contains("sigma_diag")) {
        cfg.stable.sigma_diag = to_vector(s["sigma_diag"], "stable.sigma_diag");
      }
      if (s.contains("theta0")) cfg.stable.theta0 = to_vector(s["theta0"], "stable.theta0");
      if (s.contains("T")) cfg.stable.T = s["T"].get<int>();
      if (s.contains("N")) cfg.stable.N = s["N"].get<int>();
      if (s.contains("reps")) cfg.stable.reps = s["reps"].get<int>();
      if (s.contains("n_mc")) cfg.stable.n_mc = s["n_mc"].get<int>();
    }
    if (j.contains("optimal")) {
      const json& o = j["optimal"];
      if (o.contains("misspec_grid")) {
        cfg.optimal.misspec_grid = o["misspec_grid"].get<std::vector<double>>();
      }
      if (o.contains("b")) cfg.optimal.b = o["b"].get<double>();
      if (o.contains("beta1")) cfg.optimal.beta1 = o["beta1"].get<double>();
      if (o.contains("beta2")) cfg.optimal.beta2 = o["beta2"].get<double>();
      if (o.contains("sigma")) cfg.optimal.sigma = o["sigma"].get<double>();
      if (o.contains("N")) cfg.optimal.N = o["N"].get<int>();
      if (o.contains("N_tilde")) cfg.optimal.n_tilde = o["N_tilde"].get<int>();
      if (o.contains("n_is")) cfg.optimal.n_is = o["n_is"].get<int>();
      if (o.contains("inner_M")) cfg.optimal.inner_m = o["inner_M"].get<int>();
      if (o.contains("reps")) cfg.optimal.reps = o["reps"].get<int>();
      if (o.contains("regressor")) {
        const json& r = o["regressor"];
        if (r.contains("degree")) cfg.optimal.regressor.degree = r["degree"].get<int>();
        if (r.contains("ridge")) cfg.optimal.regressor.ridge = r["ridge"].get<double>();
      }
    }
    if (j.contains("solver")) {
      const json& s = j["solver"];
      if (s.contains("tol")) cfg.solver.tol = s["tol"].get<double>();
      if (s.contains("max_iter")) cfg.solver.max_inner_iterations = s["max_iter"].get<int>();
      if (s.contains("max_sweeps")) cfg.solver.max_sweeps = s["max_sweeps"].get<int>();
      if (s.contains("mode")) {
        const std::string mode = s["mode"].get<std::string>();
        if (mode == "gauss_seidel") {
          cfg.solver.mode = SolveOptions::Mode::kGaussSeidel;
        } else if (mode == "simultaneous") {
          cfg.solver.mode = SolveOptions::Mode::kSimultaneous;
        } else {
          throw ConfigError("config: solver.mode must be gauss_seidel or simultaneous");
        }
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return cfg;
}

void apply_env_seed(ExperimentConfig& cfg) {
  const char* env = std::getenv("PERF_INF_SEED");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const unsigned long long parsed = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0') {
    throw ConfigError(std::string("PERF_INF_SEED is not an integer: ") + env);
  }
  cfg.seed = static_cast<std::uint64_t>(parsed);
}

std::vector<StableRep> run_stable_batch(const ExperimentConfig& cfg, double eps,
                                        int grid_index) {
  const int d = static_cast<int>(cfg.stable.sigma_diag.size());
  if (cfg.stable.theta0.size() != d) {
    throw ConfigError("stable: theta0 and sigma_diag dimensions differ");
  }
  if (cfg.stable.reps < 1 || cfg.stable.N < 2 || cfg.stable.T < 1 || cfg.stable.n_mc < 100) {
    throw ConfigError("stable: reps/N/T/n_mc below their minimum counts");
  }
  const auto map = make_gaussian_location(eps, cfg.stable.sigma_diag);
  const auto atlas = make_gaussian_atlas(cfg.stable.sigma_diag);
  const GameSpec game = make_squared_loss_game({d}, 0.5);
  const Theta theta0 = Theta::single(cfg.stable.theta0);
  const RngStream root(cfg.seed);

  std::vector<StableRep> results(cfg.stable.reps);
  parallel_for(cfg.stable.reps, cfg.workers, [&](int rep) {
    StableRep& slot = results[rep];
    RngStream rep_stream = root.substream(
        {0x57B1u, static_cast<std::uint64_t>(grid_index), static_cast<std::uint64_t>(rep)});
    try {
      ErrTrajectory traj =
          err_run(game, *map, theta0, cfg.stable.T, cfg.stable.N, rep_stream, cfg.solver);
      estimate_trajectory_covariance(traj, game, *atlas, cfg.stable.n_mc, rep_stream);
      slot.estimates.reserve(traj.steps());
      for (const Theta& est : traj.estimates) slot.estimates.push_back(est.flatten());
      slot.sigmas = std::move(traj.accumulated);
    } catch (const std::exception& e) {
      slot.failed = true;
      slot.error = e.what();
    }
  });
  return results;
}

CoverageReport run_coverage_stable(const ExperimentConfig& cfg) {
  if (cfg.stable.eps_grid.empty()) throw ConfigError("stable: empty sensitivity grid");
  CoverageReport report;
  const double z = normal_quantile(0.5 + cfg.alpha / 2.0);
  const int d = static_cast<int>(cfg.stable.sigma_diag.size());
  const Theta theta0 = Theta::single(cfg.stable.theta0);

  for (std::size_t gi = 0; gi < cfg.stable.eps_grid.size(); ++gi) {
    const double eps = cfg.stable.eps_grid[gi];
    const std::vector<StableRep> batch = run_stable_batch(cfg, eps, static_cast<int>(gi));
    int failures = 0;
    for (const StableRep& rep : batch) {
      if (rep.failed) ++failures;
    }
    report.total_failures += failures;

    for (int t = 1; t <= cfg.stable.T; ++t) {
      const StableTruth truth = gaussian_stable_truth(eps, cfg.stable.sigma_diag, theta0, t);
      for (int j = 0; j < d; ++j) {
        int n_ok = 0, covered_t = 0, covered_ps = 0;
        double width_sum = 0.0;
        for (const StableRep& rep : batch) {
          if (rep.failed) continue;
          const double est = rep.estimates[t - 1][j];
          const double half =
              z * std::sqrt(std::max(0.0, rep.sigmas[t - 1](j, j)) / cfg.stable.N);
          ++n_ok;
          width_sum += 2.0 * half;
          if (std::abs(est - truth.theta_t.flatten()[j]) <= half) ++covered_t;
          if (std::abs(est - truth.theta_ps.flatten()[j]) <= half) ++covered_ps;
        }
        const double denom = std::max(1, n_ok);
        const auto make_cell = [&](const std::string& target_name, int covered) {
          CoverageCell cell;
          cell.grid_value = eps;
          cell.t = t;
          cell.target = target_name;
          cell.coordinate = j;
          cell.reps = n_ok;
          cell.failures = failures;
          cell.coverage = covered / denom;
          cell.mc_se = std::sqrt(cell.coverage * (1.0 - cell.coverage) / denom);
          cell.mean_width = width_sum / denom;
          return cell;
        };
        report.cells.push_back(make_cell("theta_t", covered_t));
        report.cells.push_back(make_cell("theta_ps", covered_ps));
      }
    }
  }
  return report;
}

OptimalReport run_coverage_optimal(const ExperimentConfig& cfg) {
  OptimalReport report;
  const OptimalConfig& oc = cfg.optimal;
  if (oc.misspec_grid.empty()) throw ConfigError("optimal: empty misspecification grid");
  if (oc.reps < 1 || oc.N < 9 || oc.n_tilde < oc.N || oc.n_is < 1000 || oc.inner_m < 2) {
    throw ConfigError("optimal: reps/N/N_tilde/n_is/inner_M below their minimum counts");
  }
  const OptimalTruth truth = location_optimal_truth(oc.b, oc.beta1, oc.sigma);
  report.theta_po_truth = truth.theta_po;
  report.beta_star = truth.beta_star;

  const double z = normal_quantile(0.5 + cfg.alpha / 2.0);
  const Eigen::VectorXd b_vec = Eigen::VectorXd::Constant(1, oc.b);
  const auto atlas = make_linear_atlas(b_vec, oc.sigma);
  const GameSpec game = make_squared_loss_game({1}, 1.0, {ParamBox::cube(1, -5.0, 5.0)});
  const Eigen::VectorXd beta_star_vec = Eigen::VectorXd::Constant(1, oc.beta1);
  const auto proposal = make_default_proposal(*atlas, beta_star_vec,
                                              Theta::single(Eigen::VectorXd::Zero(1)));
  const RngStream root(cfg.seed);

  PluginInferenceOptions opts;
  opts.mc_theta_count = oc.n_tilde;
  opts.n_is = oc.n_is;
  opts.inner_mc = oc.inner_m;
  opts.regressor = oc.regressor;
  opts.solver = cfg.solver;

  const std::vector<std::pair<BetaMethod, std::string>> methods = {
      {BetaMethod::kErm, "erm"}, {BetaMethod::kRecalibrated, "recal"}};

  for (std::size_t gi = 0; gi < oc.misspec_grid.size(); ++gi) {
    const double eps_mis = oc.misspec_grid[gi];
    const auto map = make_location_family(b_vec, oc.beta1, oc.beta2, eps_mis, oc.sigma);
    const auto design = make_uniform_theta_sampler({ParamBox::cube(1, -1.0, 1.0)});

    std::vector<OptimalRepRow> rows(2 * oc.reps);
    parallel_for(oc.reps, cfg.workers, [&](int rep) {
      RngStream rep_stream = root.substream(
          {0x0B71u, static_cast<std::uint64_t>(gi), static_cast<std::uint64_t>(rep)});
      PairedData data;
      bool draw_failed = false;
      std::string draw_error;
      try {
        data = draw_paired_data(map, design, oc.N, rep_stream);
      } catch (const std::exception& e) {
        draw_failed = true;
        draw_error = e.what();
      }
      for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        OptimalRepRow& row = rows[2 * rep + mi];
        row.rep = rep;
        row.method = methods[mi].second;
        row.eps_mis = eps_mis;
        if (draw_failed) {
          row.failed = true;
          row.error = draw_error;
          continue;
        }
        try {
          const PluginInference inf = run_plugin_inference(
              data, *atlas, game, *proposal, methods[mi].first, opts, rep_stream);
          row.beta_hat = inf.beta_hat[0];
          row.theta_hat = inf.optimum.theta.flatten()[0];
          const double half = z * std::sqrt(std::max(0.0, inf.sigma_theta(0, 0)) / oc.N);
          row.ci_lo = row.theta_hat - half;
          row.ci_hi = row.theta_hat + half;
          row.width = 2.0 * half;
          row.covered = row.ci_lo <= truth.theta_po && truth.theta_po <= row.ci_hi;
        } catch (const std::exception& e) {
          row.failed = true;
          row.error = e.what();
        }
      }
    });

    for (const auto& [method, name] : methods) {
      (void)method;
      int n_ok = 0, covered = 0, failures = 0;
      double width_sum = 0.0;
      for (const OptimalRepRow& row : rows) {
        if (row.method != name) continue;
        if (row.failed) {
          ++failures;
          continue;
        }
        ++n_ok;
        width_sum += row.width;
        if (row.covered) ++covered;
      }
      report.coverage.total_failures += failures;
      CoverageCell cell;
      cell.grid_value = eps_mis;
      cell.method = name;
      cell.target = "theta_po";
      cell.coordinate = 0;
      cell.reps = n_ok;
      cell.failures = failures;
      const double denom = std::max(1, n_ok);
      cell.coverage = covered / denom;
      cell.mc_se = std::sqrt(cell.coverage * (1.0 - cell.coverage) / denom);
      cell.mean_width = width_sum / denom;
      report.coverage.cells.push_back(cell);
    }
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  return report;
}

std::vector<std::pair<double, double>> qq_data(const std::vector<Theta>& estimates,
                                               const std::vector<Eigen::MatrixXd>& covariances,
                                               const std::vector<Theta>& truths, int N,
                                               int* skipped) {
  if (estimates.size() != covariances.size() || estimates.size() != truths.size() ||
      estimates.size() < 10) {
    throw std::invalid_argument("qq_data: need equal-length inputs with >= 10 entries");
  }
  if (skipped != nullptr) *skipped = 0;
  std::vector<double> distances;
  distances.reserve(estimates.size());
  const int d = estimates.front().dim();
  for (std::size_t k = 0; k < estimates.size(); ++k) {
    const Eigen::VectorXd diff = estimates[k].flatten() - truths[k].flatten();
    Eigen::FullPivLU<Eigen::MatrixXd> lu(covariances[k]);
    if (!lu.isInvertible()) {
      if (skipped != nullptr) ++(*skipped);
      continue;
    }
    distances.push_back(N * diff.dot(lu.solve(diff)));
  }
  std::sort(distances.begin(), distances.end());
  const int count = static_cast<int>(distances.size());
  std::vector<std::pair<double, double>> pairs;
  pairs.reserve(count);
  for (int k = 0; k < count; ++k) {
    const double p = (k + 0.5) / count;
    pairs.emplace_back(distances[k], chi_square_quantile(p, d));
  }
  return pairs;
}

double qq_correlation(const std::vector<std::pair<double, double>>& pairs) {
  std::vector<double> emp, theo;
  emp.reserve(pairs.size());
  theo.reserve(pairs.size());
  for (const auto& [e, q] : pairs) {
    emp.push_back(e);
    theo.push_back(q);
  }
  return pearson_correlation(emp, theo);
}

void write_stable_coverage_outputs(const CoverageReport& report, const ExperimentConfig& cfg) {
  const auto dir = prepare_out_dir(cfg);
  std::ostringstream csv;
  csv << "eps,t,coord,target,coverage,mc_se,mean_width,reps,failures\n";
  for (const CoverageCell& c : report.cells) {
    csv << fmt(c.grid_value) << ',' << c.t << ',' << c.coordinate << ',' << c.target << ','
        << fmt(c.coverage) << ',' << fmt(c.mc_se) << ',' << fmt(c.mean_width) << ',' << c.reps
        << ',' << c.failures << '\n';
  }
  write_file(dir / "stable_coverage.csv", csv.str());

  json summary;
  summary["kind"] = "coverage-stable";
  summary["config"] = config_echo(cfg);
  summary["total_failures"] = report.total_failures;
  json cells = json::array();
  for (const CoverageCell& c : report.cells) {
    cells.push_back({{"eps", c.grid_value},
                     {"t", c.t},
                     {"coord", c.coordinate},
                     {"target", c.target},
                     {"coverage", c.coverage},
                     {"mc_se", c.mc_se},
                     {"mean_width", c.mean_width},
                     {"reps", c.reps},
                     {"failures", c.failures}});
  }
  summary["cells"] = cells;
  write_file(dir / "summary.json", summary.dump(2) + "\n");
}

void write_optimal_outputs(const OptimalReport& report, const ExperimentConfig& cfg) {
  const auto dir = prepare_out_dir(cfg);
  std::ostringstream csv;
  csv << "rep,method,eps_mis,beta_hat,theta_hat,ci_lo,ci_hi,covered,width\n";
  for (const OptimalRepRow& r : report.rows) {
    if (r.failed) continue;
    csv << r.rep << ',' << r.method << ',' << fmt(r.eps_mis) << ',' << fmt(r.beta_hat) << ','
        << fmt(r.theta_hat) << ',' << fmt(r.ci_lo) << ',' << fmt(r.ci_hi) << ','
        << (r.covered ? 1 : 0) << ',' << fmt(r.width) << '\n';
  }
  write_file(dir / "optimal_reps.csv", csv.str());

  std::ostringstream agg;
  agg << "eps_mis,method,coverage,mc_se,mean_width,reps,failures\n";
  for (const CoverageCell& c : report.coverage.cells) {
    agg << fmt(c.grid_value) << ',' << c.method << ',' << fmt(c.coverage) << ',' << fmt(c.mc_se)
        << ',' << fmt(c.mean_width) << ',' << c.reps << ',' << c.failures << '\n';
  }
  write_file(dir / "optimal_coverage.csv", agg.str());

  json summary;
  summary["kind"] = "coverage-optimal";
  summary["config"] = config_echo(cfg);
  summary["theta_po_truth"] = report.theta_po_truth;
  summary["beta_star"] = report.beta_star;
  summary["total_failures"] = report.coverage.total_failures;
  json cells = json::array();
  for (const CoverageCell& c : report.coverage.cells) {
    cells.push_back({{"eps_mis", c.grid_value},
                     {"method", c.method},
                     {"coverage", c.coverage},
                     {"mc_se", c.mc_se},
                     {"mean_width", c.mean_width},
                     {"reps", c.reps},
                     {"failures", c.failures}});
  }
  summary["cells"] = cells;
  write_file(dir / "summary.json", summary.dump(2) + "\n");
}

void write_stable_sim_outputs(const std::vector<StableRep>& reps, const ExperimentConfig& cfg) {
  const auto dir = prepare_out_dir(cfg);
  std::ostringstream csv;
  csv << "rep,t,coord,estimate,var_estimate\n";
  long failures = 0;
  for (std::size_t rep = 0; rep < reps.size(); ++rep) {
    if (reps[rep].failed) {
      ++failures;
      continue;
    }
    for (std::size_t t = 0; t < reps[rep].estimates.size(); ++t) {
      const Eigen::VectorXd& est = reps[rep].estimates[t];
      for (int j = 0; j < est.size(); ++j) {
        csv << rep << ',' << (t + 1) << ',' << j << ',' << fmt(est[j]) << ','
            << fmt(reps[rep].sigmas[t](j, j)) << '\n';
      }
    }
  }
  write_file(dir / "stable_trajectories.csv", csv.str());

  json summary;
  summary["kind"] = "stable-sim";
  summary["config"] = config_echo(cfg);
  summary["eps"] = cfg.stable_sim_eps;
  summary["failures"] = failures;
  summary["reps"] = reps.size();
  write_file(dir / "summary.json", summary.dump(2) + "\n");
}

void write_qq_outputs(const std::vector<std::pair<double, double>>& pairs, double correlation,
                      int skipped, const ExperimentConfig& cfg) {
  const auto dir = prepare_out_dir(cfg);
  std::ostringstream csv;
  csv << "k,empirical_q,chi2_q\n";
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    csv << k << ',' << fmt(pairs[k].first) << ',' << fmt(pairs[k].second) << '\n';
  }
  write_file(dir / "qq.csv", csv.str());

  json summary;
  summary["kind"] = "qq";
  summary["config"] = config_echo(cfg);
  summary["eps"] = cfg.stable_sim_eps;
  summary["t"] = cfg.qq_t;
  summary["correlation"] = correlation;
  summary["skipped_singular"] = skipped;
  write_file(dir / "summary.json", summary.dump(2) + "\n");
}

namespace {

int run_qq_command(const ExperimentConfig& cfg) {
  if (cfg.qq_t < 1 || cfg.qq_t > cfg.stable.T) {
    throw ConfigError("qq: t must lie in [1, T]");
  }
  const std::vector<StableRep> batch = run_stable_batch(cfg, cfg.stable_sim_eps, 0);
  const Theta theta0 = Theta::single(cfg.stable.theta0);
  const StableTruth truth =
      gaussian_stable_truth(cfg.stable_sim_eps, cfg.stable.sigma_diag, theta0, cfg.qq_t);
  std::vector<Theta> estimates, truths;
  std::vector<Eigen::MatrixXd> covariances;
  for (const StableRep& rep : batch) {
    if (rep.failed) continue;
    estimates.push_back(Theta::single(rep.estimates[cfg.qq_t - 1]));
    covariances.push_back(rep.sigmas[cfg.qq_t - 1]);
    truths.push_back(truth.theta_t);
  }
  int skipped = 0;
  const auto pairs = qq_data(estimates, covariances, truths, cfg.stable.N, &skipped);
  const double corr = qq_correlation(pairs);
  write_qq_outputs(pairs, corr, skipped, cfg);
  std::cout << "qq correlation at eps=" << cfg.stable_sim_eps << ", t=" << cfg.qq_t << ": "
            << corr << "\n";
  return 0;
}

int run_truth_command(const std::string& family, const ExperimentConfig& cfg, int t) {
  json out;
  if (family == "gaussian") {
    const Theta theta0 = Theta::single(cfg.stable.theta0);
    const StableTruth truth =
        gaussian_stable_truth(cfg.stable_sim_eps, cfg.stable.sigma_diag, theta0, t);
    out["family"] = "gaussian";
    out["eps"] = cfg.stable_sim_eps;
    out["t"] = t;
    out["theta_t"] = vector_to_json(truth.theta_t.flatten());
    out["sigma_t"] = matrix_to_json(truth.sigma_t);
    out["theta_ps"] = vector_to_json(truth.theta_ps.flatten());
  } else if (family == "location") {
    const OptimalTruth truth =
        location_optimal_truth(cfg.optimal.b, cfg.optimal.beta1, cfg.optimal.sigma);
    out["family"] = "location";
    out["beta_star"] = truth.beta_star;
    out["theta_po"] = truth.theta_po;
    out["grid_minimizer"] = truth.grid_minimizer;
  } else {
    throw ConfigError("truth: family must be gaussian or location");
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"Statistical inference toolkit for decision-dependent prediction"};
  app.fallthrough();

  std::string config_path;
  ExperimentConfig defaults;
  std::uint64_t seed = defaults.seed;
  std::string out_dir = defaults.out_dir;
  int workers = defaults.workers;
  double alpha = defaults.alpha;
  bool paper_scale = false;

  auto* opt_config = app.add_option("--config", config_path, "JSON config file");
  auto* opt_seed = app.add_option("--seed", seed, "RNG seed");
  auto* opt_out = app.add_option("--out", out_dir, "output directory");
  auto* opt_workers = app.add_option("--workers", workers, "worker threads (0 = hardware)");
  auto* opt_alpha = app.add_option("--alpha", alpha, "confidence level");
  auto* opt_paper = app.add_flag("--paper-scale", paper_scale,
                                 "reference-protocol sample sizes and replication counts");

  std::string target = "stable";
  double eps_single = -1.0;
  std::vector<double> eps_grid, misspec_grid;
  int reps = -1, n_samples = -1, t_steps = -1, n_mc = -1, n_tilde = -1, n_is = -1,
      inner_m = -1, qq_t = -1;
  double eps_mis_single = -1.0;

  CLI::App* cov = app.add_subcommand("coverage", "coverage-rate experiment");
  cov->add_option("--target", target, "stable | optimal");
  cov->add_option("--eps", eps_single, "single sensitivity (replaces the grid)");
  cov->add_option("--eps-grid", eps_grid, "sensitivity grid");
  cov->add_option("--misspec-grid", misspec_grid, "misspecification grid");
  cov->add_option("--reps", reps, "replications");
  cov->add_option("--n", n_samples, "samples per step / pairs");
  cov->add_option("--t-steps", t_steps, "retraining steps T");
  cov->add_option("--n-mc", n_mc, "Jacobian Monte Carlo draws");
  cov->add_option("--n-tilde", n_tilde, "Monte Carlo theta draws");
  cov->add_option("--n-is", n_is, "importance-sampling draws");
  cov->add_option("--inner-m", inner_m, "inner resampling count M");

  CLI::App* ssim = app.add_subcommand("stable-sim", "dump retraining trajectories");
  ssim->add_option("--eps", eps_single, "sensitivity");
  ssim->add_option("--reps", reps, "replications");
  ssim->add_option("--n", n_samples, "samples per step");
  ssim->add_option("--t-steps", t_steps, "retraining steps T");
  ssim->add_option("--n-mc", n_mc, "Jacobian Monte Carlo draws");

  CLI::App* osim = app.add_subcommand("optimal-sim", "per-replication plug-in estimates");
  osim->add_option("--eps-mis", eps_mis_single, "single misspecification (replaces the grid)");
  osim->add_option("--misspec-grid", misspec_grid, "misspecification grid");
  osim->add_option("--reps", reps, "replications");
  osim->add_option("--n", n_samples, "pairs N");
  osim->add_option("--n-tilde", n_tilde, "Monte Carlo theta draws");
  osim->add_option("--n-is", n_is, "importance-sampling draws");
  osim->add_option("--inner-m", inner_m, "inner resampling count M");

  CLI::App* qq = app.add_subcommand("qq", "Mahalanobis quantile-quantile data");
  qq->add_option("--eps", eps_single, "sensitivity");
  qq->add_option("--t", qq_t, "trajectory step");
  qq->add_option("--reps", reps, "replications");
  qq->add_option("--n", n_samples, "samples per step");
  qq->add_option("--n-mc", n_mc, "Jacobian Monte Carlo draws");

  std::string family = "gaussian";
  int truth_t = 3;
  std::vector<double> theta0_in, sigma_diag_in;
  double b_in = -1.0, beta1_in = -10.0, beta2_in = -10.0, sigma_in = -1.0;
  CLI::App* truth = app.add_subcommand("truth", "closed-form ground truth");
  truth->add_option("--family", family, "gaussian | location");
  truth->add_option("--eps", eps_single, "sensitivity");
  truth->add_option("--t", truth_t, "step");
  truth->add_option("--theta0", theta0_in, "initial parameter");
  truth->add_option("--sigma-diag", sigma_diag_in, "variance diagonal");
  auto* opt_b = truth->add_option("--b", b_in, "location intercept");
  auto* opt_beta1 = truth->add_option("--beta1", beta1_in, "location slope");
  auto* opt_beta2 = truth->add_option("--beta2", beta2_in, "quadratic coefficient");
  auto* opt_sigma = truth->add_option("--sigma", sigma_in, "noise standard deviation");

  app.require_subcommand(1);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 2;
  }

  try {
    ExperimentConfig cfg;
    if (opt_config->count() > 0) cfg = load_config_file(config_path);
    if (opt_paper->count() > 0 || paper_scale) cfg.apply_paper_scale();
    if (opt_seed->count() > 0) cfg.seed = seed;
    if (opt_out->count() > 0) cfg.out_dir = out_dir;
    if (opt_workers->count() > 0) cfg.workers = workers;
    if (opt_alpha->count() > 0) cfg.alpha = alpha;
    apply_env_seed(cfg);

    if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) throw ConfigError("alpha must be in (0, 1)");
    if (reps > 0) {
      cfg.stable.reps = reps;
      cfg.optimal.reps = reps;
    }
    if (n_samples > 0) {
      cfg.stable.N = n_samples;
      cfg.optimal.N = n_samples;
    }
    if (t_steps > 0) cfg.stable.T = t_steps;
    if (n_mc > 0) cfg.stable.n_mc = n_mc;
    if (n_tilde > 0) cfg.optimal.n_tilde = n_tilde;
    if (n_is > 0) cfg.optimal.n_is = n_is;
    if (inner_m > 0) cfg.optimal.inner_m = inner_m;
    if (!eps_grid.empty()) cfg.stable.eps_grid = eps_grid;
    if (!misspec_grid.empty()) cfg.optimal.misspec_grid = misspec_grid;
    if (eps_single >= 0.0) {
      cfg.stable.eps_grid = {eps_single};
      cfg.stable_sim_eps = eps_single;
    }
    if (eps_mis_single >= 0.0) cfg.optimal.misspec_grid = {eps_mis_single};
    if (qq_t > 0) cfg.qq_t = qq_t;

    if (cov->parsed()) {
      cfg.target = target;
      if (cfg.target == "stable") {
        const CoverageReport report = run_coverage_stable(cfg);
        write_stable_coverage_outputs(report, cfg);
        std::cout << "coverage (stable) written to " << cfg.out_dir << " ("
                  << report.total_failures << " failed replications)\n";
      } else if (cfg.target == "optimal") {
        const OptimalReport report = run_coverage_optimal(cfg);
        write_optimal_outputs(report, cfg);
        std::cout << "coverage (optimal) written to " << cfg.out_dir << " ("
                  << report.coverage.total_failures << " failed replications)\n";
      } else {
        throw ConfigError("coverage: target must be stable or optimal");
      }
      return 0;
    }
    if (ssim->parsed()) {
      const std::vector<StableRep> batch = run_stable_batch(cfg, cfg.stable_sim_eps, 0);
      write_stable_sim_outputs(batch, cfg);
      std::cout << "stable-sim written to " << cfg.out_dir << "\n";
      return 0;
    }
    if (osim->parsed()) {
      const OptimalReport report = run_coverage_optimal(cfg);
      write_optimal_outputs(report, cfg);
      std::cout << "optimal-sim written to " << cfg.out_dir << " ("
                << report.coverage.total_failures << " failed replications)\n";
      return 0;
    }
    if (qq->parsed()) {
      return run_qq_command(cfg);
    }
    if (truth->parsed()) {
      if (!theta0_in.empty()) {
        cfg.stable.theta0 =
            Eigen::Map<Eigen::VectorXd>(theta0_in.data(), static_cast<int>(theta0_in.size()));
      }
      if (!sigma_diag_in.empty()) {
        cfg.stable.sigma_diag = Eigen::Map<Eigen::VectorXd>(
            sigma_diag_in.data(), static_cast<int>(sigma_diag_in.size()));
      }
      if (eps_single >= 0.0) cfg.stable_sim_eps = eps_single;
      if (opt_b->count() > 0) cfg.optimal.b = b_in;
      if (opt_beta1->count() > 0) cfg.optimal.beta1 = beta1_in;
      if (opt_beta2->count() > 0) cfg.optimal.beta2 = beta2_in;
      if (opt_sigma->count() > 0) cfg.optimal.sigma = sigma_in;
      return run_truth_command(family, cfg, truth_t);
    }
    throw ConfigError("no subcommand given");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace perfinf
