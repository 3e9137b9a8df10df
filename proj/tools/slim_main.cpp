#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "slim/harness.hpp"
#include "slim/inference.hpp"
#include "slim/linalg.hpp"
#include "slim/model.hpp"

namespace {

int cmd_run(const std::string& config_path, const std::string& out_dir) {
  const slim::ExperimentConfig config = slim::parse_config_file(config_path);
  std::filesystem::create_directories(out_dir);
  const slim::McReport report = slim::run_experiment(config, out_dir);
  std::cout << "wrote " << out_dir << "/summary.csv (" << report.metrics.size() << " metrics, "
            << report.diverged << " diverged replications)\n";
  for (const auto& [method, target, metric, value] : report.metrics)
    std::cout << "  " << method << " " << target << " " << metric << " = " << value << "\n";
  return 0;
}

int cmd_estimate(const std::string& config_path, const std::string& trace_path) {
  const slim::ExperimentConfig config = slim::parse_config_file(config_path);
  slim::run_single_estimate(config, std::cout, trace_path);
  return 0;
}

int cmd_critvals(int ell, int reps, int path_length, std::uint64_t seed,
                 const std::string& out_path) {
  const std::vector<double> alphas = {0.01, 0.025, 0.05, 0.10};
  const slim::CriticalValueTable table =
      slim::simulate_rs_critical_values(ell, alphas, path_length, reps, seed);
  slim::write_critical_values_csv(table, out_path);
  std::cout << "wrote " << out_path << "\n";
  for (const auto& row : table.rows)
    std::cout << "  ell=" << row.ell << " alpha=" << row.alpha << " cv=" << row.cv << "\n";
  return 0;
}

bool check(const char* name, bool ok) {
  std::cout << (ok ? "PASS  " : "FAIL  ") << name << "\n";
  return ok;
}

// Fast invariant suite covering the recursions and analytic derivatives.
int cmd_selftest() {
  using namespace slim;
  bool all = true;

  {
    // random scaling recursion vs the direct double sum, ell = 2
    Rng rng(7);
    const int steps = 120, ell = 2;
    Eigen::MatrixXd R(ell, 3);
    R << 1, 0, 0, 0, 1, 1;
    RandomScalingState state(ell);
    std::vector<Eigen::VectorXd> bars;
    Eigen::VectorXd theta_sum = Eigen::VectorXd::Zero(3);
    double worst = 0.0;
    std::vector<Eigen::VectorXd> iterates;
    for (int t = 1; t <= steps; ++t) {
      Eigen::VectorXd theta(3);
      for (int i = 0; i < 3; ++i) theta[i] = rng.next_normal();
      iterates.push_back(theta);
      theta_sum += theta;
      const Eigen::VectorXd bar = theta_sum / t;
      rs_update(state, bar, R);
      // direct form
      Eigen::MatrixXd direct = Eigen::MatrixXd::Zero(ell, ell);
      Eigen::VectorXd partial = Eigen::VectorXd::Zero(ell);
      const Eigen::VectorXd rbar = R * bar;
      for (int s = 0; s < t; ++s) {
        partial += R * iterates[static_cast<std::size_t>(s)] - rbar;
        direct += partial * partial.transpose();
      }
      direct /= static_cast<double>(t) * static_cast<double>(t);
      worst = std::max(worst, (state.V() - direct).cwiseAbs().maxCoeff() /
                                  std::max(direct.cwiseAbs().maxCoeff(), 1e-30));
    }
    all &= check("random scaling recursion equals direct double sum", worst <= 1e-10);
  }

  {
    // analytic Jacobians vs central differences on both built-in models
    LinearIvDesign design;
    design.theta = (Eigen::VectorXd(2) << 1.0, -0.5).finished();
    const Dataset iv_data = generate_linear_iv(design, 200, 11);
    const MomentModel iv_model = model_from_linear_iv(design);
    const EasiDgpConfig easi_cfg = EasiDgpConfig::reduced_default();
    const Dataset easi_data = generate_easi(easi_cfg, 200, 12);
    const MomentModel easi_model = model_from_easi(easi_cfg);
    Rng rng(13);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      Eigen::VectorXd th_iv(iv_model.d);
      for (int i = 0; i < iv_model.d; ++i) th_iv[i] = rng.next_normal();
      worst = std::max(worst, jacobian_fd_error(iv_model, iv_data, th_iv,
                                                rng.uniform_below(iv_data.n())));
      Eigen::VectorXd th_easi = easi_cfg.pack_true_theta();
      for (Eigen::Index i = 0; i < th_easi.size(); ++i) th_easi[i] += 0.05 * rng.next_normal();
      worst = std::max(worst, jacobian_fd_error(easi_model, easi_data, th_easi,
                                                rng.uniform_below(easi_data.n())));
    }
    all &= check("analytic Jacobians match finite differences (1e-5)", worst <= 1e-5);
  }

  {
    // deterministic streams
    const LinearIvDesign design = [] {
      LinearIvDesign d;
      d.theta = (Eigen::VectorXd(2) << 1.0, -0.5).finished();
      return d;
    }();
    const Dataset a = generate_linear_iv(design, 500, 99);
    const Dataset b = generate_linear_iv(design, 500, 99);
    all &= check("generators are bit-identical for equal seeds", a.rows == b.rows);
  }

  {
    // chi-square quantile sanity
    const double q = chi2_quantile(0.95, 1.0);
    all &= check("chi2 quantile(0.95, 1) = 3.8415", std::abs(q - 3.8414588206941254) < 1e-8);
  }

  std::cout << (all ? "selftest passed\n" : "selftest FAILED\n");
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slim: stochastic approximation for overidentified nonlinear GMM"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "slim_out", trace_path, cv_out = "rs_critical_values.csv";
  int ell = 10, reps = 200000, path_length = 2000;
  std::uint64_t seed = 20240801;

  auto* run = app.add_subcommand("run", "Monte Carlo experiment from a config file");
  run->add_option("--config", config_path, "JSON config file")->required();
  run->add_option("--out", out_dir, "output directory");

  auto* estimate = app.add_subcommand("estimate", "single-dataset estimation (no Monte Carlo)");
  estimate->add_option("--config", config_path, "JSON config file")->required();
  estimate->add_option("--trace", trace_path, "optional trace CSV path");

  auto* critvals = app.add_subcommand("critvals", "regenerate random scaling critical values");
  critvals->add_option("--ell", ell, "max restriction rank");
  critvals->add_option("--reps", reps, "simulated paths per rank");
  critvals->add_option("--path-length", path_length, "Wiener path discretization");
  critvals->add_option("--seed", seed, "simulation seed");
  critvals->add_option("--out", cv_out, "output CSV");

  auto* selftest = app.add_subcommand("selftest", "run the invariant suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, out_dir);
    if (estimate->parsed()) return cmd_estimate(config_path, trace_path);
    if (critvals->parsed()) return cmd_critvals(ell, reps, path_length, seed, cv_out);
    if (selftest->parsed()) return cmd_selftest();
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
