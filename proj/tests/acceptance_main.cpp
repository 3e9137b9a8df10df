// Acceptance suite: one line per criterion, exit nonzero on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "slim/engine.hpp"
#include "slim/harness.hpp"
#include "slim/inference.hpp"
#include "slim/linalg.hpp"
#include "slim/oracle.hpp"
#include "slim/refine.hpp"

using namespace slim;

namespace {

int failures = 0;

void report(int criterion, bool pass, const std::string& detail, double seconds) {
  std::printf("%s  criterion %2d  %s  (%.1fs)\n", pass ? "PASS" : "FAIL", criterion,
              detail.c_str(), seconds);
  std::fflush(stdout);
  if (!pass) ++failures;
}

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), pattern, a, b, c);
  return buf;
}

LinearIvDesign accept_design() {
  LinearIvDesign design;
  design.d = 2;
  design.d_g = 4;
  design.theta = (Eigen::VectorXd(2) << 1.0, -0.5).finished();
  return design;
}

Eigen::VectorXd closed_form_gmm(const Dataset& data, int d, int d_g, const Eigen::MatrixXd& W) {
  Eigen::MatrixXd sqx = Eigen::MatrixXd::Zero(d_g, d);
  Eigen::VectorXd sqy = Eigen::VectorXd::Zero(d_g);
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    const auto x = data.rows.row(i).segment(1, d);
    const auto q = data.rows.row(i).segment(1 + d, d_g);
    sqx.noalias() += q.transpose() * x;
    sqy.noalias() += q.transpose() * data.rows(i, 0);
  }
  sqx /= static_cast<double>(data.n());
  sqy /= static_cast<double>(data.n());
  return (sqx.transpose() * W * sqx).ldlt().solve(sqx.transpose() * W * sqy);
}

// direct double-sum V_t(R) from the iterates
Eigen::MatrixXd direct_v(const std::vector<Eigen::VectorXd>& iterates, const Eigen::MatrixXd& R) {
  const auto t = static_cast<Eigen::Index>(iterates.size());
  const int ell = static_cast<int>(R.rows());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(R.cols());
  for (const auto& th : iterates) mean += th;
  mean /= static_cast<double>(t);
  const Eigen::VectorXd r_mean = R * mean;
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(ell, ell);
  Eigen::VectorXd partial = Eigen::VectorXd::Zero(ell);
  for (Eigen::Index s = 0; s < t; ++s) {
    partial += R * iterates[static_cast<std::size_t>(s)] - r_mean;
    acc += partial * partial.transpose();
  }
  return acc / (static_cast<double>(t) * static_cast<double>(t));
}

void criterion_1() {
  const double t0 = now_seconds();
  Rng meta(90001);
  double worst = 0.0;
  for (int stream = 0; stream < 100; ++stream) {
    const int ell = 1 + static_cast<int>(meta.uniform_below(3));
    const int d = ell + 1 + static_cast<int>(meta.uniform_below(3));
    const auto length = 1 + meta.uniform_below(500);
    Eigen::MatrixXd R(ell, d);
    for (Eigen::Index i = 0; i < R.size(); ++i) R(i) = meta.next_normal();
    RandomScalingState state(ell);
    std::vector<Eigen::VectorXd> iterates;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
    for (std::int64_t t = 1; t <= length; ++t) {
      Eigen::VectorXd theta(d);
      for (int k = 0; k < d; ++k) theta[k] = meta.next_normal();
      iterates.push_back(theta);
      sum += theta;
      rs_update(state, sum / static_cast<double>(t), R);
      const Eigen::MatrixXd direct = direct_v(iterates, R);
      const double scale = std::max(direct.cwiseAbs().maxCoeff(), 1e-12);
      worst = std::max(worst, (state.V() - direct).cwiseAbs().maxCoeff() / scale);
    }
  }
  const double secs = now_seconds() - t0;
  report(1, worst <= 1e-10 && secs < 10.0,
         fmt("random scaling recursion vs direct double sum: max rel err %.2e", worst), secs);
}

void criterion_2() {
  const double t0 = now_seconds();
  const CriticalValueTable table =
      simulate_rs_critical_values(1, {0.05, 0.10}, 2000, 200000, 424242);
  const double cv05 = table.cv(1, 0.05);
  const double cv10 = table.cv(1, 0.10);
  const double secs = now_seconds() - t0;
  const bool pass =
      std::abs(cv05 - 6.747) <= 0.15 && std::abs(cv10 - 5.323) <= 0.15 && secs < 120.0;
  report(2, pass, fmt("pivotal critical values: cv(.05) %.3f vs 6.747, cv(.10) %.3f vs 5.323",
                      cv05, cv10),
         secs);
}

void criterion_3() {
  const double t0 = now_seconds();
  const LinearIvDesign design = accept_design();
  const MomentModel model = model_from_linear_iv(design);
  const Eigen::MatrixXd w = Eigen::MatrixXd::Identity(4, 4);
  const Dataset data = generate_linear_iv(design, 2000, 555);

  const Eigen::VectorXd closed = closed_form_gmm(data, 2, 4, w);
  const GmmSolveReport solved = solve_full_gmm(model, data, w, Eigen::VectorXd::Zero(2));
  const double solver_gap = (solved.theta_hat - closed).norm();

  WarmStartConfig ws;
  ws.B_ws = 64;
  ws.E_ws = 1;
  std::vector<double> gaps;
  for (int seed = 0; seed < 50; ++seed) {
    Rng stream(Rng::derive(556, seed));
    const Eigen::VectorXd start = run_warm_start(model, data, ws, Eigen::VectorXd::Zero(2), stream);
    const double gamma0 = select_gamma0(model, data, start, ws, 32, 5.0, 10000,
                                        Rng::derive(557, seed));
    IterationState state(start, stream);
    const RunResult run = run_first_order(model, data, LearningRate(gamma0, 0.501, 0),
                                          BatchSchedule(32, 32), state, 40000);
    gaps.push_back((run.theta_bar - closed).norm());
  }
  const double median_gap = lower_median(gaps);
  const double secs = now_seconds() - t0;
  const bool pass = solved.converged && solver_gap < 1e-10 && median_gap <= 0.02 && secs < 120.0;
  report(3, pass,
         fmt("oracle equivalence: solver gap %.1e, median SLIM-to-GMM distance %.4f", solver_gap,
             median_gap),
         secs);
}

ExperimentConfig coverage_config() {
  ExperimentConfig cfg;
  cfg.dgp = DgpKind::linear_iv;
  cfg.linear_iv = accept_design();
  cfg.n = 5000;
  cfg.reps = 500;
  cfg.pipeline = Pipeline::first_order;
  cfg.N = 10000;
  cfg.B_g = 32;
  cfg.B_G0 = 32;
  WarmStartConfig ws;
  ws.B_ws = 64;
  ws.E_ws = 1;
  cfg.warm_start = ws;
  cfg.s0 = 0.5;
  cfg.infer_random_scaling = true;
  cfg.infer_plugin = false;
  cfg.targets = {0};
  cfg.nominal_level = 0.95;
  cfg.seed = 2024;
  cfg.parallel_workers = 1;
  return cfg;
}

double criterion_4() {
  const double t0 = now_seconds();
  const McReport report_rs = run_experiment(coverage_config());
  const double coverage = report_rs.metric("random_scaling", "theta0", "coverage");
  const double secs = now_seconds() - t0;
  report(4, coverage >= 0.92 && coverage <= 0.98 && secs < 600.0,
         fmt("random scaling coverage %.3f in [0.92, 0.98]", coverage), secs);
  return coverage;
}

void criterion_5() {
  const double t0 = now_seconds();
  ExperimentConfig cfg = coverage_config();
  cfg.pipeline = Pipeline::second_order;
  cfg.N = 5000;
  cfg.T = 15000;
  cfg.M_MB = 2000;
  cfg.weight_estimator = WeightEstimator::minibatch;
  cfg.infer_random_scaling = false;
  cfg.infer_plugin = true;
  cfg.seed = 2025;
  const McReport rep = run_experiment(cfg);
  const double coverage = rep.metric("plugin", "theta0", "coverage");
  const double secs = now_seconds() - t0;
  report(5, coverage >= 0.92 && coverage <= 0.99 && secs < 900.0,
         fmt("plug-in coverage after refinement %.3f in [0.92, 0.99]", coverage), secs);
}

ExperimentConfig jtest_config(double contamination) {
  ExperimentConfig cfg;
  cfg.dgp = DgpKind::linear_iv;
  cfg.linear_iv = accept_design();
  cfg.linear_iv.contamination = contamination;
  cfg.n = 20000;
  cfg.reps = 500;
  cfg.pipeline = Pipeline::second_order;
  cfg.N = 5000;
  cfg.T = 15000;
  cfg.B_g = 512;
  cfg.B_G0 = 512;
  WarmStartConfig ws;
  ws.B_ws = 64;
  ws.E_ws = 1;
  cfg.warm_start = ws;
  cfg.s0 = 2.0;
  cfg.M_MB = 2000;
  cfg.infer_random_scaling = false;
  cfg.jtest_plugin = true;
  cfg.jtest_debiased = true;
  cfg.jtest_online = true;
  cfg.targets = {0};
  cfg.seed = 3030;
  cfg.parallel_workers = 1;
  return cfg;
}

double criterion_6() {
  const double t0 = now_seconds();
  const McReport rep = run_experiment(jtest_config(0.0));
  const double debiased = rep.metric("jtest_debiased", "all", "rejection_rate");
  const double plugin = rep.metric("jtest_plugin", "all", "rejection_rate");
  const double online = rep.metric("jtest_online", "all", "rejection_rate");
  const double secs = now_seconds() - t0;
  const bool pass = debiased >= 0.03 && debiased <= 0.08 && plugin <= debiased &&
                    online <= debiased && secs < 1200.0;
  report(6, pass,
         fmt("J-test size: debiased %.3f in [0.03, 0.08]; plug-in %.3f and online %.3f below it",
             debiased, plugin, online),
         secs);
  return debiased;
}

void criterion_7(double rate_c0) {
  const double t0 = now_seconds();
  const McReport rep1 = run_experiment(jtest_config(1.0));
  const McReport rep2 = run_experiment(jtest_config(2.0));
  const double r1 = rep1.metric("jtest_debiased", "all", "rejection_rate");
  const double r2 = rep2.metric("jtest_debiased", "all", "rejection_rate");
  const double secs = now_seconds() - t0;
  const bool pass = rate_c0 < r1 && r1 < r2 && secs < 1200.0;
  report(7, pass, fmt("J-test power ordering: %.3f -> %.3f -> %.3f", rate_c0, r1, r2), secs);
}

void criterion_8() {
  const double t0 = now_seconds();
  LinearIvDesign design = accept_design();
  design.instrument_corr = 0.5;
  const MomentModel model = model_from_linear_iv(design);
  const std::int64_t N_first = 6000, N_second = 2000, T_second = 6000;
  WarmStartConfig ws;
  ws.B_ws = 64;
  ws.E_ws = 1;
  int wins = 0;
  const int reps = 200;
  for (int r = 0; r < reps; ++r) {
    const Dataset data = generate_linear_iv(design, 2000, Rng::derive(787, r));
    Rng stream(Rng::derive(788, r));
    const Eigen::VectorXd start = run_warm_start(model, data, ws, Eigen::VectorXd::Zero(2), stream);
    const double gamma0 = select_gamma0(model, data, start, ws, 32, 5.0, 10000,
                                        Rng::derive(789, r));
    // identity-weight first-order arm
    IterationState first_state(start, stream);
    const RunResult first = run_first_order(model, data, LearningRate(gamma0, 0.501, 0),
                                            BatchSchedule(32, 32), first_state, N_first);
    // second-order arm from the same warm start and stream
    IterationState second_state(start, stream);
    run_first_order(model, data, LearningRate(gamma0, 0.501, 0), BatchSchedule(32, 32),
                    second_state, N_second);
    const RefinementOperators ops =
        build_operators(model, data, second_state.theta_bar, 1000, 32,
                        WeightEstimator::minibatch, 0, second_state.rng);
    const RunResult refined = run_refinement(
        model, data, second_state, ops, LearningRate(gamma0, 0.501, N_second),
        BatchSchedule(32, 32, BatchGrowth::logarithmic, N_second), T_second - N_second);
    if ((refined.theta_bar - design.theta).norm() < (first.theta_bar - design.theta).norm())
      ++wins;
  }
  const double share = static_cast<double>(wins) / reps;
  const double secs = now_seconds() - t0;
  report(8, share >= 0.80 && secs < 600.0,
         fmt("second-order error beats first order in %.1f%% of 200 paired runs", 100.0 * share),
         secs);
}

void criterion_9() {
  const double t0 = now_seconds();
  const LinearIvDesign design = accept_design();
  const Dataset iv_data = generate_linear_iv(design, 500, 901);
  const MomentModel iv_model = model_from_linear_iv(design);
  const EasiDgpConfig easi_cfg = EasiDgpConfig::reduced_default();
  const Dataset easi_data = generate_easi(easi_cfg, 500, 902);
  const MomentModel easi_model = model_from_easi(easi_cfg);

  Rng rng(903);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd th_iv(2);
    th_iv << rng.next_normal(), rng.next_normal();
    worst = std::max(worst,
                     jacobian_fd_error(iv_model, iv_data, th_iv, rng.uniform_below(500)));
    Eigen::VectorXd th_easi = easi_cfg.pack_true_theta();
    for (Eigen::Index i = 0; i < th_easi.size(); ++i) th_easi[i] += 0.1 * rng.next_normal();
    worst = std::max(worst,
                     jacobian_fd_error(easi_model, easi_data, th_easi, rng.uniform_below(500)));
  }
  const double secs = now_seconds() - t0;
  report(9, worst <= 1e-5 && secs < 5.0,
         fmt("analytic Jacobians vs finite differences: max scaled error %.2e", worst), secs);
}

void criterion_10() {
  const double t0 = now_seconds();
  const std::string dir1 = "accept10_w1", dir8 = "accept10_w8";
  std::filesystem::create_directories(dir1);
  std::filesystem::create_directories(dir8);
  ExperimentConfig cfg = coverage_config();
  cfg.parallel_workers = 1;
  run_experiment(cfg, dir1);
  cfg.parallel_workers = 8;
  run_experiment(cfg, dir8);
  const auto slurp = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string a = slurp(dir1 + "/summary.csv");
  const std::string b = slurp(dir8 + "/summary.csv");
  const double secs = now_seconds() - t0;
  const bool pass = !a.empty() && a == b;
  report(10, pass, fmt("worker counts 1 and 8 give byte-identical summaries (%.0f bytes)",
                       static_cast<double>(a.size())),
         secs);
  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir8);
}

// informational, not gated: stage cost of SLIM vs the full-sample solver at
// n = 50000 on both designs
void timing_note() {
  const Eigen::Index n = 50000;
  {
    const LinearIvDesign design = accept_design();
    const MomentModel model = model_from_linear_iv(design);
    const Dataset data = generate_linear_iv(design, n, 7001);
    double t0 = now_seconds();
    two_step_efficient_gmm(model, data, Eigen::VectorXd::Zero(2));
    const double gn = now_seconds() - t0;
    t0 = now_seconds();
    IterationState state(Eigen::VectorXd::Zero(2), Rng(7002));
    run_first_order(model, data, LearningRate(0.05, 0.501, 0), BatchSchedule(32, 32), state,
                    10000);
    const double slim_stage = now_seconds() - t0;
    std::printf("note  linear IV n=50000: first-order stage %.2fs vs two-step Gauss-Newton %.2fs\n",
                slim_stage, gn);
  }
  {
    const EasiDgpConfig cfg = EasiDgpConfig::reduced_default();
    const MomentModel model = model_from_easi(cfg);
    const Dataset data = generate_easi(cfg, n, 7003);
    Eigen::VectorXd start = cfg.pack_true_theta();
    Rng rng(7004);
    for (Eigen::Index i = 0; i < start.size(); ++i) start[i] += 0.05 * rng.next_normal();
    double t0 = now_seconds();
    two_step_efficient_gmm(model, data, start);
    const double gn = now_seconds() - t0;
    t0 = now_seconds();
    IterationState state(start, Rng(7005));
    run_first_order(model, data, LearningRate(0.01, 0.501, 0), BatchSchedule(32, 32), state,
                    10000);
    const double slim_stage = now_seconds() - t0;
    std::printf("note  EASI n=50000: first-order stage %.2fs vs two-step Gauss-Newton %.2fs\n",
                slim_stage, gn);
  }
}

}  // namespace

int main() {
  std::printf("SLIM acceptance suite\n");
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  const double c0 = criterion_6();
  criterion_7(c0);
  criterion_8();
  criterion_9();
  criterion_10();
  timing_note();
  std::printf(failures == 0 ? "all criteria passed\n" : "%d criteria FAILED\n", failures);
  return failures == 0 ? 0 : 1;
}
