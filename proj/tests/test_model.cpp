#include <doctest.h>

#include <Eigen/Dense>
#include <cstdio>
#include <fstream>

#include "slim/model.hpp"
#include "slim/oracle.hpp"
#include "test_util.hpp"

using namespace slim;

TEST_CASE("linear IV with no errors and theta_o = 0 has identically zero moments") {
  LinearIvDesign design;
  design.d = 1;
  design.d_g = 1;
  design.theta = Eigen::VectorXd::Zero(1);
  design.error_scale = 0.0;
  design.endogeneity = 0.0;
  const Dataset data = generate_linear_iv(design, 50, 1);
  const MomentModel model = model_from_linear_iv(design);
  Eigen::VectorXd g(1);
  const Eigen::VectorXd theta = Eigen::VectorXd::Zero(1);
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    model.eval_g(data.rows.row(i), theta, g);
    CHECK(g[0] == doctest::Approx(0.0).epsilon(1e-14));
  }
}

TEST_CASE("linear IV Jacobian is exact at random points") {
  const LinearIvDesign design = test::default_iv_design();
  const Dataset data = generate_linear_iv(design, 2000, 2);
  const MomentModel model = model_from_linear_iv(design);
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::VectorXd theta(2);
    theta << rng.next_normal(), rng.next_normal();
    CHECK(jacobian_fd_error(model, data, theta, rng.uniform_below(data.n())) < 1e-5);
  }
}

TEST_CASE("linear IV: Jacobian mean is constant in theta (affine moments)") {
  const LinearIvDesign design = test::default_iv_design();
  const Dataset data = generate_linear_iv(design, 500, 4);
  const MomentModel model = model_from_linear_iv(design);
  const Eigen::MatrixXd at_zero = full_jacobian(model, data, Eigen::VectorXd::Zero(2));
  const Eigen::MatrixXd elsewhere =
      full_jacobian(model, data, (Eigen::VectorXd(2) << 3.0, -7.0).finished());
  CHECK((at_zero - elsewhere).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("closed-form linear GMM matches the iterative solve to 1e-10") {
  const LinearIvDesign design = test::default_iv_design();
  const Dataset data = generate_linear_iv(design, 2000, 5);
  const MomentModel model = model_from_linear_iv(design);
  const Eigen::MatrixXd w = Eigen::MatrixXd::Identity(4, 4);
  const Eigen::VectorXd closed = test::closed_form_linear_gmm(data, 2, 4, w);
  const GmmSolveReport report = solve_full_gmm(model, data, w, Eigen::VectorXd::Zero(2));
  CHECK(report.converged);
  CHECK((report.theta_hat - closed).norm() < 1e-10);
}

TEST_CASE("generate_linear_iv is deterministic and rejects n = 0") {
  const LinearIvDesign design = test::default_iv_design();
  const Dataset a = generate_linear_iv(design, 300, 9);
  const Dataset b = generate_linear_iv(design, 300, 9);
  CHECK(a.rows == b.rows);
  CHECK_THROWS_AS(generate_linear_iv(design, 0, 9), ConfigError);
}

TEST_CASE("zero endogeneity makes OLS and IV agree within sampling noise [mc]") {
  LinearIvDesign design = test::default_iv_design();
  design.endogeneity = 0.0;
  const Eigen::MatrixXd w = Eigen::MatrixXd::Identity(4, 4);
  const Dataset data = generate_linear_iv(design, 100000, 10);
  const Eigen::VectorXd ols = test::ols_linear(data, 2);
  const Eigen::VectorXd iv = test::closed_form_linear_gmm(data, 2, 4, w);
  CHECK((ols - iv).norm() < 0.02);
  CHECK((ols - design.theta).norm() < 0.02);

  // with endogeneity the gap is an order of magnitude larger
  LinearIvDesign endo = test::default_iv_design();
  endo.endogeneity = 1.0;
  const Dataset data2 = generate_linear_iv(endo, 100000, 10);
  const Eigen::VectorXd ols2 = test::ols_linear(data2, 2);
  const Eigen::VectorXd iv2 = test::closed_form_linear_gmm(data2, 2, 4, w);
  CHECK((ols2 - iv2).norm() > 0.05);
  CHECK((iv2 - endo.theta).norm() < 0.02);
}

TEST_CASE("EASI: zero coefficient blocks and zero noise give zero shares") {
  EasiDgpConfig cfg = EasiDgpConfig::reduced_default();
  for (auto& block : cfg.b) block.setZero();
  cfg.C.setZero();
  cfg.D.setZero();
  for (auto& mat : cfg.A) mat.setZero();
  cfg.B.setZero();
  cfg.sigma.setZero();
  const Dataset data = generate_easi(cfg, 100, 21);
  CHECK(data.rows.leftCols(2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("EASI: with B = 0 and A_l = 0 the utility reduces to x - p'w_mean") {
  EasiDgpConfig cfg = EasiDgpConfig::reduced_default();
  for (auto& mat : cfg.A) mat.setZero();
  cfg.B.setZero();
  cfg.D.setZero();
  cfg.C.setZero();
  for (int r = 1; r < 6; ++r) cfg.b[r].setZero();
  cfg.b[0].setZero();
  cfg.sigma.setZero();
  // shares are then exactly zero, so any record's implied y can be read off
  // by regenerating with b_1 = e_1: w_0 = y
  cfg.b[1] = (Eigen::VectorXd(2) << 1.0, 0.0).finished();
  const Dataset data = generate_easi(cfg, 200, 22);
  const int K = 2;
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    const double x = data.rows(i, K);
    const auto p = data.rows.row(i).segment(K + 1, K);
    const double expected = x - p.dot(cfg.w_mean);
    CHECK(data.rows(i, 0) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("EASI generator is bit-deterministic in the seed") {
  const EasiDgpConfig cfg = EasiDgpConfig::reduced_default();
  const Dataset a = generate_easi(cfg, 400, 77);
  const Dataset b = generate_easi(cfg, 400, 77);
  CHECK(a.rows == b.rows);
}

TEST_CASE("EASI moment conditions at the true parameters are centered [mc]") {
  const EasiDgpConfig cfg = EasiDgpConfig::reduced_default();
  const Eigen::Index n = 5000;
  const Dataset data = generate_easi(cfg, n, 23);
  const MomentModel model = model_from_easi(cfg);
  const Eigen::VectorXd theta = cfg.pack_true_theta();
  const Eigen::VectorXd gbar = full_moments(model, data, theta);

  // per-component sd estimate
  Eigen::VectorXd second = Eigen::VectorXd::Zero(model.d_g);
  Eigen::VectorXd g(model.d_g);
  for (Eigen::Index i = 0; i < n; ++i) {
    model.eval_g(data.rows.row(i), theta, g);
    second += g.cwiseAbs2();
  }
  second /= static_cast<double>(n);
  const Eigen::VectorXd sd = (second - gbar.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
  CHECK(gbar.norm() < 5.0 * sd.norm() / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("EASI dimension counting matches the combinatorial formula") {
  const EasiDgpConfig cfg = EasiDgpConfig::reduced_default();
  // enumerate free parameters: 6 b's + C + D per equation, plus the upper
  // triangles of A_0..A_L and B
  const int K = cfg.J - 1;
  int count = 0;
  for (int j = 0; j < K; ++j) count += 6 + 2 * cfg.L;
  for (int l = 0; l <= cfg.L; ++l) count += K * (K + 1) / 2;
  count += K * (K + 1) / 2;
  CHECK(cfg.n_params() == count);
  CHECK(cfg.n_params() == 25);
  CHECK(cfg.n_instruments() == 14);
  CHECK(cfg.n_moments() == 28);
  CHECK(cfg.n_moments() > cfg.n_params());  // overidentified

  // the full-scale configuration reproduces the published count
  EasiDgpConfig full;
  full.J = 9;
  full.L = 5;
  CHECK(full.n_params() == 380);
  CHECK(full.n_moments() == (6 + 2 * 5 + (5 + 2) * (9 - 1)) * (9 - 1));
}

TEST_CASE("EASI Jacobian matches central finite differences at random points") {
  const EasiDgpConfig cfg = EasiDgpConfig::reduced_default();
  const Dataset data = generate_easi(cfg, 300, 31);
  const MomentModel model = model_from_easi(cfg);
  Rng rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd theta = cfg.pack_true_theta();
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] += 0.1 * rng.next_normal();
    CHECK(jacobian_fd_error(model, data, theta, rng.uniform_below(data.n())) < 1e-5);
  }
}

TEST_CASE("degenerate EASI nests a linear IV structure") {
  // J = 2, L = 0: one share equation, scalar A_0 and B; Jacobian still
  // passes the numeric check
  EasiDgpConfig cfg;
  cfg.J = 2;
  cfg.L = 0;
  cfg.b.assign(6, Eigen::VectorXd::Zero(1));
  cfg.b[0][0] = 0.4;
  cfg.b[1][0] = 0.05;
  cfg.C.resize(1, 0);
  cfg.D.resize(1, 0);
  cfg.A.assign(1, Eigen::MatrixXd::Constant(1, 1, 0.03));
  cfg.B = Eigen::MatrixXd::Constant(1, 1, 0.02);
  cfg.sigma = Eigen::VectorXd::Constant(1, 0.05);
  cfg.w_mean = Eigen::VectorXd::Constant(1, 0.5);
  CHECK(cfg.n_params() == 8);
  const Dataset data = generate_easi(cfg, 200, 41);
  const MomentModel model = model_from_easi(cfg);
  Rng rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::VectorXd theta = cfg.pack_true_theta();
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] += 0.1 * rng.next_normal();
    CHECK(jacobian_fd_error(model, data, theta, rng.uniform_below(data.n())) < 1e-5);
  }
}

TEST_CASE("EASI generation fails on a singular utility transform") {
  EasiDgpConfig cfg = EasiDgpConfig::reduced_default();
  cfg.B = (Eigen::MatrixXd(2, 2) << 200.0, 0.0, 0.0, 200.0).finished();
  // craft a base row whose price vector makes 1 - p'Bp/2 vanish
  cfg.base = Eigen::MatrixXd::Zero(1, 4);
  cfg.base(0, 1) = 0.1;  // p = (0.1, 0): p'Bp/2 = 1
  CHECK_THROWS_AS(generate_easi(cfg, 10, 50), GenerationError);
}

TEST_CASE("batch fast paths agree with the per-record definition") {
  const LinearIvDesign design = test::default_iv_design();
  const Dataset data = generate_linear_iv(design, 300, 57);
  MomentModel model = model_from_linear_iv(design);
  MomentModel slow = model;
  slow.eval_g_batch = nullptr;
  slow.eval_G_batch = nullptr;
  Rng rng(58);
  std::vector<Eigen::Index> idx(24);
  Eigen::VectorXd g_fast(4), g_slow(4);
  Eigen::MatrixXd jac_fast(4, 2), jac_slow(4, 2);
  for (int trial = 0; trial < 10; ++trial) {
    for (auto& i : idx) i = rng.uniform_below(data.n());
    const Eigen::VectorXd theta =
        (Eigen::VectorXd(2) << rng.next_normal(), rng.next_normal()).finished();
    batch_moments(model, data, idx, theta, g_fast);
    batch_moments(slow, data, idx, theta, g_slow);
    CHECK((g_fast - g_slow).cwiseAbs().maxCoeff() < 1e-14);
    batch_jacobian(model, data, idx, theta, jac_fast);
    batch_jacobian(slow, data, idx, theta, jac_slow);
    CHECK((jac_fast - jac_slow).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("weight-root wrapping premultiplies both g and G") {
  const LinearIvDesign design = test::default_iv_design();
  const Dataset data = generate_linear_iv(design, 100, 61);
  const MomentModel base = model_from_linear_iv(design);
  Eigen::MatrixXd root(4, 4);
  root.setIdentity();
  root(0, 0) = 2.0;
  root(1, 0) = root(0, 1) = 0.3;
  const MomentModel weighted = with_weight_root(base, root);
  Eigen::VectorXd g_raw(4), g_wt(4);
  Eigen::MatrixXd jac_raw(4, 2), jac_wt(4, 2);
  const Eigen::VectorXd theta = (Eigen::VectorXd(2) << 0.4, 0.1).finished();
  base.eval_g(data.rows.row(3), theta, g_raw);
  weighted.eval_g(data.rows.row(3), theta, g_wt);
  CHECK((g_wt - root * g_raw).cwiseAbs().maxCoeff() < 1e-14);
  base.eval_G(data.rows.row(3), theta, jac_raw);
  weighted.eval_G(data.rows.row(3), theta, jac_wt);
  CHECK((jac_wt - root * jac_raw).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("dataset validation rejects empty or non-finite samples") {
  Dataset empty;
  empty.rows.resize(0, 3);
  CHECK_THROWS_AS(empty.validate(), ConfigError);
  Dataset bad;
  bad.rows = RowMatrixXd::Zero(4, 2);
  bad.rows(2, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.rows(2, 1) = 0.0;
  CHECK_NOTHROW(bad.validate());
}

TEST_CASE("dataset CSV dump carries the schema header") {
  const LinearIvDesign design = test::default_iv_design();
  const Dataset data = generate_linear_iv(design, 5, 71);
  const std::string path = "test_dataset_dump.csv";
  write_csv(data, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "y,x0,x1,q0,q1,q2,q3");
  int lines = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 5);
  std::remove(path.c_str());
}
