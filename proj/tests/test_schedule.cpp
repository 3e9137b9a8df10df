#include <doctest.h>

#include <cmath>

#include "slim/linalg.hpp"
#include "slim/schedule.hpp"
#include "test_util.hpp"

using namespace slim;

TEST_CASE("rate_at evaluates the polynomial schedule") {
  CHECK(rate_at(LearningRate(0.1, 0.501, 0), 1) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(rate_at(LearningRate(1.0, 0.75, 0), 16) == doctest::Approx(0.125).epsilon(1e-15));
  CHECK(rate_at(LearningRate(0.1, 0.501, 20000), 1) ==
        doctest::Approx(0.1 * std::pow(20001.0, -0.501)).epsilon(1e-15));
}

TEST_CASE("learning rate construction enforces the exponent range") {
  CHECK_THROWS_AS(LearningRate(0.1, 0.5, 0), ConfigError);
  CHECK_THROWS_AS(LearningRate(0.1, 1.0, 0), ConfigError);
  CHECK_THROWS_AS(LearningRate(-0.1, 0.7, 0), ConfigError);
}

TEST_CASE("rate_at is non-increasing and linear in gamma0") {
  const LearningRate lr(0.3, 0.61, 5);
  double prev = rate_at(lr, 1);
  for (std::int64_t t = 2; t <= 2000; ++t) {
    const double cur = rate_at(lr, t);
    CHECK(cur <= prev);
    CHECK(cur > 0.0);
    prev = cur;
  }
  const LearningRate scaled(3.0 * 0.3, 0.61, 5);
  for (const std::int64_t t : {1, 7, 93, 1544})
    CHECK(rate_at(scaled, t) == doctest::Approx(3.0 * rate_at(lr, t)).epsilon(1e-15));
}

TEST_CASE("batch schedule: constant and logarithmic growth") {
  const BatchSchedule constant(32, 48, BatchGrowth::constant, 0);
  for (const std::int64_t t : {1LL, 10LL, 100000LL}) CHECK(constant.jacobian_batch(t) == 48);

  const std::int64_t N = 1000;
  const BatchSchedule growing(32, 48, BatchGrowth::logarithmic, N);
  CHECK(growing.jacobian_batch(N) == 48);
  CHECK(growing.jacobian_batch(N + 1) == 48);  // log(1) = 0
  CHECK(growing.jacobian_batch(N + 3) == 49);
  int prev = 0;
  for (std::int64_t t = N + 1; t <= N + 5000; ++t) {
    const int cur = growing.jacobian_batch(t);
    CHECK(cur >= prev);
    CHECK(static_cast<double>(cur - 48) <= std::log(static_cast<double>(t - N)) + 1.0);
    prev = cur;
  }
}

TEST_CASE("select_gamma0: identity Jacobian gives Psi_0 = 1") {
  // constant G = I: ||G'G||_2 = 1 regardless of batching
  MomentModel model;
  model.d = 3;
  model.d_g = 3;
  model.eval_g = [](const Eigen::Ref<const Eigen::RowVectorXd>& rec,
                    const Eigen::Ref<const Eigen::VectorXd>& theta,
                    Eigen::Ref<Eigen::VectorXd> out) { out = theta - rec.transpose(); };
  model.eval_G = [](const Eigen::Ref<const Eigen::RowVectorXd>&,
                    const Eigen::Ref<const Eigen::VectorXd>&, Eigen::Ref<Eigen::MatrixXd> out) {
    out.setIdentity();
  };
  Dataset data;
  data.rows = Eigen::MatrixXd::Zero(256, 3);
  WarmStartConfig ws;
  ws.B_ws = 16;
  const double s0 = 5.0;
  const double g0 = select_gamma0(model, data, Eigen::VectorXd::Zero(3), ws, 64, s0, 10000, 1);
  CHECK(g0 == doctest::Approx(64.0 / (s0 * 16.0)).epsilon(1e-12));

  // doubling B_main doubles gamma0
  const double g0_double =
      select_gamma0(model, data, Eigen::VectorXd::Zero(3), ws, 128, s0, 10000, 1);
  CHECK(g0_double == doctest::Approx(2.0 * g0).epsilon(1e-12));
}

TEST_CASE("select_gamma0: median spectral norm agrees with an eigendecomposition oracle") {
  const LinearIvDesign design = test::default_iv_design();
  const Dataset data = generate_linear_iv(design, 2000, 7);
  const MomentModel model = model_from_linear_iv(design);
  WarmStartConfig ws;
  ws.B_ws = 64;
  const double s0 = 5.0;
  const Eigen::VectorXd theta_ws = Eigen::VectorXd::Zero(2);
  const double got = select_gamma0(model, data, theta_ws, ws, 64, s0, 10000, 3);

  // independent route: full eigendecomposition per batch, lower median
  std::vector<double> norms;
  Eigen::MatrixXd jac(model.d_g, model.d);
  for (Eigen::Index b = 0; b < data.n() / ws.B_ws; ++b) {
    std::vector<Eigen::Index> idx;
    for (int i = 0; i < ws.B_ws; ++i) idx.push_back(b * ws.B_ws + i);
    batch_jacobian(model, data, idx, theta_ws, jac);
    norms.push_back(spectral_norm_sym_direct(jac.transpose() * jac));
  }
  const double psi0 = lower_median(norms);
  CHECK(got == doctest::Approx(1.0 / (s0 * psi0)).epsilon(1e-8));
}

TEST_CASE("select_gamma0 caps the batch index set with a seeded subset") {
  const LinearIvDesign design = test::default_iv_design();
  const Dataset data = generate_linear_iv(design, 4096, 9);
  const MomentModel model = model_from_linear_iv(design);
  WarmStartConfig ws;
  ws.B_ws = 16;  // 256 disjoint batches available
  const Eigen::VectorXd theta_ws = Eigen::VectorXd::Zero(2);
  const double capped = select_gamma0(model, data, theta_ws, ws, 16, 5.0, 40, 11);
  const double capped_again = select_gamma0(model, data, theta_ws, ws, 16, 5.0, 40, 11);
  const double full = select_gamma0(model, data, theta_ws, ws, 16, 5.0, 10000, 11);
  CHECK(capped == capped_again);  // deterministic subset
  CHECK(capped > 0.0);
  // the subsample median sits near the full-partition one
  CHECK(capped / full > 0.5);
  CHECK(capped / full < 2.0);
}

TEST_CASE("select_gamma0 rejects all-zero Jacobians") {
  MomentModel model;
  model.d = 2;
  model.d_g = 2;
  model.eval_g = [](const Eigen::Ref<const Eigen::RowVectorXd>&,
                    const Eigen::Ref<const Eigen::VectorXd>&, Eigen::Ref<Eigen::VectorXd> out) {
    out.setZero();
  };
  model.eval_G = [](const Eigen::Ref<const Eigen::RowVectorXd>&,
                    const Eigen::Ref<const Eigen::VectorXd>&, Eigen::Ref<Eigen::MatrixXd> out) {
    out.setZero();
  };
  Dataset data;
  data.rows = Eigen::MatrixXd::Zero(64, 2);
  WarmStartConfig ws;
  ws.B_ws = 16;
  CHECK_THROWS_AS(select_gamma0(model, data, Eigen::VectorXd::Zero(2), ws, 16, 5.0, 10000, 1),
                  TuningError);
}
