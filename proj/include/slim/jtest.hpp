#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "slim/model.hpp"

namespace slim {

// Running average of the moment mini-batches observed during the refinement
// stage, gbar*_t.
struct OnlineGbarState {
  Eigen::VectorXd g_bar;
  std::int64_t count = 0;

  explicit OnlineGbarState(int d_g) : g_bar(Eigen::VectorXd::Zero(d_g)) {}
  void update(const Eigen::Ref<const Eigen::VectorXd>& g_tilde) {
    ++count;
    if (count == 1) {
      g_bar = g_tilde;
    } else {
      g_bar += (g_tilde - g_bar) / static_cast<double>(count);
    }
  }
};

enum class JVariant { plugin, debiased, online };

struct JTestResult {
  double statistic = 0.0;
  int df = 0;
  double tau = 0.0;
  double p_value = 1.0;
  JVariant variant = JVariant::plugin;
  // n-scaled form of the online statistic, referenced to (1+tau) chi-square
  double statistic_scaled = 0.0;
  bool rank_warning = false;
};

// J = n gbar(theta)' W gbar(theta) against the chi2_{d_g-d} + tau chi2_d
// mixture, with tau = n / ((T-N) B_g) supplied by the caller.
JTestResult j_plugin(const MomentModel& model, const Dataset& data, const Eigen::VectorXd& theta,
                     const Eigen::MatrixXd& W, double tau);

// Projection-corrected J_D = n gbar' (W - W Phi (Phi'W Phi)^{-1} Phi'W) gbar
// with full-sample Phi and W at theta, against chi2_{d_g-d}.
JTestResult j_debiased(const MomentModel& model, const Dataset& data,
                       const Eigen::VectorXd& theta);

// Online J* = (1/n + 1/((T-N) B_g))^{-1} gbar*' W_MB gbar* against
// chi2_{d_g-d}.
JTestResult j_online(const OnlineGbarState& state, const Eigen::MatrixXd& W_MB, Eigen::Index n,
                     std::int64_t T_minus_N, int B_g, int d);

}  // namespace slim
