#include "slim/jtest.hpp"

#include "slim/errors.hpp"
#include "slim/linalg.hpp"

namespace slim {

JTestResult j_plugin(const MomentModel& model, const Dataset& data, const Eigen::VectorXd& theta,
                     const Eigen::MatrixXd& W, double tau) {
  if (model.d_g <= model.d) throw ConfigError("j_plugin: model is not overidentified");
  JTestResult result;
  result.variant = JVariant::plugin;
  result.df = model.d_g - model.d;
  result.tau = tau;
  const Eigen::VectorXd gbar = full_moments(model, data, theta);
  result.statistic = static_cast<double>(data.n()) * gbar.dot(W * gbar);
  result.p_value = 1.0 - chi2_mixture_cdf(result.statistic, result.df, model.d, tau);
  return result;
}

JTestResult j_debiased(const MomentModel& model, const Dataset& data,
                       const Eigen::VectorXd& theta) {
  if (model.d_g <= model.d) throw ConfigError("j_debiased: model is not overidentified");
  JTestResult result;
  result.variant = JVariant::debiased;
  result.df = model.d_g - model.d;

  const Eigen::VectorXd gbar = full_moments(model, data, theta);
  const Eigen::MatrixXd phi = full_jacobian(model, data, theta);
  const Eigen::MatrixXd w = pseudo_inverse_sym(full_moment_outer(model, data, theta));
  int rank = 0;
  const Eigen::MatrixXd bread_inv = pseudo_inverse_sym(phi.transpose() * w * phi, 1e-10, &rank);
  result.rank_warning = rank < model.d;

  const Eigen::VectorXd wg = w * gbar;
  const Eigen::VectorXd proj = phi.transpose() * wg;
  result.statistic =
      static_cast<double>(data.n()) * (gbar.dot(wg) - proj.dot(bread_inv * proj));
  result.p_value = 1.0 - chi2_cdf(result.statistic, result.df);
  return result;
}

JTestResult j_online(const OnlineGbarState& state, const Eigen::MatrixXd& W_MB, Eigen::Index n,
                     std::int64_t T_minus_N, int B_g, int d) {
  if (state.count == 0) throw ConfigError("j_online: empty moment average");
  const int d_g = static_cast<int>(state.g_bar.size());
  if (d_g <= d) throw ConfigError("j_online: model is not overidentified");
  JTestResult result;
  result.variant = JVariant::online;
  result.df = d_g - d;
  const double nbg = static_cast<double>(T_minus_N) * static_cast<double>(B_g);
  result.tau = static_cast<double>(n) / nbg;
  const double deflator = 1.0 / (1.0 / static_cast<double>(n) + 1.0 / nbg);
  const double quad = state.g_bar.dot(W_MB * state.g_bar);
  result.statistic = deflator * quad;
  result.statistic_scaled = static_cast<double>(n) * quad;
  result.p_value = 1.0 - chi2_cdf(result.statistic, result.df);
  return result;
}

}  // namespace slim
