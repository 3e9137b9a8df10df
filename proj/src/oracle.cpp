#include "slim/oracle.hpp"

#include "slim/linalg.hpp"

namespace slim {

namespace {

double gmm_objective(const MomentModel& model, const Dataset& data, const Eigen::MatrixXd& W,
                     const Eigen::VectorXd& theta) {
  const Eigen::VectorXd gbar = full_moments(model, data, theta);
  return gbar.dot(W * gbar);
}

}  // namespace

GmmSolveReport solve_full_gmm(const MomentModel& model, const Dataset& data,
                              const Eigen::MatrixXd& W, const Eigen::VectorXd& theta0,
                              int max_iter, double tol) {
  if (W.rows() != model.d_g || W.cols() != model.d_g)
    throw ConfigError("solve_full_gmm: W must be d_g x d_g");
  GmmSolveReport report;
  report.theta_hat = theta0;
  double objective = gmm_objective(model, data, W, theta0);

  for (int it = 1; it <= max_iter; ++it) {
    report.iterations = it;
    const Eigen::VectorXd gbar = full_moments(model, data, report.theta_hat);
    const Eigen::MatrixXd Gbar = full_jacobian(model, data, report.theta_hat);
    const Eigen::MatrixXd GtW = Gbar.transpose() * W;
    const Eigen::VectorXd grad = GtW * gbar;
    report.gradient_norm = grad.norm();
    if (report.gradient_norm <= tol) {
      report.converged = true;
      break;
    }
    const Eigen::MatrixXd hess = GtW * Gbar;
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    double alpha = 1.0;
    bool accepted = false;
    for (int halving = 0; halving < 30; ++halving) {
      const Eigen::VectorXd candidate = report.theta_hat - alpha * step;
      const double cand_obj = gmm_objective(model, data, W, candidate);
      if (std::isfinite(cand_obj) && cand_obj < objective) {
        report.theta_hat = candidate;
        objective = cand_obj;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;  // line search exhausted; report as non-converged
  }
  report.objective = objective;
  const Eigen::VectorXd gbar = full_moments(model, data, report.theta_hat);
  const Eigen::MatrixXd Gbar = full_jacobian(model, data, report.theta_hat);
  report.gradient_norm = (Gbar.transpose() * W * gbar).norm();
  if (report.gradient_norm <= tol) report.converged = true;
  return report;
}

GmmSolveReport two_step_efficient_gmm(const MomentModel& model, const Dataset& data,
                                      const Eigen::VectorXd& theta0, const Eigen::MatrixXd* W1,
                                      int max_iter, double tol) {
  const Eigen::MatrixXd first_weight =
      W1 ? *W1 : Eigen::MatrixXd::Identity(model.d_g, model.d_g).eval();
  const GmmSolveReport step1 = solve_full_gmm(model, data, first_weight, theta0, max_iter, tol);
  const Eigen::MatrixXd omega = full_moment_outer(model, data, step1.theta_hat);
  // theta_hat is invariant to scaling W; normalizing to unit average
  // eigenvalue keeps the gradient tolerance scale-free
  const double scale = omega.trace() / static_cast<double>(model.d_g);
  const Eigen::MatrixXd W2 = pseudo_inverse_sym(omega) * (scale > 0.0 ? scale : 1.0);
  return solve_full_gmm(model, data, W2, step1.theta_hat, max_iter, tol);
}

}  // namespace slim
