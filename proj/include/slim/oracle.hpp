#pragma once

#include <Eigen/Dense>

#include "slim/model.hpp"

namespace slim {

struct GmmSolveReport {
  Eigen::VectorXd theta_hat;
  double objective = 0.0;      // gbar' W gbar at the solution
  int iterations = 0;
  bool converged = false;
  double gradient_norm = 0.0;  // ||Gbar' W gbar||
};

// Full-sample GMM by damped Gauss-Newton: converges when the gradient norm
// drops below tol; non-convergence is reported, not thrown.
GmmSolveReport solve_full_gmm(const MomentModel& model, const Dataset& data,
                              const Eigen::MatrixXd& W, const Eigen::VectorXd& theta0,
                              int max_iter = 100, double tol = 1e-9);

// First step with W1 (identity when null), re-weight with the inverse moment
// outer product at the first-step solution, re-solve.
GmmSolveReport two_step_efficient_gmm(const MomentModel& model, const Dataset& data,
                                      const Eigen::VectorXd& theta0,
                                      const Eigen::MatrixXd* W1 = nullptr, int max_iter = 100,
                                      double tol = 1e-9);

}  // namespace slim
