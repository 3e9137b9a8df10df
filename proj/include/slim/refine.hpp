#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "slim/engine.hpp"
#include "slim/model.hpp"
#include "slim/schedule.hpp"

namespace slim {

// Fixed operators of the second-order stage: Phi_n and W are computed once
// at theta_bar_N and reused for every refinement update.
struct RefinementOperators {
  Eigen::MatrixXd Phi;      // d_g x d sample Jacobian at theta_bar_N
  Eigen::MatrixXd W;        // d_g x d_g weight (mini-batch or full-sample)
  Eigen::MatrixXd precond;  // (Phi' W Phi)^+
  std::int64_t N = 0;       // first-stage iteration count
  int M_MB = 0;
  bool rank_deficient = false;
};

enum class WeightEstimator { minibatch, fullsample };

// Builds Phi_n, W and the preconditioner. In minibatch mode W is the
// pseudo-inverse of (B_g / M_MB) sum_l g~_l g~_l' over M_MB fresh uniform
// batches drawn from rng; fullsample mode uses the inverse moment outer
// product. kronecker_block > 0 zeroes cross-blocks of the outer product
// before inversion (equation independence restriction); phi_row_cap limits
// the rows averaged into Phi_n for very large samples.
RefinementOperators build_operators(const MomentModel& model, const Dataset& data,
                                    const Eigen::VectorXd& theta_bar_N, int M_MB, int B_g,
                                    WeightEstimator mode, int kronecker_block, Rng& rng,
                                    Eigen::Index phi_row_cap = 1000000);

// One preconditioned update
//   theta <- theta - gamma_t (Phi' W Phi)^+ G~' W g~
// with the restarted average over the refinement stage. state.t counts
// refinement steps locally (1-based); lr carries Nstar = N.
void step_second_order(IterationState& state, const MomentModel& model, const Dataset& data,
                       const LearningRate& lr, const BatchSchedule& schedule,
                       const RefinementOperators& ops, const MiniBatchPair& batch,
                       EngineWorkspace& ws, bool use_preconditioner = true);

// Runs the refinement stage from the first-stage final iterate held in
// state.theta, for T - N steps (global t = N+1..T). The Polyak average is
// restarted at the first refinement step. Passing use_preconditioner = false
// drops (Phi' W Phi)^+ and gives the first-order refined-weight variant.
RunResult run_refinement(const MomentModel& model, const Dataset& data, IterationState& state,
                         const RefinementOperators& ops, const LearningRate& lr,
                         const BatchSchedule& schedule, std::int64_t T_minus_N,
                         const std::vector<StepObserver>& hooks = {},
                         bool use_preconditioner = true, std::int64_t trace_stride = 0);

}  // namespace slim
