#include "slim/refine.hpp"

#include "slim/errors.hpp"
#include "slim/linalg.hpp"

namespace slim {

RefinementOperators build_operators(const MomentModel& model, const Dataset& data,
                                    const Eigen::VectorXd& theta_bar_N, int M_MB, int B_g,
                                    WeightEstimator mode, int kronecker_block, Rng& rng,
                                    Eigen::Index phi_row_cap) {
  if (!theta_bar_N.allFinite()) throw ConfigError("build_operators: theta_bar_N must be finite");
  RefinementOperators ops;
  ops.M_MB = M_MB;
  ops.Phi = full_jacobian(model, data, theta_bar_N, phi_row_cap);

  Eigen::MatrixXd outer = Eigen::MatrixXd::Zero(model.d_g, model.d_g);
  if (mode == WeightEstimator::minibatch) {
    if (M_MB < 1) throw ConfigError("build_operators: M_MB must be >= 1 in minibatch mode");
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(B_g));
    Eigen::VectorXd g_batch(model.d_g);
    for (int l = 0; l < M_MB; ++l) {
      for (auto& i : idx) i = rng.uniform_below(data.n());
      batch_moments(model, data, idx, theta_bar_N, g_batch);
      outer.selfadjointView<Eigen::Lower>().rankUpdate(g_batch);
    }
    outer.triangularView<Eigen::StrictlyUpper>() = outer.transpose();
    outer *= static_cast<double>(B_g) / static_cast<double>(M_MB);
  } else {
    outer = full_moment_outer(model, data, theta_bar_N);
  }

  if (kronecker_block > 0) {
    if (model.d_g % kronecker_block != 0)
      throw ConfigError("build_operators: kronecker_block must divide d_g");
    for (Eigen::Index i = 0; i < outer.rows(); ++i)
      for (Eigen::Index j = 0; j < outer.cols(); ++j)
        if (i / kronecker_block != j / kronecker_block) outer(i, j) = 0.0;
  }
  if (outer.cwiseAbs().maxCoeff() == 0.0)
    throw RefinementError("build_operators: moment outer product is identically zero");

  ops.W = pseudo_inverse_sym(outer);
  int rank = 0;
  ops.precond = pseudo_inverse_sym(ops.Phi.transpose() * ops.W * ops.Phi, 1e-10, &rank);
  ops.rank_deficient = rank < model.d;
  return ops;
}

void step_second_order(IterationState& state, const MomentModel& model, const Dataset& data,
                       const LearningRate& lr, const BatchSchedule& schedule,
                       const RefinementOperators& ops, const MiniBatchPair& batch,
                       EngineWorkspace& ws, bool use_preconditioner) {
  const std::int64_t t = state.t + 1;  // local refinement step
  const double gamma = lr.at(t);
  if (static_cast<std::int64_t>(batch.jacobian_indices.size()) !=
      schedule.jacobian_batch(lr.Nstar + t))
    throw ConfigError("step_second_order: batch not sized per the schedule");
  ws.resize(model.d, model.d_g);
  batch_jacobian(model, data, batch.jacobian_indices, state.theta, ws.G_batch);
  batch_moments(model, data, batch.moment_indices, state.theta, ws.g_batch);
  ws.direction.noalias() = ws.G_batch.transpose() * (ops.W * ws.g_batch);
  if (use_preconditioner) ws.direction = ops.precond * ws.direction;
  state.theta -= gamma * ws.direction;
  if (!state.theta.allFinite() || state.theta.cwiseAbs().maxCoeff() > 1e8)
    throw DivergenceError(lr.Nstar + t, state.theta);
  state.t = t;
  if (t == 1) {
    state.theta_bar = state.theta;
  } else {
    // same arithmetic as the first-order average so identity operators
    // reproduce it bit for bit
    const double w = 1.0 / static_cast<double>(t);
    state.theta_bar += w * (state.theta - state.theta_bar);
  }
}

RunResult run_refinement(const MomentModel& model, const Dataset& data, IterationState& state,
                         const RefinementOperators& ops, const LearningRate& lr,
                         const BatchSchedule& schedule, std::int64_t T_minus_N,
                         const std::vector<StepObserver>& hooks, bool use_preconditioner,
                         std::int64_t trace_stride) {
  if (T_minus_N < 1) throw ConfigError("run_refinement: need T > N");
  const std::int64_t N = state.t;
  IterationState local(state.theta, state.rng);
  EngineWorkspace ws;
  RunResult result;
  const std::int64_t snapshots = trace_stride > 0 ? T_minus_N / trace_stride : 0;
  result.trace.resize(snapshots, 1 + model.d);
  std::int64_t snap = 0;
  for (std::int64_t s = 1; s <= T_minus_N; ++s) {
    const MiniBatchPair batch =
        draw_minibatch(local, data.n(), schedule.jacobian_batch(N + s), schedule.B_g);
    step_second_order(local, model, data, lr, schedule, ops, batch, ws, use_preconditioner);
    for (const auto& hook : hooks) hook(StepInfo{s, local.theta, local.theta_bar, ws.g_batch});
    if (trace_stride > 0 && s % trace_stride == 0) {
      result.trace(snap, 0) = static_cast<double>(N + s);
      result.trace.row(snap).segment(1, model.d) = local.theta_bar.transpose();
      ++snap;
    }
  }
  state.theta = local.theta;
  state.theta_bar = local.theta_bar;  // restarted average over the stage
  state.t = N + T_minus_N;
  state.rng = local.rng;
  result.theta = state.theta;
  result.theta_bar = state.theta_bar;
  return result;
}

}  // namespace slim
