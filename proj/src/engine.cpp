#include "slim/engine.hpp"

#include <cmath>
#include <numeric>

#include "slim/errors.hpp"

namespace slim {

namespace {
constexpr double kDivergenceCeiling = 1e8;

void guard_finite(const Eigen::VectorXd& theta, std::int64_t t) {
  if (!theta.allFinite() || theta.cwiseAbs().maxCoeff() > kDivergenceCeiling)
    throw DivergenceError(t, theta);
}

void polyak_update(Eigen::VectorXd& bar, const Eigen::VectorXd& theta, std::int64_t count) {
  if (count == 1) {
    bar = theta;
    return;
  }
  const double w = 1.0 / static_cast<double>(count);
  bar += w * (theta - bar);
}

}  // namespace

MiniBatchPair draw_minibatch(IterationState& state, Eigen::Index n, int B_G, int B_g) {
  if (n < 1) throw ConfigError("draw_minibatch: n must be >= 1");
  MiniBatchPair batch;
  batch.jacobian_indices.resize(static_cast<std::size_t>(B_G));
  batch.moment_indices.resize(static_cast<std::size_t>(B_g));
  for (auto& i : batch.jacobian_indices) i = state.rng.uniform_below(n);
  for (auto& i : batch.moment_indices) i = state.rng.uniform_below(n);
  return batch;
}

void step_first_order(IterationState& state, const MomentModel& model, const Dataset& data,
                      const LearningRate& lr, const MiniBatchPair& batch, EngineWorkspace& ws,
                      const Eigen::MatrixXd* weight_root) {
  const std::int64_t t = state.t + 1;
  const double gamma = lr.at(t);
  ws.resize(model.d, model.d_g);
  batch_jacobian(model, data, batch.jacobian_indices, state.theta, ws.G_batch);
  batch_moments(model, data, batch.moment_indices, state.theta, ws.g_batch);
  if (weight_root) {
    ws.g_batch = (*weight_root) * ws.g_batch;
    ws.G_batch = (*weight_root) * ws.G_batch;
  }
  ws.direction.noalias() = ws.G_batch.transpose() * ws.g_batch;
  state.theta -= gamma * ws.direction;
  guard_finite(state.theta, t);
  state.t = t;
  polyak_update(state.theta_bar, state.theta, t);
}

RunResult run_first_order(const MomentModel& model, const Dataset& data, const LearningRate& lr,
                          const BatchSchedule& schedule, IterationState& state, std::int64_t N,
                          const std::vector<StepObserver>& hooks,
                          const Eigen::MatrixXd* weight_root, std::int64_t trace_stride) {
  if (N < 1) throw ConfigError("run_first_order: N must be >= 1");
  if (!state.theta.allFinite()) throw ConfigError("run_first_order: theta0 must be finite");
  EngineWorkspace ws;
  RunResult result;
  const std::int64_t start = state.t;
  const std::int64_t snapshots = trace_stride > 0 ? N / trace_stride : 0;
  result.trace.resize(snapshots, 1 + model.d);
  std::int64_t snap = 0;
  for (std::int64_t step = 1; step <= N; ++step) {
    const MiniBatchPair batch =
        draw_minibatch(state, data.n(), schedule.jacobian_batch(start + step), schedule.B_g);
    step_first_order(state, model, data, lr, batch, ws, weight_root);
    for (const auto& hook : hooks) hook(StepInfo{step, state.theta, state.theta_bar, ws.g_batch});
    if (trace_stride > 0 && step % trace_stride == 0) {
      result.trace(snap, 0) = static_cast<double>(step);
      result.trace.row(snap).segment(1, model.d) = state.theta_bar.transpose();
      ++snap;
    }
  }
  result.theta = state.theta;
  result.theta_bar = state.theta_bar;
  return result;
}

Eigen::VectorXd run_warm_start(const MomentModel& model, const Dataset& data,
                               const WarmStartConfig& cfg, const Eigen::VectorXd& theta0, Rng& rng,
                               const Eigen::MatrixXd* weight_root) {
  cfg.validate();
  const Eigen::Index n = data.n();
  const std::int64_t blocks = n / cfg.B_ws;
  if (blocks < 2) throw ConfigError("run_warm_start: need n >= 2 B_ws for the nested loop");

  Eigen::VectorXd theta = theta0;
  Eigen::VectorXd theta_bar = theta0;
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<Eigen::Index> jac_idx(static_cast<std::size_t>(cfg.B_ws));
  std::vector<Eigen::Index> mom_idx(static_cast<std::size_t>(cfg.B_ws));
  Eigen::MatrixXd G_batch(model.d_g, model.d);
  Eigen::VectorXd g_batch(model.d_g);
  Eigen::VectorXd direction(model.d);

  std::int64_t t = 1;
  for (int e = 1; e <= cfg.E_ws; ++e) {
    // Fisher-Yates reshuffle once per epoch
    for (Eigen::Index i = n - 1; i > 0; --i) {
      const Eigen::Index j = rng.uniform_below(i + 1);
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    const double gamma = cfg.epoch_rate(e);
    for (std::int64_t j = 0; j < blocks; ++j) {
      for (std::int64_t k = 0; k < blocks; ++k) {
        if (k == j) continue;
        for (int i = 0; i < cfg.B_ws; ++i) {
          jac_idx[static_cast<std::size_t>(i)] = perm[static_cast<std::size_t>(j * cfg.B_ws + i)];
          mom_idx[static_cast<std::size_t>(i)] = perm[static_cast<std::size_t>(k * cfg.B_ws + i)];
        }
        // G~_j is recomputed at the current iterate for every (j, k) pair
        batch_jacobian(model, data, jac_idx, theta, G_batch);
        batch_moments(model, data, mom_idx, theta, g_batch);
        if (weight_root) {
          g_batch = (*weight_root) * g_batch;
          G_batch = (*weight_root) * G_batch;
        }
        direction.noalias() = G_batch.transpose() * g_batch;
        theta -= gamma * direction;
        guard_finite(theta, t);
        polyak_update(theta_bar, theta, t);
        ++t;
      }
    }
  }
  return theta_bar;
}

}  // namespace slim
