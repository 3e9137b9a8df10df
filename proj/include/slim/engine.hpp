#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <vector>

#include "slim/model.hpp"
#include "slim/rng.hpp"
#include "slim/schedule.hpp"

namespace slim {

// Two disjoint index lists drawn uniformly with replacement from one stream:
// the first B_G positions feed the Jacobian, the rest feed the moments.
struct MiniBatchPair {
  std::vector<Eigen::Index> jacobian_indices;
  std::vector<Eigen::Index> moment_indices;
};

// State of a stochastic run: current iterate, Polyak average, step count and
// the single sampling stream the run owns.
struct IterationState {
  Eigen::VectorXd theta;
  Eigen::VectorXd theta_bar;
  std::int64_t t = 0;
  Rng rng;

  IterationState(Eigen::VectorXd theta0, Rng rng_in)
      : theta(std::move(theta0)), theta_bar(theta), rng(rng_in) {}
};

MiniBatchPair draw_minibatch(IterationState& state, Eigen::Index n, int B_G, int B_g);

// View passed to per-iteration observers; t is the local (stage) step index.
struct StepInfo {
  std::int64_t t;
  const Eigen::VectorXd& theta;
  const Eigen::VectorXd& theta_bar;
  const Eigen::VectorXd& g_batch;
};
using StepObserver = std::function<void(const StepInfo&)>;

// Scratch reused across steps; g_batch/G_batch hold the last batch means.
struct EngineWorkspace {
  Eigen::VectorXd g_batch;
  Eigen::MatrixXd G_batch;
  Eigen::VectorXd direction;

  void resize(int d, int d_g) {
    g_batch.resize(d_g);
    G_batch.resize(d_g, d);
    direction.resize(d);
  }
};

// One first-order update theta <- theta - gamma_t G~' g~ followed by the
// recursive Polyak average. weight_root, when given, is a fixed symmetric
// PSD square root applied to both batch means.
void step_first_order(IterationState& state, const MomentModel& model, const Dataset& data,
                      const LearningRate& lr, const MiniBatchPair& batch, EngineWorkspace& ws,
                      const Eigen::MatrixXd* weight_root = nullptr);

struct RunResult {
  Eigen::VectorXd theta;
  Eigen::VectorXd theta_bar;
  Eigen::MatrixXd trace;  // rows (t, theta_bar') at the decimation stride
};

// Runs N first-order steps from state (observers see every step). The state
// keeps the final iterate, average, count and stream position.
RunResult run_first_order(const MomentModel& model, const Dataset& data, const LearningRate& lr,
                          const BatchSchedule& schedule, IterationState& state, std::int64_t N,
                          const std::vector<StepObserver>& hooks = {},
                          const Eigen::MatrixXd* weight_root = nullptr,
                          std::int64_t trace_stride = 0);

// Epoch-reshuffled nested-loop warm start; returns the global Polyak average
// of all updates, the initial value for the main stage.
Eigen::VectorXd run_warm_start(const MomentModel& model, const Dataset& data,
                               const WarmStartConfig& cfg, const Eigen::VectorXd& theta0, Rng& rng,
                               const Eigen::MatrixXd* weight_root = nullptr);

}  // namespace slim
