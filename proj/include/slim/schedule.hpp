#pragma once

#include <cmath>
#include <cstdint>

#include "slim/errors.hpp"
#include "slim/model.hpp"
#include "slim/rng.hpp"

namespace slim {

// Polynomial learning rate gamma_0 ((t + Nstar) v 1)^{-a}. Nstar is zero for
// the first-order stage and equals the first-stage iteration count for the
// refinement stage.
struct LearningRate {
  double gamma0 = 0.1;
  double a = 0.501;
  std::int64_t Nstar = 0;

  LearningRate(double gamma0_in, double a_in, std::int64_t Nstar_in = 0)
      : gamma0(gamma0_in), a(a_in), Nstar(Nstar_in) {
    if (gamma0 <= 0.0) throw ConfigError("LearningRate: gamma0 must be positive");
    if (!(a > 0.5 && a < 1.0)) throw ConfigError("LearningRate: a must lie in (1/2, 1)");
    if (Nstar < 0) throw ConfigError("LearningRate: Nstar must be nonnegative");
  }

  double at(std::int64_t t) const {
    const auto base = std::max<std::int64_t>(t + Nstar, 1);
    return gamma0 * std::pow(static_cast<double>(base), -a);
  }
};

double rate_at(const LearningRate& lr, std::int64_t t);

enum class BatchGrowth { constant, logarithmic };

// Jacobian mini-batch size schedule. In logarithmic mode the size grows as
// B_G0 + floor(log(t - N)) once past the stage start N.
struct BatchSchedule {
  int B_g = 32;
  int B_G0 = 32;
  BatchGrowth growth = BatchGrowth::constant;
  std::int64_t N = 0;

  BatchSchedule(int B_g_in, int B_G0_in, BatchGrowth growth_in = BatchGrowth::constant,
                std::int64_t N_in = 0)
      : B_g(B_g_in), B_G0(B_G0_in), growth(growth_in), N(N_in) {
    if (B_g < 1 || B_G0 < 1) throw ConfigError("BatchSchedule: batch sizes must be positive");
    if (N < 0) throw ConfigError("BatchSchedule: stage start must be nonnegative");
  }

  int jacobian_batch(std::int64_t t) const {
    if (growth == BatchGrowth::constant || t <= N) return B_G0;
    return B_G0 + static_cast<int>(std::floor(std::log(static_cast<double>(t - N))));
  }
};

// Epoch-reshuffled warm-start stage configuration; per-epoch rate is
// gamma0_ws e^{-a}.
struct WarmStartConfig {
  int B_ws = 64;
  int E_ws = 1;
  double gamma0_ws = 0.1;
  double a = 0.501;

  void validate() const {
    if (B_ws < 1 || E_ws < 1) throw ConfigError("WarmStartConfig: B_ws and E_ws must be positive");
    if (gamma0_ws <= 0.0) throw ConfigError("WarmStartConfig: gamma0_ws must be positive");
    if (!(a > 0.5 && a < 1.0)) throw ConfigError("WarmStartConfig: a must lie in (1/2, 1)");
  }
  double epoch_rate(int e) const { return gamma0_ws * std::pow(static_cast<double>(e), -a); }
};

// Rule-of-thumb gamma_0 = (1 / (s_0 Psi_0)) * B_main / B_ws, where Psi_0 is
// the median spectral norm of G~'G~ over mini-batches of size B_ws evaluated
// at the warm-start estimate. When the number of disjoint batches exceeds
// batch_index_set_limit, a random subset of batches of that size is used.
double select_gamma0(const MomentModel& model, const Dataset& data,
                     const Eigen::VectorXd& theta_ws, const WarmStartConfig& cfg, int B_main,
                     double s0, std::int64_t batch_index_set_limit, std::uint64_t seed);

}  // namespace slim
