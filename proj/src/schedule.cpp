#include "slim/schedule.hpp"

#include <numeric>
#include <vector>

#include "slim/linalg.hpp"

namespace slim {

double rate_at(const LearningRate& lr, std::int64_t t) {
  if (t < 1) throw ConfigError("rate_at: t must be >= 1");
  return lr.at(t);
}

double select_gamma0(const MomentModel& model, const Dataset& data,
                     const Eigen::VectorXd& theta_ws, const WarmStartConfig& cfg, int B_main,
                     double s0, std::int64_t batch_index_set_limit, std::uint64_t seed) {
  cfg.validate();
  if (!theta_ws.allFinite()) throw ConfigError("select_gamma0: theta_ws must be finite");
  if (B_main < 1 || s0 <= 0.0) throw ConfigError("select_gamma0: need B_main >= 1 and s0 > 0");
  const Eigen::Index n = data.n();
  const std::int64_t n_batches = n / cfg.B_ws;
  if (n_batches < 1) throw ConfigError("select_gamma0: no full batch available (n < B_ws)");

  std::vector<std::int64_t> batches(static_cast<std::size_t>(n_batches));
  std::iota(batches.begin(), batches.end(), 0);
  if (batch_index_set_limit > 0 && n_batches > batch_index_set_limit) {
    // sample a large random subset of batch indices without replacement
    Rng rng(seed);
    for (std::int64_t i = 0; i < batch_index_set_limit; ++i) {
      const std::int64_t j = i + rng.uniform_below(n_batches - i);
      std::swap(batches[static_cast<std::size_t>(i)], batches[static_cast<std::size_t>(j)]);
    }
    batches.resize(static_cast<std::size_t>(batch_index_set_limit));
  }

  std::vector<double> norms;
  norms.reserve(batches.size());
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(cfg.B_ws));
  Eigen::MatrixXd jac(model.d_g, model.d);
  for (const std::int64_t batch : batches) {
    for (int i = 0; i < cfg.B_ws; ++i) idx[static_cast<std::size_t>(i)] = batch * cfg.B_ws + i;
    batch_jacobian(model, data, idx, theta_ws, jac);
    norms.push_back(gram_spectral_norm(jac));
  }
  const double psi0 = lower_median(std::move(norms));
  if (psi0 <= 0.0) throw TuningError("select_gamma0: Psi_0 is zero (all-zero Jacobians)");
  return (1.0 / (s0 * psi0)) * static_cast<double>(B_main) / static_cast<double>(cfg.B_ws);
}

}  // namespace slim
