#include "slim/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "slim/linalg.hpp"
#include "slim/rng.hpp"
#include "rs_critical_values_data.hpp"

namespace slim {

void Hypothesis::validate() const {
  if (R.rows() < 1 || R.rows() > R.cols()) throw ConfigError("Hypothesis: need 1 <= ell <= d");
  if (c.size() != R.rows()) throw ConfigError("Hypothesis: c must have length ell");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(R);
  const auto& sv = svd.singularValues();
  if (sv[sv.size() - 1] <= 1e-10 * sv[0]) throw ConfigError("Hypothesis: R is rank deficient");
}

Hypothesis Hypothesis::component(int index, int d, double value) {
  Hypothesis hyp;
  hyp.R = Eigen::MatrixXd::Zero(1, d);
  hyp.R(0, index) = 1.0;
  hyp.c = Eigen::VectorXd::Constant(1, value);
  return hyp;
}

RandomScalingState::RandomScalingState(int ell)
    : a_(Eigen::MatrixXd::Zero(ell, ell)),
      a_comp_(Eigen::MatrixXd::Zero(ell, ell)),
      b_(Eigen::VectorXd::Zero(ell)),
      b_comp_(Eigen::VectorXd::Zero(ell)),
      last_(Eigen::VectorXd::Zero(ell)) {}

void RandomScalingState::reset() {
  a_.setZero();
  a_comp_.setZero();
  b_.setZero();
  b_comp_.setZero();
  last_.setZero();
  t_ = 0;
}

namespace {

// Kahan step: acc += term with running compensation.
inline void kahan_add(double& acc, double& comp, double term) {
  const double y = term - comp;
  const double t = acc + y;
  comp = (t - acc) - y;
  acc = t;
}

}  // namespace

void RandomScalingState::update(const Eigen::Ref<const Eigen::VectorXd>& r_theta_bar) {
  ++t_;
  const double w = static_cast<double>(t_) * static_cast<double>(t_);
  const Eigen::Index ell = b_.size();
  for (Eigen::Index i = 0; i < ell; ++i) {
    kahan_add(b_[i], b_comp_[i], w * r_theta_bar[i]);
    for (Eigen::Index j = 0; j < ell; ++j)
      kahan_add(a_(i, j), a_comp_(i, j), w * r_theta_bar[i] * r_theta_bar[j]);
  }
  last_ = r_theta_bar;
}

Eigen::MatrixXd RandomScalingState::V() const {
  const Eigen::Index ell = b_.size();
  if (t_ == 0) return Eigen::MatrixXd::Zero(ell, ell);
  const double t = static_cast<double>(t_);
  const double sum_sq = t * (t + 1.0) * (2.0 * t + 1.0) / 6.0;
  Eigen::MatrixXd v = a_ - last_ * b_.transpose() - b_ * last_.transpose() +
                      sum_sq * (last_ * last_.transpose());
  return v / (t * t);
}

void rs_update(RandomScalingState& state, const Eigen::VectorXd& theta_bar,
               const Eigen::MatrixXd& R) {
  state.update(R * theta_bar);
}

namespace {

// Symmetric solve of (B_g V) x = m with a condition-number check.
Eigen::VectorXd solve_scaled_v(const Eigen::MatrixXd& bv, const Eigen::VectorXd& m,
                               bool& warn_out) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(bv);
  const auto& vals = es.eigenvalues();
  const double lo = vals[0], hi = vals[vals.size() - 1];
  if (!(lo > 0.0))
    throw InferenceError(
        "random scaling matrix V is singular; run more iterations before testing");
  warn_out = (hi / lo) > 1e12;
  return es.eigenvectors() *
         (es.eigenvectors().transpose() * m).cwiseQuotient(vals.matrix());
}

}  // namespace

InferenceResult rs_wald(const RandomScalingState& state, const Eigen::VectorXd& theta_bar,
                        const Hypothesis& hyp, Eigen::Index n, std::int64_t N_eff, int B_g,
                        WaldMode mode, double alpha) {
  hyp.validate();
  if (mode == WaldMode::plugin) throw ConfigError("rs_wald: mode must be a random scaling mode");
  if (state.count() < 1) throw InferenceError("rs_wald: empty random scaling state");
  const int ell = hyp.ell();
  const Eigen::VectorXd m = hyp.R * theta_bar - hyp.c;
  const Eigen::MatrixXd bv = static_cast<double>(B_g) * state.V();

  InferenceResult result;
  result.mode = mode;
  Eigen::VectorXd solved = solve_scaled_v(bv, m, result.condition_warning);
  const double quad = m.dot(solved);
  const double nbg = static_cast<double>(N_eff) * static_cast<double>(B_g);
  const double tau = (mode == WaldMode::random_scaling_sampling)
                         ? 1.0 / (1.0 / static_cast<double>(n) + 1.0 / nbg)
                         : nbg;
  result.scaling_factor = tau;
  // root-form statistic: for ell = 1 this is the absolute t-ratio, whose
  // published critical values are 6.747 / 5.323
  result.statistic = std::sqrt(std::max(tau * quad, 0.0));
  result.critical_value = rs_critical_value(ell, alpha);
  result.reject = result.statistic > result.critical_value;
  if (ell == 1) {
    const double half = result.critical_value * std::sqrt(bv(0, 0) / tau);
    const double center = (hyp.R * theta_bar)(0);
    result.ci_lower = center - half;
    result.ci_upper = center + half;
  }
  return result;
}

CriticalValueTable simulate_rs_critical_values(int ell_max, const std::vector<double>& alphas,
                                               int path_length, int reps, std::uint64_t seed) {
  if (path_length < 1000) throw ConfigError("simulate_rs_critical_values: path_length >= 1000");
  if (reps < 10000) throw ConfigError("simulate_rs_critical_values: reps >= 10000");
  CriticalValueTable table;
  const double L = static_cast<double>(path_length);

  for (int ell = 1; ell <= ell_max; ++ell) {
    std::vector<double> stats(static_cast<std::size_t>(reps));
    if (ell == 1) {
      std::vector<double> prefix(static_cast<std::size_t>(path_length));
      for (int rep = 0; rep < reps; ++rep) {
        Rng rng(Rng::derive(seed ^ (static_cast<std::uint64_t>(ell) << 32),
                            static_cast<std::uint64_t>(rep)));
        double s = 0.0;
        for (int i = 0; i < path_length; ++i) {
          s += rng.next_normal();
          prefix[static_cast<std::size_t>(i)] = s;
        }
        const double w1 = s;
        double acc = 0.0;
        for (int i = 0; i < path_length; ++i) {
          const double frac = static_cast<double>(i + 1) / L;
          const double bridged = prefix[static_cast<std::size_t>(i)] - frac * w1;
          acc += bridged * bridged;
        }
        stats[static_cast<std::size_t>(rep)] = std::sqrt(w1 * w1 / (acc / L));
      }
    } else {
      Eigen::MatrixXd prefix(ell, path_length);
      for (int rep = 0; rep < reps; ++rep) {
        Rng rng(Rng::derive(seed ^ (static_cast<std::uint64_t>(ell) << 32),
                            static_cast<std::uint64_t>(rep)));
        Eigen::VectorXd s = Eigen::VectorXd::Zero(ell);
        for (int i = 0; i < path_length; ++i) {
          for (int k = 0; k < ell; ++k) s[k] += rng.next_normal();
          prefix.col(i) = s;
        }
        const Eigen::VectorXd w1 = s;
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(ell, ell);
        for (int i = 0; i < path_length; ++i) {
          const double frac = static_cast<double>(i + 1) / L;
          const Eigen::VectorXd bridged = prefix.col(i) - frac * w1;
          m.selfadjointView<Eigen::Lower>().rankUpdate(bridged);
        }
        m.triangularView<Eigen::StrictlyUpper>() = m.transpose();
        m /= L;  // with the 1/L from W(1) scaling this is L^2 overall
        stats[static_cast<std::size_t>(rep)] = std::sqrt(std::max(w1.dot(m.ldlt().solve(w1)), 0.0));
      }
    }
    std::sort(stats.begin(), stats.end());
    for (const double alpha : alphas) {
      const double level = 1.0 - alpha;
      auto idx = static_cast<std::size_t>(
          std::ceil(level * static_cast<double>(reps)));
      idx = std::min(idx - 1, stats.size() - 1);
      table.rows.push_back({ell, alpha, stats[idx]});
    }
  }
  return table;
}

double CriticalValueTable::cv(int ell, double alpha) const {
  for (const auto& row : rows)
    if (row.ell == ell && std::abs(row.alpha - alpha) < 1e-12) return row.cv;
  throw InferenceError("critical value not tabulated for this (ell, alpha)");
}

double rs_critical_value(int ell, double alpha) {
  for (const auto& row : detail::kRsCriticalValues)
    if (row.ell == ell && std::abs(row.alpha - alpha) < 1e-12) return row.cv;
  throw InferenceError("rs_critical_value: (ell, alpha) outside the built-in table");
}

void write_critical_values_csv(const CriticalValueTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("write_critical_values_csv: cannot open " + path);
  out << "ell,alpha,cv\n";
  char buf[64];
  for (const auto& row : table.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", row.ell, row.alpha, row.cv);
    out << buf;
  }
}

InferenceResult plugin_wald(const MomentModel& model, const Dataset& data,
                            const Eigen::VectorXd& theta_bar, const Hypothesis& hyp,
                            std::int64_t T_minus_N, int B_g, double alpha) {
  hyp.validate();
  const int ell = hyp.ell();
  const Eigen::Index n = data.n();
  const Eigen::MatrixXd phi = full_jacobian(model, data, theta_bar);
  const Eigen::MatrixXd omega = full_moment_outer(model, data, theta_bar);
  const Eigen::MatrixXd w = pseudo_inverse_sym(omega);
  int rank = 0;
  const Eigen::MatrixXd bread_inv = pseudo_inverse_sym(phi.transpose() * w * phi, 1e-10, &rank);
  if (rank == 0) throw InferenceError("plugin_wald: singular bread matrix Phi' W Phi");

  const Eigen::MatrixXd mid = hyp.R * bread_inv * hyp.R.transpose();
  const Eigen::VectorXd m = hyp.R * theta_bar - hyp.c;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(mid);
  if (!(es.eigenvalues()[0] > 0.0))
    throw InferenceError("plugin_wald: restriction variance is singular");
  const double quad =
      m.dot(es.eigenvectors() *
            (es.eigenvectors().transpose() * m).cwiseQuotient(es.eigenvalues().matrix()));
  const double tau =
      1.0 / (1.0 / static_cast<double>(n) +
             1.0 / (static_cast<double>(T_minus_N) * static_cast<double>(B_g)));

  InferenceResult result;
  result.mode = WaldMode::plugin;
  result.scaling_factor = tau;
  result.statistic = tau * quad;
  result.critical_value = chi2_quantile(1.0 - alpha, ell);
  result.reject = result.statistic > result.critical_value;
  if (ell == 1) {
    const double z = normal_quantile(1.0 - 0.5 * alpha);
    const double half = z * std::sqrt(mid(0, 0) / tau);
    const double center = (hyp.R * theta_bar)(0);
    result.ci_lower = center - half;
    result.ci_upper = center + half;
  }
  return result;
}

}  // namespace slim
