#include "slim/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

namespace slim {

namespace {
constexpr double kEasiDenominatorTol = 1e-8;
}

void Dataset::validate() const {
  if (rows.rows() < 1) throw ConfigError("Dataset: n must be >= 1");
  if (!rows.allFinite()) throw ConfigError("Dataset: non-finite entries");
}

void write_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("write_csv: cannot open " + path);
  for (std::size_t j = 0; j < data.columns.size(); ++j) {
    if (j) out << ',';
    out << data.columns[j];
  }
  out << '\n';
  char buf[32];
  for (Eigen::Index i = 0; i < data.rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.rows.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", data.rows(i, j));
      if (j) out << ',';
      out << buf;
    }
    out << '\n';
  }
}

void batch_moments(const MomentModel& model, const Dataset& data,
                   const std::vector<Eigen::Index>& idx, const Eigen::VectorXd& theta,
                   Eigen::Ref<Eigen::VectorXd> g_out) {
  if (model.eval_g_batch) {
    model.eval_g_batch(data.rows, idx, theta, g_out);
    return;
  }
  thread_local Eigen::VectorXd rec_g;
  rec_g.resize(model.d_g);
  g_out.setZero();
  for (const Eigen::Index i : idx) {
    model.eval_g(data.rows.row(i), theta, rec_g);
    g_out += rec_g;
  }
  g_out /= static_cast<double>(idx.size());
}

void batch_jacobian(const MomentModel& model, const Dataset& data,
                    const std::vector<Eigen::Index>& idx, const Eigen::VectorXd& theta,
                    Eigen::Ref<Eigen::MatrixXd> g_jac_out) {
  if (model.eval_G_batch) {
    model.eval_G_batch(data.rows, idx, theta, g_jac_out);
    return;
  }
  thread_local Eigen::MatrixXd rec_jac;
  rec_jac.resize(model.d_g, model.d);
  g_jac_out.setZero();
  for (const Eigen::Index i : idx) {
    model.eval_G(data.rows.row(i), theta, rec_jac);
    g_jac_out += rec_jac;
  }
  g_jac_out /= static_cast<double>(idx.size());
}

Eigen::VectorXd full_moments(const MomentModel& model, const Dataset& data,
                             const Eigen::VectorXd& theta) {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(model.d_g);
  Eigen::VectorXd rec(model.d_g);
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    model.eval_g(data.rows.row(i), theta, rec);
    acc += rec;
  }
  return acc / static_cast<double>(data.n());
}

Eigen::MatrixXd full_jacobian(const MomentModel& model, const Dataset& data,
                              const Eigen::VectorXd& theta, Eigen::Index row_cap) {
  const Eigen::Index rows = (row_cap > 0 && row_cap < data.n()) ? row_cap : data.n();
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(model.d_g, model.d);
  Eigen::MatrixXd rec(model.d_g, model.d);
  for (Eigen::Index i = 0; i < rows; ++i) {
    model.eval_G(data.rows.row(i), theta, rec);
    acc += rec;
  }
  return acc / static_cast<double>(rows);
}

Eigen::MatrixXd full_moment_outer(const MomentModel& model, const Dataset& data,
                                  const Eigen::VectorXd& theta) {
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(model.d_g, model.d_g);
  Eigen::VectorXd rec(model.d_g);
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    model.eval_g(data.rows.row(i), theta, rec);
    acc.selfadjointView<Eigen::Lower>().rankUpdate(rec);
  }
  acc.triangularView<Eigen::StrictlyUpper>() = acc.transpose();
  return acc / static_cast<double>(data.n());
}

MomentModel with_weight_root(MomentModel base, Eigen::MatrixXd root) {
  if (root.rows() != base.d_g || root.cols() != base.d_g)
    throw ConfigError("with_weight_root: root must be d_g x d_g");
  MomentModel out;
  out.d = base.d;
  out.d_g = base.d_g;
  const auto shared = std::make_shared<std::pair<MomentModel, Eigen::MatrixXd>>(
      std::move(base), std::move(root));
  out.eval_g = [shared](const Eigen::Ref<const Eigen::RowVectorXd>& record,
                        const Eigen::Ref<const Eigen::VectorXd>& theta,
                        Eigen::Ref<Eigen::VectorXd> g_out) {
    thread_local Eigen::VectorXd raw;
    raw.resize(shared->first.d_g);
    shared->first.eval_g(record, theta, raw);
    g_out.noalias() = shared->second * raw;
  };
  out.eval_G = [shared](const Eigen::Ref<const Eigen::RowVectorXd>& record,
                        const Eigen::Ref<const Eigen::VectorXd>& theta,
                        Eigen::Ref<Eigen::MatrixXd> jac_out) {
    thread_local Eigen::MatrixXd raw;
    raw.resize(shared->first.d_g, shared->first.d);
    shared->first.eval_G(record, theta, raw);
    jac_out.noalias() = shared->second * raw;
  };
  // the fixed root commutes with batch means
  out.eval_g_batch = [shared](const RowMatrixXd& rows, const std::vector<Eigen::Index>& idx,
                              const Eigen::Ref<const Eigen::VectorXd>& theta,
                              Eigen::Ref<Eigen::VectorXd> g_out) {
    thread_local Eigen::VectorXd raw;
    raw.resize(shared->first.d_g);
    if (shared->first.eval_g_batch) {
      shared->first.eval_g_batch(rows, idx, theta, raw);
    } else {
      thread_local Eigen::VectorXd rec;
      rec.resize(shared->first.d_g);
      raw.setZero();
      for (const Eigen::Index i : idx) {
        shared->first.eval_g(rows.row(i), theta, rec);
        raw += rec;
      }
      raw /= static_cast<double>(idx.size());
    }
    g_out.noalias() = shared->second * raw;
  };
  out.eval_G_batch = [shared](const RowMatrixXd& rows, const std::vector<Eigen::Index>& idx,
                              const Eigen::Ref<const Eigen::VectorXd>& theta,
                              Eigen::Ref<Eigen::MatrixXd> jac_out) {
    thread_local Eigen::MatrixXd raw;
    raw.resize(shared->first.d_g, shared->first.d);
    if (shared->first.eval_G_batch) {
      shared->first.eval_G_batch(rows, idx, theta, raw);
    } else {
      thread_local Eigen::MatrixXd rec;
      rec.resize(shared->first.d_g, shared->first.d);
      raw.setZero();
      for (const Eigen::Index i : idx) {
        shared->first.eval_G(rows.row(i), theta, rec);
        raw += rec;
      }
      raw /= static_cast<double>(idx.size());
    }
    jac_out.noalias() = shared->second * raw;
  };
  return out;
}

double jacobian_fd_error(const MomentModel& model, const Dataset& data,
                         const Eigen::VectorXd& theta, Eigen::Index row, double step) {
  Eigen::MatrixXd analytic(model.d_g, model.d);
  model.eval_G(data.rows.row(row), theta, analytic);
  Eigen::VectorXd g_plus(model.d_g), g_minus(model.d_g);
  Eigen::VectorXd shifted = theta;
  double worst = 0.0;
  for (int k = 0; k < model.d; ++k) {
    shifted[k] = theta[k] + step;
    model.eval_g(data.rows.row(row), shifted, g_plus);
    shifted[k] = theta[k] - step;
    model.eval_g(data.rows.row(row), shifted, g_minus);
    shifted[k] = theta[k];
    for (int i = 0; i < model.d_g; ++i) {
      const double fd = (g_plus[i] - g_minus[i]) / (2.0 * step);
      const double err = std::abs(analytic(i, k) - fd) / (1.0 + std::abs(analytic(i, k)));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Linear IV

void LinearIvDesign::validate() const {
  if (d < 1 || d_g < d) throw ConfigError("LinearIvDesign: need d >= 1 and d_g >= d");
  if (theta.size() != d) throw ConfigError("LinearIvDesign: theta must have length d");
  if (instrument_corr < 0.0 || instrument_corr >= 1.0)
    throw ConfigError("LinearIvDesign: instrument_corr must be in [0,1)");
  if (error_scale < 0.0) throw ConfigError("LinearIvDesign: error_scale must be >= 0");
}

MomentModel model_from_linear_iv(const LinearIvDesign& design) {
  design.validate();
  MomentModel model;
  model.d = design.d;
  model.d_g = design.d_g;
  const int d = design.d, d_g = design.d_g;
  // record: [y, x (d), q (d_g)]
  model.eval_g = [d, d_g](const Eigen::Ref<const Eigen::RowVectorXd>& record,
                          const Eigen::Ref<const Eigen::VectorXd>& theta,
                          Eigen::Ref<Eigen::VectorXd> g_out) {
    const double resid = record[0] - record.segment(1, d).dot(theta.transpose());
    g_out = record.segment(1 + d, d_g).transpose() * resid;
  };
  model.eval_G = [d, d_g](const Eigen::Ref<const Eigen::RowVectorXd>& record,
                          const Eigen::Ref<const Eigen::VectorXd>&,
                          Eigen::Ref<Eigen::MatrixXd> jac_out) {
    jac_out.noalias() = -record.segment(1 + d, d_g).transpose() * record.segment(1, d);
  };
  // contiguous-row fast paths for the mini-batch means
  model.eval_g_batch = [d, d_g](const RowMatrixXd& rows, const std::vector<Eigen::Index>& idx,
                                const Eigen::Ref<const Eigen::VectorXd>& theta,
                                Eigen::Ref<Eigen::VectorXd> g_out) {
    g_out.setZero();
    for (const Eigen::Index i : idx) {
      const double* rec = rows.data() + i * rows.cols();
      double resid = rec[0];
      for (int k = 0; k < d; ++k) resid -= rec[1 + k] * theta[k];
      for (int j = 0; j < d_g; ++j) g_out[j] += rec[1 + d + j] * resid;
    }
    g_out /= static_cast<double>(idx.size());
  };
  model.eval_G_batch = [d, d_g](const RowMatrixXd& rows, const std::vector<Eigen::Index>& idx,
                                const Eigen::Ref<const Eigen::VectorXd>&,
                                Eigen::Ref<Eigen::MatrixXd> jac_out) {
    jac_out.setZero();
    for (const Eigen::Index i : idx) {
      const double* rec = rows.data() + i * rows.cols();
      for (int k = 0; k < d; ++k)
        for (int j = 0; j < d_g; ++j) jac_out(j, k) -= rec[1 + d + j] * rec[1 + k];
    }
    jac_out /= static_cast<double>(idx.size());
  };
  return model;
}

Dataset generate_linear_iv(const LinearIvDesign& design, Eigen::Index n, std::uint64_t seed) {
  design.validate();
  if (n < 1) throw ConfigError("generate_linear_iv: n must be >= 1");
  const int d = design.d, d_g = design.d_g;
  const double rho = design.instrument_corr;
  const int per = (d_g + d - 1) / d;  // instruments loading on each x component
  const double load = 1.0 / std::sqrt(static_cast<double>(per));

  Dataset data;
  data.rows.resize(n, design.record_width());
  data.columns.push_back("y");
  for (int k = 0; k < d; ++k) data.columns.push_back("x" + std::to_string(k));
  for (int j = 0; j < d_g; ++j) data.columns.push_back("q" + std::to_string(j));

  Rng rng(seed);
  Eigen::VectorXd q(d_g), x(d), v(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double common = rng.next_normal();
    for (int j = 0; j < d_g; ++j)
      q[j] = std::sqrt(1.0 - rho) * rng.next_normal() + std::sqrt(rho) * common;
    for (int k = 0; k < d; ++k) v[k] = 0.5 * rng.next_normal();
    x = v;
    for (int j = 0; j < d_g; ++j) x[j % d] += load * q[j];
    const double eps = design.endogeneity * v.sum() / std::sqrt(static_cast<double>(d)) +
                       design.error_scale * rng.next_normal();
    const double y = x.dot(design.theta) + eps;
    if (design.contamination != 0.0)
      q[d_g - 1] += design.contamination * design.contamination_scale * eps;
    data.rows(i, 0) = y;
    data.rows.row(i).segment(1, d) = x.transpose();
    data.rows.row(i).segment(1 + d, d_g) = q.transpose();
  }
  return data;
}

// ---------------------------------------------------------------------------
// EASI

void EasiDgpConfig::validate() const {
  const int K = J - 1;
  if (J < 2 || L < 0) throw ConfigError("EasiDgpConfig: need J >= 2 and L >= 0");
  if (b.size() != 6) throw ConfigError("EasiDgpConfig: exactly six b blocks required");
  for (const auto& block : b)
    if (block.size() != K) throw ConfigError("EasiDgpConfig: each b block must have length J-1");
  if (C.rows() != K || C.cols() != L || D.rows() != K || D.cols() != L)
    throw ConfigError("EasiDgpConfig: C and D must be (J-1) x L");
  if (static_cast<int>(A.size()) != L + 1)
    throw ConfigError("EasiDgpConfig: need L+1 matrices A_0..A_L");
  for (const auto& mat : A) {
    if (mat.rows() != K || mat.cols() != K) throw ConfigError("EasiDgpConfig: A_l must be (J-1) x (J-1)");
    if (!mat.isApprox(mat.transpose(), 1e-12)) throw ConfigError("EasiDgpConfig: A_l must be symmetric");
  }
  if (B.rows() != K || B.cols() != K) throw ConfigError("EasiDgpConfig: B must be (J-1) x (J-1)");
  if (!B.isApprox(B.transpose(), 1e-12)) throw ConfigError("EasiDgpConfig: B must be symmetric");
  if (sigma.size() != K || (sigma.array() < 0.0).any())
    throw ConfigError("EasiDgpConfig: sigma must be nonnegative, length J-1");
  if (w_mean.size() != K) throw ConfigError("EasiDgpConfig: w_mean must have length J-1");
  if (base.size() != 0 && base.cols() != 1 + K + L)
    throw ConfigError("EasiDgpConfig: base sample must have 1+(J-1)+L columns");
}

namespace {

// Offsets into the packed parameter vector.
struct EasiLayout {
  int K, L, lin_per_eq, sym_size;
  explicit EasiLayout(const EasiDgpConfig& c)
      : K(c.J - 1), L(c.L), lin_per_eq(6 + 2 * c.L), sym_size((c.J - 1) * c.J / 2) {}
  int b_idx(int j, int r) const { return j * lin_per_eq + r; }
  int c_idx(int j, int l) const { return j * lin_per_eq + 6 + l; }          // l in [0, L)
  int d_idx(int j, int l) const { return j * lin_per_eq + 6 + L + l; }      // l in [0, L)
  int sym_base() const { return K * lin_per_eq; }
  int a_base(int l) const { return sym_base() + l * sym_size; }             // l in [0, L]
  int b_mat_base() const { return sym_base() + (L + 1) * sym_size; }
  int tri_idx(int a, int bb) const { return a * K - a * (a - 1) / 2 + (bb - a); }  // a <= bb
};

// Per-evaluation scratch shared between eval_g and eval_G.
struct EasiWork {
  Eigen::VectorXd q, ypow, resid, dwdy, Ap_sum, Bp;
  Eigen::MatrixXd Ap;  // columns: A_l p for l = 0..L
};

// Unpacks theta lazily through the layout; evaluates utility, residuals and
// the pieces shared by the moment and its Jacobian.
void easi_core(const EasiLayout& lay,
               const Eigen::Ref<const Eigen::RowVectorXd>& record,
               const Eigen::Ref<const Eigen::VectorXd>& theta, EasiWork& w, double& y_out,
               double& den_out, bool need_jacobian_parts) {
  const int K = lay.K, L = lay.L;
  const auto wshare = record.segment(0, K);
  const double x = record[K];
  const auto p = record.segment(K + 1, K);
  const auto z = record.segment(2 * K + 1, L);

  // A_l p and p'A_l p for l = 0..L (z_0 = 1)
  w.Ap.resize(K, L + 1);
  w.Ap_sum.resize(K);
  double quad = 0.0;
  for (int l = 0; l <= L; ++l) {
    const double zl = (l == 0) ? 1.0 : z[l - 1];
    for (int a = 0; a < K; ++a) {
      double acc = 0.0;
      for (int bb = 0; bb < K; ++bb) {
        const int lo = std::min(a, bb), hi = std::max(a, bb);
        acc += theta[lay.a_base(l) + lay.tri_idx(lo, hi)] * p[bb];
      }
      w.Ap(a, l) = acc;
    }
    quad += 0.5 * zl * p.dot(w.Ap.col(l).transpose());
  }
  w.Bp.resize(K);
  double pBp = 0.0;
  for (int a = 0; a < K; ++a) {
    double acc = 0.0;
    for (int bb = 0; bb < K; ++bb) {
      const int lo = std::min(a, bb), hi = std::max(a, bb);
      acc += theta[lay.b_mat_base() + lay.tri_idx(lo, hi)] * p[bb];
    }
    w.Bp[a] = acc;
    pBp += p[a] * acc;
  }
  const double den = 1.0 - 0.5 * pBp;
  if (std::abs(den) <= kEasiDenominatorTol)
    throw GenerationError("EASI: singular implicit-utility transform (1 - p'Bp/2 ~ 0)");
  const double y = (x - p.dot(wshare) + quad) / den;
  y_out = y;
  den_out = den;

  w.ypow.resize(6);
  w.ypow[0] = 1.0;
  for (int r = 1; r < 6; ++r) w.ypow[r] = w.ypow[r - 1] * y;

  // fitted shares and residuals
  w.resid.resize(K);
  for (int j = 0; j < K; ++j) {
    double fit = 0.0;
    for (int r = 0; r < 6; ++r) fit += theta[lay.b_idx(j, r)] * w.ypow[r];
    for (int l = 0; l < L; ++l) fit += theta[lay.c_idx(j, l)] * z[l] + theta[lay.d_idx(j, l)] * z[l] * y;
    for (int l = 0; l <= L; ++l) fit += ((l == 0) ? 1.0 : z[l - 1]) * w.Ap(j, l);
    fit += w.Bp[j] * y;
    w.resid[j] = wshare[j] - fit;
  }

  if (need_jacobian_parts) {
    w.dwdy.resize(K);
    for (int j = 0; j < K; ++j) {
      double s = 0.0;
      for (int r = 1; r < 6; ++r) s += static_cast<double>(r) * theta[lay.b_idx(j, r)] * w.ypow[r - 1];
      for (int l = 0; l < L; ++l) s += theta[lay.d_idx(j, l)] * z[l];
      s += w.Bp[j];
      w.dwdy[j] = s;
    }
  }
}

}  // namespace

void easi_instruments(const EasiDgpConfig& cfg,
                      const Eigen::Ref<const Eigen::RowVectorXd>& record, Eigen::VectorXd& q) {
  const int K = cfg.J - 1, L = cfg.L;
  const auto wshare = record.segment(0, K);
  const auto p = record.segment(K + 1, K);
  const auto z = record.segment(2 * K + 1, L);
  double x = record[K];
  if (cfg.contamination != 0.0) x -= cfg.contamination * p.dot(wshare);

  q.resize(cfg.n_instruments());
  int at = 0;
  double xp = 1.0;
  for (int r = 0; r < 6; ++r) {
    q[at++] = xp;
    xp *= x;
  }
  for (int a = 0; a < K; ++a) q[at++] = p[a];
  for (int l = 0; l < L; ++l) q[at++] = z[l];
  for (int l = 0; l < L; ++l) q[at++] = z[l] * x;
  for (int a = 0; a < K; ++a) q[at++] = p[a] * x;
  for (int l = 0; l < L; ++l)
    for (int a = 0; a < K; ++a) q[at++] = p[a] * z[l];
}

Eigen::VectorXd EasiDgpConfig::pack_true_theta() const {
  validate();
  const EasiLayout lay(*this);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(n_params());
  for (int j = 0; j < lay.K; ++j) {
    for (int r = 0; r < 6; ++r) theta[lay.b_idx(j, r)] = b[r][j];
    for (int l = 0; l < L; ++l) {
      theta[lay.c_idx(j, l)] = C(j, l);
      theta[lay.d_idx(j, l)] = D(j, l);
    }
  }
  for (int l = 0; l <= L; ++l)
    for (int a = 0; a < lay.K; ++a)
      for (int bb = a; bb < lay.K; ++bb) theta[lay.a_base(l) + lay.tri_idx(a, bb)] = A[l](a, bb);
  for (int a = 0; a < lay.K; ++a)
    for (int bb = a; bb < lay.K; ++bb) theta[lay.b_mat_base() + lay.tri_idx(a, bb)] = B(a, bb);
  return theta;
}

EasiDgpConfig EasiDgpConfig::reduced_default() {
  EasiDgpConfig cfg;
  cfg.J = 3;
  cfg.L = 1;
  const int K = 2;
  cfg.b.resize(6);
  cfg.b[0] = (Eigen::VectorXd(K) << 0.30, 0.25).finished();
  cfg.b[1] = (Eigen::VectorXd(K) << 0.05, -0.04).finished();
  cfg.b[2] = (Eigen::VectorXd(K) << 0.02, 0.012).finished();
  cfg.b[3] = (Eigen::VectorXd(K) << -0.010, 0.006).finished();
  cfg.b[4] = (Eigen::VectorXd(K) << 0.004, -0.003).finished();
  cfg.b[5] = (Eigen::VectorXd(K) << -0.0015, 0.001).finished();
  cfg.C = (Eigen::MatrixXd(K, 1) << 0.03, -0.02).finished();
  cfg.D = (Eigen::MatrixXd(K, 1) << 0.012, 0.015).finished();
  cfg.A.resize(2);
  cfg.A[0] = (Eigen::MatrixXd(K, K) << 0.05, -0.02, -0.02, 0.04).finished();
  cfg.A[1] = (Eigen::MatrixXd(K, K) << 0.02, 0.010, 0.010, -0.015).finished();
  cfg.B = (Eigen::MatrixXd(K, K) << 0.03, -0.010, -0.010, 0.02).finished();
  cfg.sigma = (Eigen::VectorXd(K) << 0.05, 0.05).finished();
  cfg.w_mean = (Eigen::VectorXd(K) << 0.35, 0.30).finished();
  return cfg;
}

Eigen::MatrixXd make_easi_base_sample(const EasiDgpConfig& config) {
  const int K = config.J - 1, L = config.L;
  Rng rng(config.base_seed);
  Eigen::MatrixXd grid(config.price_grid, K);
  for (Eigen::Index g = 0; g < grid.rows(); ++g)
    for (int a = 0; a < K; ++a) grid(g, a) = config.price_sd * rng.next_normal();
  Eigen::MatrixXd base(config.base_n, 1 + K + L);
  for (Eigen::Index i = 0; i < config.base_n; ++i) {
    base(i, 0) = config.x_sd * rng.next_normal();
    const Eigen::Index g = rng.uniform_below(grid.rows());
    base.row(i).segment(1, K) = grid.row(g);
    for (int l = 0; l < L; ++l) base(i, 1 + K + l) = 2.0 * rng.next_double() - 1.0;
  }
  return base;
}

Dataset generate_easi(const EasiDgpConfig& config, Eigen::Index n, std::uint64_t seed) {
  config.validate();
  if (n < 1) throw ConfigError("generate_easi: n must be >= 1");
  const int K = config.J - 1, L = config.L;
  const Eigen::MatrixXd base = config.base.size() ? config.base : make_easi_base_sample(config);
  if (base.rows() < 1) throw ConfigError("generate_easi: empty base sample");

  Dataset data;
  data.rows.resize(n, config.record_width());
  for (int j = 0; j < K; ++j) data.columns.push_back("w" + std::to_string(j));
  data.columns.push_back("x");
  for (int a = 0; a < K; ++a) data.columns.push_back("p" + std::to_string(a));
  for (int l = 0; l < L; ++l) data.columns.push_back("z" + std::to_string(l + 1));

  Rng rng(seed);
  Eigen::VectorXd p(K), z(L), share(K), Ap(K), Bp(K);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index src = rng.uniform_below(base.rows());
    const double x = base(src, 0);
    p = base.row(src).segment(1, K).transpose();
    z = base.row(src).segment(1 + K, L).transpose();

    double quad = 0.0;
    for (int l = 0; l <= L; ++l) {
      const double zl = (l == 0) ? 1.0 : z[l - 1];
      quad += 0.5 * zl * p.dot(config.A[l] * p);
    }
    const double den = 1.0 - 0.5 * p.dot(config.B * p);
    if (std::abs(den) <= kEasiDenominatorTol)
      throw GenerationError("generate_easi: singular implicit-utility transform");
    const double y = (x - p.dot(config.w_mean) + quad) / den;

    share.setZero();
    double ypow = 1.0;
    for (int r = 0; r < 6; ++r) {
      share += config.b[r] * ypow;
      ypow *= y;
    }
    share += config.C * z + config.D * z * y;
    for (int l = 0; l <= L; ++l) share += ((l == 0) ? 1.0 : z[l - 1]) * (config.A[l] * p);
    share += (config.B * p) * y;
    for (int j = 0; j < K; ++j) share[j] += config.sigma[j] * rng.next_normal();

    data.rows.row(i).segment(0, K) = share.transpose();
    data.rows(i, K) = x;
    data.rows.row(i).segment(K + 1, K) = p.transpose();
    data.rows.row(i).segment(2 * K + 1, L) = z.transpose();
  }
  return data;
}

MomentModel model_from_easi(const EasiDgpConfig& config) {
  config.validate();
  MomentModel model;
  model.d = config.n_params();
  model.d_g = config.n_moments();
  const auto cfg = std::make_shared<EasiDgpConfig>(config);
  const EasiLayout lay(*cfg);

  model.eval_g = [cfg, lay](const Eigen::Ref<const Eigen::RowVectorXd>& record,
                            const Eigen::Ref<const Eigen::VectorXd>& theta,
                            Eigen::Ref<Eigen::VectorXd> g_out) {
    thread_local EasiWork w;
    double y, den;
    easi_core(lay, record, theta, w, y, den, false);
    easi_instruments(*cfg, record, w.q);
    const int m = static_cast<int>(w.q.size());
    for (int j = 0; j < lay.K; ++j) g_out.segment(j * m, m) = w.resid[j] * w.q;
  };

  model.eval_G = [cfg, lay](const Eigen::Ref<const Eigen::RowVectorXd>& record,
                            const Eigen::Ref<const Eigen::VectorXd>& theta,
                            Eigen::Ref<Eigen::MatrixXd> jac_out) {
    thread_local EasiWork w;
    double y, den;
    easi_core(lay, record, theta, w, y, den, true);
    easi_instruments(*cfg, record, w.q);
    const int K = lay.K, L = lay.L;
    const int m = static_cast<int>(w.q.size());
    const auto p = record.segment(K + 1, K);
    const auto z = record.segment(2 * K + 1, L);

    // G = -q (dwhat_j / dtheta'), stacked equation-major; fill the share
    // derivative row per equation then expand through the instrument block.
    thread_local Eigen::VectorXd dfit;
    dfit.resize(jac_out.cols());
    jac_out.setZero();
    for (int j = 0; j < K; ++j) {
      dfit.setZero();
      for (int r = 0; r < 6; ++r) dfit[lay.b_idx(j, r)] = w.ypow[r];
      for (int l = 0; l < L; ++l) {
        dfit[lay.c_idx(j, l)] = z[l];
        dfit[lay.d_idx(j, l)] = z[l] * y;
      }
      const double s_j = w.dwdy[j];
      for (int l = 0; l <= L; ++l) {
        const double zl = (l == 0) ? 1.0 : z[l - 1];
        for (int a = 0; a < K; ++a) {
          for (int bb = a; bb < K; ++bb) {
            const double half = (a == bb) ? 0.5 : 1.0;
            double direct = 0.0;
            if (j == a) direct += p[bb];
            if (j == bb && a != bb) direct += p[a];
            const double dy = zl * half * p[a] * p[bb] / den;
            dfit[lay.a_base(l) + lay.tri_idx(a, bb)] = zl * direct + s_j * dy;
          }
        }
      }
      for (int a = 0; a < K; ++a) {
        for (int bb = a; bb < K; ++bb) {
          const double half = (a == bb) ? 0.5 : 1.0;
          double direct = 0.0;
          if (j == a) direct += p[bb];
          if (j == bb && a != bb) direct += p[a];
          const double dy = y * half * p[a] * p[bb] / den;
          dfit[lay.b_mat_base() + lay.tri_idx(a, bb)] = direct * y + s_j * dy;
        }
      }
      jac_out.block(j * m, 0, m, jac_out.cols()).noalias() = -w.q * dfit.transpose();
    }
  };
  return model;
}

}  // namespace slim
