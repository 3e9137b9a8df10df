#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "slim/errors.hpp"
#include "slim/rng.hpp"

namespace slim {

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Immutable sample: row i is the complete record z_i, laid out as a flat
// numeric row whose meaning is given by the column schema. Row-major so a
// record is contiguous.
struct Dataset {
  RowMatrixXd rows;
  std::vector<std::string> columns;

  Eigen::Index n() const { return rows.rows(); }
  void validate() const;
};

void write_csv(const Dataset& data, const std::string& path);

using MomentFn = std::function<void(const Eigen::Ref<const Eigen::RowVectorXd>& record,
                                    const Eigen::Ref<const Eigen::VectorXd>& theta,
                                    Eigen::Ref<Eigen::VectorXd> g_out)>;
using JacobianFn = std::function<void(const Eigen::Ref<const Eigen::RowVectorXd>& record,
                                      const Eigen::Ref<const Eigen::VectorXd>& theta,
                                      Eigen::Ref<Eigen::MatrixXd> g_jac_out)>;

using BatchMomentFn = std::function<void(
    const RowMatrixXd& rows, const std::vector<Eigen::Index>& idx,
    const Eigen::Ref<const Eigen::VectorXd>& theta, Eigen::Ref<Eigen::VectorXd> g_out)>;
using BatchJacobianFn = std::function<void(
    const RowMatrixXd& rows, const std::vector<Eigen::Index>& idx,
    const Eigen::Ref<const Eigen::VectorXd>& theta, Eigen::Ref<Eigen::MatrixXd> g_jac_out)>;

// Moment function g(z, theta) in R^{d_g} with analytic Jacobian G(z, theta)
// of size d_g x d. Evaluation is pure and reentrant. Models may install
// batch-mean fast paths; the per-record evaluators remain the definition.
struct MomentModel {
  int d = 0;
  int d_g = 0;
  MomentFn eval_g;
  JacobianFn eval_G;
  BatchMomentFn eval_g_batch;
  BatchJacobianFn eval_G_batch;
};

// Batch means over an index list.
void batch_moments(const MomentModel& model, const Dataset& data,
                   const std::vector<Eigen::Index>& idx, const Eigen::VectorXd& theta,
                   Eigen::Ref<Eigen::VectorXd> g_out);
void batch_jacobian(const MomentModel& model, const Dataset& data,
                    const std::vector<Eigen::Index>& idx, const Eigen::VectorXd& theta,
                    Eigen::Ref<Eigen::MatrixXd> g_jac_out);

// Full-sample averages.
Eigen::VectorXd full_moments(const MomentModel& model, const Dataset& data,
                             const Eigen::VectorXd& theta);
Eigen::MatrixXd full_jacobian(const MomentModel& model, const Dataset& data,
                              const Eigen::VectorXd& theta, Eigen::Index row_cap = 0);
// (1/n) sum g g'
Eigen::MatrixXd full_moment_outer(const MomentModel& model, const Dataset& data,
                                  const Eigen::VectorXd& theta);

// Redefines g as root * g (and G accordingly) for a fixed symmetric PSD
// square root of a weighting matrix.
MomentModel with_weight_root(MomentModel base, Eigen::MatrixXd root);

// Central finite-difference check of eval_G against eval_g. Returns the
// maximum entrywise error scaled by 1 + |entry|.
double jacobian_fd_error(const MomentModel& model, const Dataset& data,
                         const Eigen::VectorXd& theta, Eigen::Index row, double step = 1e-6);

// -------------------------------------------------------------------------
// Linear IV design: y = x'theta + e, instruments q with E[q e] = 0, moments
// g(z, theta) = q (y - x'theta). Oracle-friendly: full-sample GMM is closed
// form.
struct LinearIvDesign {
  int d = 2;
  int d_g = 4;
  Eigen::VectorXd theta;     // true coefficient vector, length d
  double instrument_corr = 0.3;
  double error_scale = 0.5;
  double endogeneity = 0.5;
  // Invalid-instrument strength: the last instrument is shifted by
  // contamination * contamination_scale * e, breaking E[q e] = 0.
  double contamination = 0.0;
  double contamination_scale = 0.02;

  void validate() const;
  int record_width() const { return 1 + d + d_g; }  // y, x, q
};

MomentModel model_from_linear_iv(const LinearIvDesign& design);
Dataset generate_linear_iv(const LinearIvDesign& design, Eigen::Index n, std::uint64_t seed);

// -------------------------------------------------------------------------
// Reduced-dimension EASI demand system. J goods with the last one dropped,
// so shares w, relative log prices p, and the coefficient matrices are all
// (J-1)-dimensional; L demographics. Records are (w, x, p, z).
struct EasiDgpConfig {
  int J = 3;
  int L = 1;
  std::vector<Eigen::VectorXd> b;  // 6 blocks b_0..b_5, each length J-1
  Eigen::MatrixXd C;               // (J-1) x L
  Eigen::MatrixXd D;               // (J-1) x L
  std::vector<Eigen::MatrixXd> A;  // A_0..A_L, symmetric (J-1) x (J-1)
  Eigen::MatrixXd B;               // symmetric (J-1) x (J-1)
  Eigen::VectorXd sigma;           // residual sds, length J-1
  Eigen::VectorXd w_mean;          // share average used in the utility formula

  // Base sample of (x, p, z) rows to resample; synthesized when empty.
  Eigen::MatrixXd base;
  Eigen::Index base_n = 2000;
  int price_grid = 48;
  double x_sd = 0.5;
  double price_sd = 0.3;
  std::uint64_t base_seed = 1234;

  // Instrument endogeneity strength: instruments use x - contamination * p'w.
  double contamination = 0.0;

  void validate() const;
  int n_goods_kept() const { return J - 1; }
  int n_instruments() const { return 6 + 2 * L + (J - 1) * (L + 2); }
  int n_params() const { return (J - 1) * (6 + 2 * L) + (L + 2) * (J - 1) * J / 2; }
  int n_moments() const { return (J - 1) * n_instruments(); }
  int record_width() const { return 2 * (J - 1) + 1 + L; }

  // Packs (b, C, D, A_0..A_L, B) into the parameter vector under symmetry.
  Eigen::VectorXd pack_true_theta() const;

  static EasiDgpConfig reduced_default();
};

Eigen::MatrixXd make_easi_base_sample(const EasiDgpConfig& config);
Dataset generate_easi(const EasiDgpConfig& config, Eigen::Index n, std::uint64_t seed);
MomentModel model_from_easi(const EasiDgpConfig& config);

// Instrument vector q(x, p, z) for one record, honoring the contamination
// setting; q has length n_instruments().
void easi_instruments(const EasiDgpConfig& config,
                      const Eigen::Ref<const Eigen::RowVectorXd>& record, Eigen::VectorXd& q);

}  // namespace slim
