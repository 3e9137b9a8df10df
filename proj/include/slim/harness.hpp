#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "slim/inference.hpp"
#include "slim/jtest.hpp"
#include "slim/model.hpp"
#include "slim/refine.hpp"
#include "slim/schedule.hpp"

namespace slim {

enum class DgpKind { linear_iv, easi };
enum class Pipeline { first_order, first_order_refined_weight, second_order };
enum class Preweight { identity, tsls };

struct ExperimentConfig {
  DgpKind dgp = DgpKind::linear_iv;
  LinearIvDesign linear_iv;
  EasiDgpConfig easi;
  Eigen::Index n = 5000;
  int reps = 500;
  Pipeline pipeline = Pipeline::first_order;
  std::int64_t N = 10000;
  std::int64_t T = 0;  // used when the pipeline has a refinement stage
  int B_g = 32;
  int B_G0 = 32;
  std::optional<WarmStartConfig> warm_start;
  double s0 = 5.0;
  std::optional<double> gamma0;  // explicit override of the rule of thumb
  double lr_exponent = 0.501;
  Preweight preweight = Preweight::identity;
  WeightEstimator weight_estimator = WeightEstimator::minibatch;
  int M_MB = 2000;
  bool kronecker_diagonal = false;
  bool infer_random_scaling = true;
  bool infer_plugin = false;
  bool jtest_plugin = false;
  bool jtest_debiased = false;
  bool jtest_online = false;
  std::vector<int> targets = {0};
  double nominal_level = 0.95;
  std::uint64_t seed = 1;
  int parallel_workers = 1;
  std::int64_t trace_stride = 0;

  void validate() const;
  Eigen::VectorXd true_theta() const;
  std::int64_t refinement_steps() const { return T - N; }
};

ExperimentConfig parse_config_file(const std::string& path);
ExperimentConfig parse_config_json(const std::string& text);

// One replication's outputs, in replication-index order inside McReport.
struct RepRecord {
  int rep = 0;
  bool diverged = false;
  Eigen::VectorXd estimate;                       // per target
  std::vector<InferenceResult> random_scaling;    // per target, when requested
  std::vector<InferenceResult> plugin;            // per target, when requested
  std::optional<JTestResult> j_plugin_result;
  std::optional<JTestResult> j_debiased_result;
  std::optional<JTestResult> j_online_result;
  Eigen::VectorXd engel_coeffs;                   // easi only: bhat blocks
  double gamma0_used = 0.0;
};

struct StageTimings {
  double generate = 0.0, warm_start = 0.0, tuning = 0.0, first_order = 0.0, operators = 0.0,
         refinement = 0.0, inference = 0.0, jtests = 0.0, total = 0.0;
};

struct McReport {
  // ordered (method, target, metric) -> value; exactly the summary.csv rows
  std::vector<std::tuple<std::string, std::string, std::string, double>> metrics;
  std::vector<RepRecord> reps;
  StageTimings timings;
  int diverged = 0;

  double metric(const std::string& method, const std::string& target,
                const std::string& name) const;
};

McReport run_experiment(const ExperimentConfig& config, const std::string& out_dir = "");

// Root integrated mean squared error of degree-5 Engel curves over
// [x_lo, x_hi], grid midpoints at the given width. Rows of curve_coeffs are
// replications, laid out goods-major as (b_{j,0..5})_j; truth uses the same
// layout.
double rimse(const Eigen::MatrixXd& curve_coeffs, double x_lo, double x_hi, double step,
             const Eigen::VectorXd& truth_coeffs);

void write_summary_csv(const McReport& report, const std::string& path);
void write_reps_csv(const McReport& report, const ExperimentConfig& config,
                    const std::string& path);
// Re-parses a summary written by write_summary_csv.
std::vector<std::tuple<std::string, std::string, std::string, double>> read_summary_csv(
    const std::string& path);

// Single-dataset estimation (no Monte Carlo); prints a human-readable report.
void run_single_estimate(const ExperimentConfig& config, std::ostream& out,
                         const std::string& trace_path = "");

}  // namespace slim
