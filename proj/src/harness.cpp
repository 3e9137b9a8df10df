#include "slim/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "slim/engine.hpp"
#include "slim/linalg.hpp"
#include "slim/oracle.hpp"

namespace slim {

using nlohmann::json;

namespace {

double elapsed(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

LinearIvDesign parse_linear_iv(const json& obj) {
  reject_unknown_keys(obj,
                      {"d", "d_g", "theta", "instrument_corr", "error_scale", "endogeneity",
                       "contamination", "contamination_scale"},
                      "linear_iv");
  LinearIvDesign design;
  design.d = obj.value("d", 2);
  design.d_g = obj.value("d_g", 4);
  if (obj.contains("theta")) {
    const auto vec = obj.at("theta").get<std::vector<double>>();
    design.theta = Eigen::Map<const Eigen::VectorXd>(vec.data(), static_cast<Eigen::Index>(vec.size()));
  } else {
    design.theta = Eigen::VectorXd::LinSpaced(design.d, 1.0, 0.5);
  }
  design.instrument_corr = obj.value("instrument_corr", 0.3);
  design.error_scale = obj.value("error_scale", 0.5);
  design.endogeneity = obj.value("endogeneity", 0.5);
  design.contamination = obj.value("contamination", 0.0);
  design.contamination_scale = obj.value("contamination_scale", 0.02);
  return design;
}

EasiDgpConfig parse_easi(const json& obj) {
  reject_unknown_keys(obj,
                      {"J", "L", "base_n", "price_grid", "x_sd", "price_sd", "base_seed",
                       "contamination"},
                      "easi");
  EasiDgpConfig cfg = EasiDgpConfig::reduced_default();
  const int J = obj.value("J", cfg.J), L = obj.value("L", cfg.L);
  if (J != cfg.J || L != cfg.L)
    throw ConfigError("config: only the reduced EASI design (J=3, L=1) is configurable here");
  cfg.base_n = obj.value("base_n", static_cast<std::int64_t>(cfg.base_n));
  cfg.price_grid = obj.value("price_grid", cfg.price_grid);
  cfg.x_sd = obj.value("x_sd", cfg.x_sd);
  cfg.price_sd = obj.value("price_sd", cfg.price_sd);
  cfg.base_seed = obj.value("base_seed", cfg.base_seed);
  cfg.contamination = obj.value("contamination", 0.0);
  return cfg;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (n < 1) throw ConfigError("config: n must be >= 1");
  if (reps < 1) throw ConfigError("config: reps must be >= 1");
  if (N < 1) throw ConfigError("config: N must be >= 1");
  if (B_g < 1 || B_G0 < 1) throw ConfigError("config: batch sizes must be positive");
  if (pipeline != Pipeline::first_order && T <= N)
    throw ConfigError("config: T must exceed N for refined pipelines");
  if (warm_start) warm_start->validate();
  if (!gamma0 && s0 <= 0.0) throw ConfigError("config: s0 must be positive");
  if (gamma0 && *gamma0 <= 0.0) throw ConfigError("config: gamma0 must be positive");
  if (!(lr_exponent > 0.5 && lr_exponent < 1.0))
    throw ConfigError("config: lr_exponent must lie in (1/2, 1)");
  if (nominal_level <= 0.0 || nominal_level >= 1.0)
    throw ConfigError("config: nominal_level must lie in (0,1)");
  if (parallel_workers < 1) throw ConfigError("config: parallel_workers must be >= 1");
  const bool any_jtest = jtest_plugin || jtest_debiased || jtest_online;
  if (pipeline == Pipeline::first_order && any_jtest)
    throw ConfigError("config: J-tests require a refinement stage");
  if (pipeline == Pipeline::first_order && infer_plugin)
    throw ConfigError("config: plug-in inference requires a refinement stage");
  const Eigen::VectorXd truth = true_theta();
  for (const int k : targets)
    if (k < 0 || k >= truth.size()) throw ConfigError("config: target index out of range");
  if (dgp == DgpKind::linear_iv) linear_iv.validate();
  if (dgp == DgpKind::easi) easi.validate();
}

Eigen::VectorXd ExperimentConfig::true_theta() const {
  return dgp == DgpKind::linear_iv ? linear_iv.theta : easi.pack_true_theta();
}

ExperimentConfig parse_config_json(const std::string& text) {
  json root = json::parse(text);
  reject_unknown_keys(
      root, {"dgp",           "linear_iv",      "easi",       "n",
             "reps",          "pipeline",       "N",          "T",
             "B_g",           "B_G0",           "warm_start", "s0",
             "gamma0",        "lr_exponent",    "preweight",  "weight_estimator",
             "M_MB",          "kronecker_diagonal",           "inference",
             "jtests",        "targets",        "nominal_level",
             "seed",          "parallel_workers",             "trace_stride"},
      "top level");
  ExperimentConfig cfg;
  const std::string dgp = root.value("dgp", "linear_iv");
  if (dgp == "linear_iv")
    cfg.dgp = DgpKind::linear_iv;
  else if (dgp == "easi")
    cfg.dgp = DgpKind::easi;
  else
    throw ConfigError("config: dgp must be linear_iv or easi");
  if (root.contains("linear_iv")) cfg.linear_iv = parse_linear_iv(root.at("linear_iv"));
  cfg.easi = root.contains("easi") ? parse_easi(root.at("easi")) : EasiDgpConfig::reduced_default();
  cfg.n = root.value("n", 5000);
  cfg.reps = root.value("reps", 500);
  const std::string pipe = root.value("pipeline", "first_order");
  if (pipe == "first_order")
    cfg.pipeline = Pipeline::first_order;
  else if (pipe == "first_order_refined_weight")
    cfg.pipeline = Pipeline::first_order_refined_weight;
  else if (pipe == "second_order")
    cfg.pipeline = Pipeline::second_order;
  else
    throw ConfigError("config: unknown pipeline '" + pipe + "'");
  cfg.N = root.value("N", 10000);
  cfg.T = root.value("T", 0);
  cfg.B_g = root.value("B_g", 32);
  cfg.B_G0 = root.value("B_G0", cfg.B_g);
  if (root.contains("warm_start")) {
    const auto& ws = root.at("warm_start");
    reject_unknown_keys(ws, {"B_ws", "E_ws", "gamma0_ws", "a"}, "warm_start");
    WarmStartConfig w;
    w.B_ws = ws.value("B_ws", 64);
    w.E_ws = ws.value("E_ws", 1);
    w.gamma0_ws = ws.value("gamma0_ws", 0.1);
    w.a = ws.value("a", 0.501);
    cfg.warm_start = w;
  }
  cfg.s0 = root.value("s0", 5.0);
  if (root.contains("gamma0")) cfg.gamma0 = root.at("gamma0").get<double>();
  cfg.lr_exponent = root.value("lr_exponent", 0.501);
  const std::string pw = root.value("preweight", "identity");
  if (pw == "identity")
    cfg.preweight = Preweight::identity;
  else if (pw == "tsls")
    cfg.preweight = Preweight::tsls;
  else
    throw ConfigError("config: preweight must be identity or tsls");
  const std::string we = root.value("weight_estimator", "minibatch");
  if (we == "minibatch")
    cfg.weight_estimator = WeightEstimator::minibatch;
  else if (we == "fullsample")
    cfg.weight_estimator = WeightEstimator::fullsample;
  else
    throw ConfigError("config: weight_estimator must be minibatch or fullsample");
  cfg.M_MB = root.value("M_MB", 2000);
  cfg.kronecker_diagonal = root.value("kronecker_diagonal", false);
  if (root.contains("inference")) {
    cfg.infer_random_scaling = false;
    cfg.infer_plugin = false;
    for (const auto& name : root.at("inference").get<std::vector<std::string>>()) {
      if (name == "random_scaling")
        cfg.infer_random_scaling = true;
      else if (name == "plugin")
        cfg.infer_plugin = true;
      else
        throw ConfigError("config: unknown inference method '" + name + "'");
    }
  }
  if (root.contains("jtests")) {
    for (const auto& name : root.at("jtests").get<std::vector<std::string>>()) {
      if (name == "plugin")
        cfg.jtest_plugin = true;
      else if (name == "debiased")
        cfg.jtest_debiased = true;
      else if (name == "online")
        cfg.jtest_online = true;
      else
        throw ConfigError("config: unknown J-test '" + name + "'");
    }
  }
  if (root.contains("targets")) cfg.targets = root.at("targets").get<std::vector<int>>();
  cfg.nominal_level = root.value("nominal_level", 0.95);
  cfg.seed = root.value("seed", 1);
  cfg.parallel_workers = root.value("parallel_workers", 1);
  cfg.trace_stride = root.value("trace_stride", 0);
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_json(buffer.str());
}

namespace {

Dataset generate_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.dgp == DgpKind::linear_iv ? generate_linear_iv(cfg.linear_iv, cfg.n, seed)
                                       : generate_easi(cfg.easi, cfg.n, seed);
}

MomentModel make_model(const ExperimentConfig& cfg) {
  return cfg.dgp == DgpKind::linear_iv ? model_from_linear_iv(cfg.linear_iv)
                                       : model_from_easi(cfg.easi);
}

// 2SLS-style weight: inverse instrument second moment, block-diagonal per
// share equation for the EASI system.
Eigen::MatrixXd tsls_weight(const ExperimentConfig& cfg, const Dataset& data) {
  if (cfg.dgp == DgpKind::linear_iv) {
    const int d = cfg.linear_iv.d, d_g = cfg.linear_iv.d_g;
    Eigen::MatrixXd sqq = Eigen::MatrixXd::Zero(d_g, d_g);
    for (Eigen::Index i = 0; i < data.n(); ++i) {
      const auto q = data.rows.row(i).segment(1 + d, d_g);
      sqq.selfadjointView<Eigen::Lower>().rankUpdate(q.transpose());
    }
    sqq.triangularView<Eigen::StrictlyUpper>() = sqq.transpose();
    sqq /= static_cast<double>(data.n());
    return pseudo_inverse_sym(sqq);
  }
  const int m = cfg.easi.n_instruments();
  const int K = cfg.easi.n_goods_kept();
  Eigen::MatrixXd sqq = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd q(m);
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    easi_instruments(cfg.easi, data.rows.row(i), q);
    sqq.selfadjointView<Eigen::Lower>().rankUpdate(q);
  }
  sqq.triangularView<Eigen::StrictlyUpper>() = sqq.transpose();
  sqq /= static_cast<double>(data.n());
  const Eigen::MatrixXd block = pseudo_inverse_sym(sqq);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(K * m, K * m);
  for (int j = 0; j < K; ++j) w.block(j * m, j * m, m, m) = block;
  return w;
}

struct ReplicationOutput {
  RepRecord record;
  StageTimings timings;
  Eigen::MatrixXd trace;
};

ReplicationOutput run_replication(const ExperimentConfig& cfg, const Eigen::VectorXd& truth,
                                  int rep) {
  ReplicationOutput out;
  out.record.rep = rep;
  const std::uint64_t rep_seed = Rng::derive(cfg.seed, static_cast<std::uint64_t>(rep));
  const double alpha = 1.0 - cfg.nominal_level;

  const auto rep0 = std::chrono::steady_clock::now();
  auto t0 = std::chrono::steady_clock::now();
  const Dataset data = generate_data(cfg, Rng::derive(rep_seed, 1));
  const MomentModel model = make_model(cfg);
  out.timings.generate = elapsed(t0);

  Eigen::MatrixXd weight_root;
  const bool preweighted = cfg.preweight == Preweight::tsls;
  if (preweighted) weight_root = symmetric_sqrt(tsls_weight(cfg, data), 1e-12);
  const Eigen::MatrixXd* root_ptr = preweighted ? &weight_root : nullptr;

  Rng stream(Rng::derive(rep_seed, 2));
  Eigen::VectorXd theta_start = Eigen::VectorXd::Zero(model.d);

  try {
    t0 = std::chrono::steady_clock::now();
    if (cfg.warm_start)
      theta_start = run_warm_start(model, data, *cfg.warm_start, theta_start, stream, root_ptr);
    out.timings.warm_start = elapsed(t0);

    t0 = std::chrono::steady_clock::now();
    double gamma0;
    if (cfg.gamma0) {
      gamma0 = *cfg.gamma0;
    } else {
      WarmStartConfig tuning = cfg.warm_start ? *cfg.warm_start : WarmStartConfig{};
      if (!cfg.warm_start) tuning.B_ws = cfg.B_g;
      MomentModel tuning_model = model;
      if (preweighted) tuning_model = with_weight_root(model, weight_root);
      gamma0 = select_gamma0(tuning_model, data, theta_start, tuning, cfg.B_g, cfg.s0, 10000,
                             Rng::derive(rep_seed, 3));
    }
    out.record.gamma0_used = gamma0;
    out.timings.tuning = elapsed(t0);

    const LearningRate lr_first(gamma0, cfg.lr_exponent, 0);
    const BatchSchedule sched_first(cfg.B_g, cfg.B_G0, BatchGrowth::constant, 0);
    IterationState state(theta_start, stream);

    const int n_targets = static_cast<int>(cfg.targets.size());
    std::vector<Hypothesis> hypotheses;
    hypotheses.reserve(static_cast<std::size_t>(n_targets));
    for (const int k : cfg.targets) hypotheses.push_back(Hypothesis::component(k, model.d, truth[k]));

    std::vector<RandomScalingState> rs_states;
    std::vector<StepObserver> first_hooks;
    const bool rs_in_first = cfg.infer_random_scaling && cfg.pipeline == Pipeline::first_order;
    if (rs_in_first) {
      rs_states.assign(static_cast<std::size_t>(n_targets), RandomScalingState(1));
      for (int k = 0; k < n_targets; ++k) {
        RandomScalingState* rs = &rs_states[static_cast<std::size_t>(k)];
        const int idx = cfg.targets[static_cast<std::size_t>(k)];
        first_hooks.push_back([rs, idx](const StepInfo& info) {
          rs->update(info.theta_bar.segment(idx, 1));
        });
      }
    }

    t0 = std::chrono::steady_clock::now();
    RunResult first = run_first_order(model, data, lr_first, sched_first, state, cfg.N,
                                      first_hooks, root_ptr, cfg.trace_stride);
    out.timings.first_order = elapsed(t0);
    out.trace = first.trace;

    Eigen::VectorXd theta_final = first.theta_bar;
    std::int64_t n_eff = cfg.N;
    RefinementOperators ops;
    OnlineGbarState gbar_state(model.d_g);

    if (cfg.pipeline != Pipeline::first_order) {
      t0 = std::chrono::steady_clock::now();
      const int kron_block = cfg.kronecker_diagonal
                                 ? (cfg.dgp == DgpKind::easi ? cfg.easi.n_instruments() : model.d_g)
                                 : 0;
      ops = build_operators(model, data, first.theta_bar, cfg.M_MB, cfg.B_g, cfg.weight_estimator,
                            kron_block, state.rng);
      ops.N = cfg.N;
      out.timings.operators = elapsed(t0);

      std::vector<StepObserver> refine_hooks;
      if (cfg.infer_random_scaling) {
        rs_states.assign(static_cast<std::size_t>(n_targets), RandomScalingState(1));
        for (int k = 0; k < n_targets; ++k) {
          RandomScalingState* rs = &rs_states[static_cast<std::size_t>(k)];
          const int idx = cfg.targets[static_cast<std::size_t>(k)];
          refine_hooks.push_back([rs, idx](const StepInfo& info) {
            rs->update(info.theta_bar.segment(idx, 1));
          });
        }
      }
      if (cfg.jtest_online) {
        OnlineGbarState* gb = &gbar_state;
        refine_hooks.push_back([gb](const StepInfo& info) { gb->update(info.g_batch); });
      }

      const LearningRate lr_refine(gamma0, cfg.lr_exponent, cfg.N);
      const BatchSchedule sched_refine(cfg.B_g, cfg.B_G0, BatchGrowth::logarithmic, cfg.N);
      t0 = std::chrono::steady_clock::now();
      RunResult refined =
          run_refinement(model, data, state, ops, lr_refine, sched_refine, cfg.T - cfg.N,
                         refine_hooks, cfg.pipeline == Pipeline::second_order);
      out.timings.refinement = elapsed(t0);
      theta_final = refined.theta_bar;
      n_eff = cfg.T - cfg.N;
    }

    out.record.estimate.resize(n_targets);
    for (int k = 0; k < n_targets; ++k)
      out.record.estimate[k] = theta_final[cfg.targets[static_cast<std::size_t>(k)]];

    t0 = std::chrono::steady_clock::now();
    if (cfg.infer_random_scaling) {
      for (int k = 0; k < n_targets; ++k)
        out.record.random_scaling.push_back(
            rs_wald(rs_states[static_cast<std::size_t>(k)], theta_final,
                    hypotheses[static_cast<std::size_t>(k)], cfg.n, n_eff, cfg.B_g,
                    WaldMode::random_scaling_sampling, alpha));
    }
    if (cfg.infer_plugin) {
      for (int k = 0; k < n_targets; ++k)
        out.record.plugin.push_back(plugin_wald(model, data, theta_final,
                                                hypotheses[static_cast<std::size_t>(k)], n_eff,
                                                cfg.B_g, alpha));
    }
    out.timings.inference = elapsed(t0);

    t0 = std::chrono::steady_clock::now();
    if (cfg.jtest_plugin || cfg.jtest_online || cfg.jtest_debiased) {
      const double tau = static_cast<double>(cfg.n) /
                         (static_cast<double>(n_eff) * static_cast<double>(cfg.B_g));
      if (cfg.jtest_plugin)
        out.record.j_plugin_result = j_plugin(model, data, theta_final, ops.W, tau);
      if (cfg.jtest_debiased) out.record.j_debiased_result = j_debiased(model, data, theta_final);
      if (cfg.jtest_online)
        out.record.j_online_result = j_online(gbar_state, ops.W, cfg.n, n_eff, cfg.B_g, model.d);
    }
    out.timings.jtests = elapsed(t0);

    if (cfg.dgp == DgpKind::easi) {
      const int K = cfg.easi.n_goods_kept();
      const int per_eq = 6 + 2 * cfg.easi.L;
      out.record.engel_coeffs.resize(6 * K);
      for (int j = 0; j < K; ++j)
        for (int r = 0; r < 6; ++r) out.record.engel_coeffs[j * 6 + r] = theta_final[j * per_eq + r];
    }
  } catch (const DivergenceError&) {
    out.record.diverged = true;
  }
  out.timings.total = elapsed(rep0);
  return out;
}

void parallel_over_reps(int reps, int workers, const std::function<void(int)>& body) {
  if (workers <= 1) {
    for (int r = 0; r < reps; ++r) body(r);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= reps) return;
      try {
        body(r);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int count = std::min(workers, reps);
  pool.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::string target_name(int index) { return "theta" + std::to_string(index); }

}  // namespace

double McReport::metric(const std::string& method, const std::string& target,
                        const std::string& name) const {
  for (const auto& [m, t, k, v] : metrics)
    if (m == method && t == target && k == name) return v;
  throw ConfigError("McReport: no metric " + method + "/" + target + "/" + name);
}

McReport run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const Eigen::VectorXd truth = cfg.true_theta();
  const auto wall0 = std::chrono::steady_clock::now();

  std::vector<ReplicationOutput> outputs(static_cast<std::size_t>(cfg.reps));
  parallel_over_reps(cfg.reps, cfg.parallel_workers, [&](int r) {
    outputs[static_cast<std::size_t>(r)] = run_replication(cfg, truth, r);
    if (!out_dir.empty() && cfg.trace_stride > 0 &&
        outputs[static_cast<std::size_t>(r)].trace.rows() > 0) {
      Dataset trace_ds;
      trace_ds.rows = outputs[static_cast<std::size_t>(r)].trace;
      trace_ds.columns.push_back("t");
      for (Eigen::Index j = 1; j < outputs[static_cast<std::size_t>(r)].trace.cols(); ++j)
        trace_ds.columns.push_back("theta_bar" + std::to_string(j - 1));
      write_csv(trace_ds, out_dir + "/trace_" + std::to_string(r) + ".csv");
    }
  });

  McReport report;
  // deterministic ordered fold over replication index
  for (const auto& o : outputs) {
    report.reps.push_back(o.record);
    if (o.record.diverged) ++report.diverged;
    report.timings.generate += o.timings.generate;
    report.timings.warm_start += o.timings.warm_start;
    report.timings.tuning += o.timings.tuning;
    report.timings.first_order += o.timings.first_order;
    report.timings.operators += o.timings.operators;
    report.timings.refinement += o.timings.refinement;
    report.timings.inference += o.timings.inference;
    report.timings.jtests += o.timings.jtests;
    report.timings.total += o.timings.total;
  }
  const double wall = elapsed(wall0);

  if (report.diverged * 20 > cfg.reps)
    throw TuningError("run_experiment: more than 5% of replications diverged");

  const int n_targets = static_cast<int>(cfg.targets.size());
  const int used = cfg.reps - report.diverged;
  report.metrics.emplace_back("experiment", "all", "reps_used", static_cast<double>(used));
  report.metrics.emplace_back("experiment", "all", "diverged", static_cast<double>(report.diverged));

  for (int k = 0; k < n_targets; ++k) {
    const double truth_k = truth[cfg.targets[static_cast<std::size_t>(k)]];
    double mean = 0.0;
    for (const auto& rec : report.reps)
      if (!rec.diverged) mean += rec.estimate[k];
    mean /= static_cast<double>(used);
    double var = 0.0;
    for (const auto& rec : report.reps)
      if (!rec.diverged) var += (rec.estimate[k] - mean) * (rec.estimate[k] - mean);
    var /= static_cast<double>(used);
    const double bias = mean - truth_k;
    const std::string target = target_name(cfg.targets[static_cast<std::size_t>(k)]);
    report.metrics.emplace_back("estimate", target, "bias", bias);
    report.metrics.emplace_back("estimate", target, "sd", std::sqrt(var));
    report.metrics.emplace_back("estimate", target, "rmse", std::sqrt(bias * bias + var));

    const auto coverage_rows = [&](const char* method, auto getter) {
      double cover = 0.0, length = 0.0;
      int have = 0;
      for (const auto& rec : report.reps) {
        if (rec.diverged) continue;
        const auto* res = getter(rec);
        if (!res) continue;
        ++have;
        if (res->ci_lower && res->ci_upper) {
          cover += (*res->ci_lower <= truth_k && truth_k <= *res->ci_upper) ? 1.0 : 0.0;
          length += *res->ci_upper - *res->ci_lower;
        }
      }
      if (have > 0) {
        report.metrics.emplace_back(method, target, "coverage", cover / have);
        report.metrics.emplace_back(method, target, "ci_length", length / have);
      }
    };
    coverage_rows("random_scaling", [&](const RepRecord& rec) -> const InferenceResult* {
      return static_cast<std::size_t>(k) < rec.random_scaling.size()
                 ? &rec.random_scaling[static_cast<std::size_t>(k)]
                 : nullptr;
    });
    coverage_rows("plugin", [&](const RepRecord& rec) -> const InferenceResult* {
      return static_cast<std::size_t>(k) < rec.plugin.size()
                 ? &rec.plugin[static_cast<std::size_t>(k)]
                 : nullptr;
    });
  }

  const double alpha = 1.0 - cfg.nominal_level;
  const auto jtest_rows = [&](const char* method, auto getter) {
    double rejections = 0.0;
    int have = 0;
    for (const auto& rec : report.reps) {
      if (rec.diverged) continue;
      const auto& res = getter(rec);
      if (!res) continue;
      ++have;
      rejections += (res->p_value < alpha) ? 1.0 : 0.0;
    }
    if (have > 0)
      report.metrics.emplace_back(method, "all", "rejection_rate", rejections / have);
  };
  jtest_rows("jtest_plugin", [](const RepRecord& rec) { return rec.j_plugin_result; });
  jtest_rows("jtest_debiased", [](const RepRecord& rec) { return rec.j_debiased_result; });
  jtest_rows("jtest_online", [](const RepRecord& rec) { return rec.j_online_result; });

  if (cfg.dgp == DgpKind::easi) {
    Eigen::MatrixXd coeffs(used, 6 * cfg.easi.n_goods_kept());
    Eigen::VectorXd truth_coeffs(6 * cfg.easi.n_goods_kept());
    const int per_eq = 6 + 2 * cfg.easi.L;
    for (int j = 0; j < cfg.easi.n_goods_kept(); ++j)
      for (int r = 0; r < 6; ++r) truth_coeffs[j * 6 + r] = truth[j * per_eq + r];
    int at = 0;
    for (const auto& rec : report.reps)
      if (!rec.diverged) coeffs.row(at++) = rec.engel_coeffs.transpose();
    report.metrics.emplace_back("estimate", "engel_curves", "rimse",
                                rimse(coeffs, -0.7, 0.9, 0.1, truth_coeffs));
  }

  if (!out_dir.empty()) {
    write_summary_csv(report, out_dir + "/summary.csv");
    write_reps_csv(report, cfg, out_dir + "/reps.csv");
    std::ofstream timing(out_dir + "/timings.csv");
    timing << "stage,seconds\n";
    timing << "generate," << report.timings.generate << "\n";
    timing << "warm_start," << report.timings.warm_start << "\n";
    timing << "tuning," << report.timings.tuning << "\n";
    timing << "first_order," << report.timings.first_order << "\n";
    timing << "operators," << report.timings.operators << "\n";
    timing << "refinement," << report.timings.refinement << "\n";
    timing << "inference," << report.timings.inference << "\n";
    timing << "jtests," << report.timings.jtests << "\n";
    timing << "total," << report.timings.total << "\n";
    timing << "wall," << wall << "\n";
  }
  return report;
}

double rimse(const Eigen::MatrixXd& curve_coeffs, double x_lo, double x_hi, double step,
             const Eigen::VectorXd& truth_coeffs) {
  if (curve_coeffs.rows() == 0) throw ConfigError("rimse: empty replication set");
  if (curve_coeffs.cols() != truth_coeffs.size() || curve_coeffs.cols() % 6 != 0)
    throw ConfigError("rimse: coefficient layout must be goods-major blocks of 6");
  const double intervals = (x_hi - x_lo) / step;
  const auto cells = static_cast<Eigen::Index>(std::llround(intervals));
  if (std::abs(intervals - static_cast<double>(cells)) > 1e-9 || cells < 1)
    throw ConfigError("rimse: step must divide the domain");
  const Eigen::Index goods = curve_coeffs.cols() / 6;

  double acc = 0.0;
  for (Eigen::Index rep = 0; rep < curve_coeffs.rows(); ++rep) {
    for (Eigen::Index j = 0; j < goods; ++j) {
      for (Eigen::Index m = 0; m < cells; ++m) {
        const double x = x_lo + (static_cast<double>(m) + 0.5) * step;
        double err = 0.0, xp = 1.0;
        for (int r = 0; r < 6; ++r) {
          err += (curve_coeffs(rep, j * 6 + r) - truth_coeffs[j * 6 + r]) * xp;
          xp *= x;
        }
        acc += err * err * step;
      }
    }
  }
  return std::sqrt(acc / static_cast<double>(curve_coeffs.rows()));
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_summary_csv(const McReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("write_summary_csv: cannot open " + path);
  out << "method,target,metric,value\n";
  for (const auto& [method, target, name, value] : report.metrics)
    out << method << ',' << target << ',' << name << ',' << fmt(value) << '\n';
}

std::vector<std::tuple<std::string, std::string, std::string, double>> read_summary_csv(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("read_summary_csv: cannot open " + path);
  std::string line;
  std::getline(in, line);  // header
  std::vector<std::tuple<std::string, std::string, std::string, double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string method, target, name, value;
    std::getline(ss, method, ',');
    std::getline(ss, target, ',');
    std::getline(ss, name, ',');
    std::getline(ss, value, ',');
    rows.emplace_back(method, target, name, std::stod(value));
  }
  return rows;
}

void write_reps_csv(const McReport& report, const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("write_reps_csv: cannot open " + path);
  out << "rep,diverged,gamma0";
  for (const int k : cfg.targets) out << ",est_" << target_name(k);
  if (cfg.infer_random_scaling)
    for (const int k : cfg.targets)
      out << ",rs_lo_" << target_name(k) << ",rs_hi_" << target_name(k) << ",rs_stat_"
          << target_name(k);
  if (cfg.infer_plugin)
    for (const int k : cfg.targets)
      out << ",pi_lo_" << target_name(k) << ",pi_hi_" << target_name(k) << ",pi_stat_"
          << target_name(k);
  if (cfg.jtest_plugin) out << ",j_plugin,j_plugin_p";
  if (cfg.jtest_debiased) out << ",j_debiased,j_debiased_p";
  if (cfg.jtest_online) out << ",j_online,j_online_p";
  out << '\n';

  for (const auto& rec : report.reps) {
    out << rec.rep << ',' << (rec.diverged ? 1 : 0) << ',' << fmt(rec.gamma0_used);
    const auto n_targets = cfg.targets.size();
    for (std::size_t k = 0; k < n_targets; ++k)
      out << ',' << (rec.diverged ? "nan" : fmt(rec.estimate[static_cast<Eigen::Index>(k)]));
    const auto dump_inference = [&](const std::vector<InferenceResult>& results) {
      for (std::size_t k = 0; k < n_targets; ++k) {
        if (rec.diverged || k >= results.size()) {
          out << ",nan,nan,nan";
        } else {
          out << ',' << fmt(results[k].ci_lower.value_or(std::nan(""))) << ','
              << fmt(results[k].ci_upper.value_or(std::nan(""))) << ','
              << fmt(results[k].statistic);
        }
      }
    };
    if (cfg.infer_random_scaling) dump_inference(rec.random_scaling);
    if (cfg.infer_plugin) dump_inference(rec.plugin);
    const auto dump_jtest = [&](const std::optional<JTestResult>& res) {
      if (rec.diverged || !res)
        out << ",nan,nan";
      else
        out << ',' << fmt(res->statistic) << ',' << fmt(res->p_value);
    };
    if (cfg.jtest_plugin) dump_jtest(rec.j_plugin_result);
    if (cfg.jtest_debiased) dump_jtest(rec.j_debiased_result);
    if (cfg.jtest_online) dump_jtest(rec.j_online_result);
    out << '\n';
  }
}

void run_single_estimate(const ExperimentConfig& cfg, std::ostream& out,
                         const std::string& trace_path) {
  ExperimentConfig single = cfg;
  single.reps = 1;
  const Eigen::VectorXd truth = single.true_theta();
  ReplicationOutput o = run_replication(single, truth, 0);
  if (o.record.diverged) {
    out << "estimation diverged; retune gamma0 or s0\n";
    return;
  }
  out << "gamma0 = " << o.record.gamma0_used << "\n";
  for (std::size_t k = 0; k < single.targets.size(); ++k) {
    const int idx = single.targets[k];
    out << "theta" << idx << " = " << o.record.estimate[static_cast<Eigen::Index>(k)];
    if (k < o.record.random_scaling.size() && o.record.random_scaling[k].ci_lower)
      out << "  rs_ci = [" << *o.record.random_scaling[k].ci_lower << ", "
          << *o.record.random_scaling[k].ci_upper << "]";
    if (k < o.record.plugin.size() && o.record.plugin[k].ci_lower)
      out << "  plugin_ci = [" << *o.record.plugin[k].ci_lower << ", "
          << *o.record.plugin[k].ci_upper << "]";
    out << "\n";
  }
  const auto print_j = [&](const char* name, const std::optional<JTestResult>& res) {
    if (res)
      out << name << " = " << res->statistic << " (df " << res->df << ", p " << res->p_value
          << ")\n";
  };
  print_j("J_plugin", o.record.j_plugin_result);
  print_j("J_debiased", o.record.j_debiased_result);
  print_j("J_online", o.record.j_online_result);
  if (!trace_path.empty() && o.trace.rows() > 0) {
    Dataset trace_ds;
    trace_ds.rows = o.trace;
    trace_ds.columns.push_back("t");
    for (Eigen::Index j = 1; j < o.trace.cols(); ++j)
      trace_ds.columns.push_back("theta_bar" + std::to_string(j - 1));
    write_csv(trace_ds, trace_path);
  }
}

}  // namespace slim
