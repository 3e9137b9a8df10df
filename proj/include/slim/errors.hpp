#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace slim {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TuningError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RefinementError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InferenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when an iterate goes non-finite or leaves the trust region; carries
// the offending iteration and parameter vector for diagnostics.
struct DivergenceError : std::runtime_error {
  DivergenceError(std::int64_t t_in, Eigen::VectorXd theta_in)
      : std::runtime_error("iterate diverged at t=" + std::to_string(t_in)),
        t(t_in),
        theta(std::move(theta_in)) {}
  std::int64_t t;
  Eigen::VectorXd theta;
};

}  // namespace slim
