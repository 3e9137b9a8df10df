#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "slim/errors.hpp"

namespace slim {

// Moore-Penrose pseudo-inverse of a symmetric PSD matrix by spectral
// truncation: eigenvalues below rel_tol * lambda_max are treated as zero.
template <typename Derived>
Eigen::MatrixXd pseudo_inverse_sym(const Eigen::MatrixBase<Derived>& m,
                                   double rel_tol = 1e-10, int* rank_out = nullptr) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  const auto& vals = es.eigenvalues();
  const double lambda_max = vals.cwiseAbs().maxCoeff();
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(vals.size());
  int rank = 0;
  if (lambda_max > 0.0) {
    const double cut = rel_tol * lambda_max;
    for (Eigen::Index i = 0; i < vals.size(); ++i) {
      if (vals[i] > cut) {
        inv[i] = 1.0 / vals[i];
        ++rank;
      }
    }
  }
  if (rank_out) *rank_out = rank;
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

// Symmetric square root with an optional eigenvalue floor.
template <typename Derived>
Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixBase<Derived>& m, double floor = 0.0) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  Eigen::VectorXd vals = es.eigenvalues().cwiseMax(floor).cwiseMax(0.0);
  return es.eigenvectors() * vals.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

// Largest eigenvalue of a symmetric PSD matrix via full eigendecomposition.
template <typename Derived>
double spectral_norm_sym_direct(const Eigen::MatrixBase<Derived>& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.derived());
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

// Largest eigenvalue of a symmetric PSD matrix via power iteration with a
// deterministic start; falls back to eigendecomposition on non-convergence.
template <typename Derived>
double spectral_norm_sym_power(const Eigen::MatrixBase<Derived>& m,
                               double rel_tol = 1e-10, int max_iter = 500) {
  const Eigen::MatrixXd mat = m.derived();
  const Eigen::Index d = mat.rows();
  if (d == 1) return std::abs(mat(0, 0));
  Eigen::VectorXd v = Eigen::VectorXd::Ones(d);
  // deterministic perturbation so the start is never orthogonal to the top
  // eigenvector of structured matrices
  for (Eigen::Index i = 0; i < d; ++i) v[i] += 1e-3 * static_cast<double>(i + 1) / static_cast<double>(d);
  v.normalize();
  double lambda = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd w = mat * v;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    w /= norm;
    const double next = w.dot(mat * w);
    if (std::abs(next - lambda) <= rel_tol * std::max(std::abs(next), 1.0)) return next;
    lambda = next;
    v.swap(w);
  }
  return spectral_norm_sym_direct(mat);
}

// ||G' G||_2 for a (possibly rectangular) matrix G.
template <typename Derived>
double gram_spectral_norm(const Eigen::MatrixBase<Derived>& g) {
  const Eigen::MatrixXd gram = g.transpose() * g;
  return spectral_norm_sym_power(gram);
}

// Lower median: element at index (len-1)/2 of the sorted values.
inline double lower_median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("lower_median: empty input");
  const std::size_t k = (v.size() - 1) / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

// Regularized lower incomplete gamma P(a, x): series for x < a+1, Lentz
// continued fraction for the complement otherwise.
inline double regularized_gamma_p(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw ConfigError("regularized_gamma_p: bad arguments");
  if (x == 0.0) return 0.0;
  const double lg = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-16) break;
    }
    return sum * std::exp(-x + a * std::log(x) - lg);
  }
  // continued fraction for Q(a, x)
  const double tiny = std::numeric_limits<double>::min() / 1e-30;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-16) break;
  }
  const double q = std::exp(-x + a * std::log(x) - lg) * h;
  return 1.0 - q;
}

inline double chi2_cdf(double x, double k) {
  if (x <= 0.0) return 0.0;
  return regularized_gamma_p(0.5 * k, 0.5 * x);
}

inline double chi2_density(double x, double k) {
  if (x <= 0.0) return 0.0;
  const double h = 0.5 * k;
  return std::exp((h - 1.0) * std::log(x) - 0.5 * x - h * std::log(2.0) - std::lgamma(h));
}

// Quantile by bracketing + bisection/Newton hybrid on the regularized gamma,
// relative tolerance 1e-10.
inline double chi2_quantile(double p, double k) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("chi2_quantile: p must be in [0,1)");
  if (p == 0.0) return 0.0;
  double lo = 0.0, hi = std::max(k, 1.0);
  while (chi2_cdf(hi, k) < p) hi *= 2.0;
  double x = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    const double f = chi2_cdf(x, k) - p;
    if (f > 0.0) {
      hi = x;
    } else {
      lo = x;
    }
    const double dens = chi2_density(x, k);
    double next = dens > 0.0 ? x - f / dens : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= 1e-10 * std::max(x, 1e-300)) return next;
    x = next;
  }
  return x;
}

// 1 - alpha/2 standard normal quantile through the chi-square route.
inline double normal_quantile(double p) {
  if (p <= 0.0 || p >= 1.0) throw ConfigError("normal_quantile: p must be in (0,1)");
  if (p == 0.5) return 0.0;
  const double q = chi2_quantile(std::abs(2.0 * p - 1.0), 1.0);
  return p > 0.5 ? std::sqrt(q) : -std::sqrt(q);
}

namespace detail {

template <typename F>
double adaptive_simpson_rec(const F& f, double a, double b, double fa, double fm, double fb,
                            double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return adaptive_simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         adaptive_simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

template <typename F>
double adaptive_simpson(const F& f, double a, double b, double tol) {
  const double m = 0.5 * (a + b);
  const double fa = f(a), fm = f(m), fb = f(b);
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return adaptive_simpson_rec(f, a, b, fa, fm, fb, whole, tol, 40);
}

}  // namespace detail

// CDF of chi2_df1 + tau * chi2_df2 at x, by adaptive quadrature of the df2
// density against the df1 CDF (absolute tolerance 1e-8). The substitution
// u = v^2 removes the density singularity at zero for df2 = 1.
inline double chi2_mixture_cdf(double x, int df1, int df2, double tau) {
  if (x <= 0.0) return 0.0;
  if (tau < 0.0) throw ConfigError("chi2_mixture_cdf: tau must be nonnegative");
  if (tau == 0.0) return chi2_cdf(x, df1);
  const double vmax = std::sqrt(x / tau);
  const auto integrand = [&](double v) {
    const double u = v * v;
    return 2.0 * v * chi2_density(u, df2) * chi2_cdf(x - tau * u, df1);
  };
  return detail::adaptive_simpson(integrand, 0.0, vmax, 1e-8);
}

}  // namespace slim
