#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "poforge/crossfit.hpp"
#include "poforge/dataset.hpp"
#include "poforge/error.hpp"
#include "poforge/estimate.hpp"

// Instrument Z = (C, W) with W continuous. The target P(a <= K_c <= b) of the
// threshold type K_c is smoothed to E[F((b-K)/h) - F((a-K)/h)], whose Riesz
// target is  int h^-1 (F'((a-w)/h) - F'((b-w)/h)) b(c, w, X) dw.

namespace poforge {

inline double biweight_pdf(double u) {
  if (u <= -1.0 || u >= 1.0) return 0.0;
  const double v = 1.0 - u * u;
  return 15.0 / 16.0 * v * v;
}

inline double biweight_cdf(double u) {
  if (u <= -1.0) return 0.0;
  if (u >= 1.0) return 1.0;
  const double u2 = u * u;
  return 15.0 / 16.0 * (u - 2.0 * u2 * u / 3.0 + u2 * u2 * u / 5.0) + 0.5;
}

// Nodes and weights on [-1, 1].
inline std::pair<std::vector<double>, std::vector<double>> gauss_legendre(int order) {
  if (order < 1) throw ValidationError("quadrature order must be positive");
  std::vector<double> x(order), w(order);
  const double pi = 3.14159265358979323846;
  for (int i = 0; i < (order + 1) / 2; ++i) {
    double z = std::cos(pi * (i + 0.75) / (order + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int k = 1; k <= order; ++k) {
        double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
      }
      dp = order * (z * p0 - p1) / (z * z - 1.0);
      double dz = p0 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-16) break;
    }
    x[i] = -z;
    x[order - 1 - i] = z;
    w[i] = w[order - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
  }
  return {x, w};
}

inline double default_bandwidth(int n, double w_lo, double w_hi, double constant = 0.5) {
  return constant * std::pow(static_cast<double>(n), -0.25) * (w_hi - w_lo);
}

namespace detail {

// Adds scale * int_lo^hi g(w) b(c, w, x_i) dw to every row of `out`.
inline void integrate_against_basis(const std::function<double(double)>& g, double lo, double hi, double scale,
                                    const BasisSpec& basis, int c, const Eigen::MatrixXd& x, int order,
                                    Eigen::MatrixXd& out) {
  if (!(hi > lo)) return;
  auto [nodes, weights] = gauss_legendre(order);
  const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
  Eigen::VectorXd row(basis.dim());
  for (int i = 0; i < x.rows(); ++i) {
    for (int k = 0; k < order; ++k) {
      const double w = mid + half * nodes[k];
      const double gw = g(w);
      if (gw == 0.0) continue;
      basis.eval_continuous(c, w, x.row(i), row);
      out.row(i) += (scale * half * weights[k] * gw) * row.transpose();
    }
  }
}

}  // namespace detail

// Smoothed-indicator target for [a, b]; Gauss-Legendre on each kernel support
// (the integrand vanishes elsewhere in [w_lo, w_hi]).
inline Eigen::MatrixXd continuous_moment_target(double a, double b, double h, const BasisSpec& basis, int c,
                                                const Eigen::MatrixXd& x, int order = 16) {
  if (basis.mode != InstrumentMode::continuous_pair) throw ValidationError("continuous moment target needs a continuous-pair basis");
  if (!(h > 0.0)) throw ValidationError("bandwidth must be positive");
  if (order < 8) throw ValidationError("quadrature order must be at least 8");
  if (!(a > basis.w_lo && b < basis.w_hi && a < b)) throw ValidationError("[a, b] must lie inside (w_lo, w_hi)");
  if (c < 0 || c > 1) throw ValidationError("binary instrument component must be 0 or 1");
  if (x.cols() != basis.m) throw DimensionError("covariate matrix does not match the basis");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), basis.dim());
  auto bump = [h](double e) { return [h, e](double w) { return biweight_pdf((e - w) / h) / h; }; };
  detail::integrate_against_basis(bump(a), std::max(basis.w_lo, a - h), std::min(basis.w_hi, a + h), 1.0, basis, c, x,
                                  order, out);
  detail::integrate_against_basis(bump(b), std::max(basis.w_lo, b - h), std::min(basis.w_hi, b + h), -1.0, basis, c, x,
                                  order, out);
  return out;
}

// Target int l'(w) b(c, w, X) dw over [w_lo, w_hi] for a smooth l vanishing at the ends.
inline Eigen::MatrixXd continuous_moment_target(const std::function<double(double)>& dl, const BasisSpec& basis, int c,
                                                const Eigen::MatrixXd& x, int order = 32) {
  if (basis.mode != InstrumentMode::continuous_pair) throw ValidationError("continuous moment target needs a continuous-pair basis");
  if (order < 8) throw ValidationError("quadrature order must be at least 8");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), basis.dim());
  detail::integrate_against_basis(dl, basis.w_lo, basis.w_hi, 1.0, basis, c, x, order, out);
  return out;
}

// Double-robust estimate of E[l(K_c)] from the regression of 1{T = t_on} on
// b(C, W, X) and the Riesz fit with the given targets.
inline EstimateResult estimate_continuous_functional(EstimationContext& ctx, const Eigen::MatrixXd& targets, int t_on,
                                                     std::string id = "") {
  const Dataset& data = ctx.data();
  if (ctx.basis().mode != InstrumentMode::continuous_pair) throw ValidationError("continuous estimator needs a continuous-pair basis");
  DrTerm term;
  term.name = "t" + std::to_string(t_on);
  term.regression_key = "T=" + std::to_string(t_on);
  term.response = detail::treatment_indicator(data, t_on);
  term.targets = targets;
  EstimateResult r = dr_estimate(ctx.fitter(), {term}, data.omega, std::move(id));
  r.weighted = data.weighted;
  return r;
}

}  // namespace poforge
