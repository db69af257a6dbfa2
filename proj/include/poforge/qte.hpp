#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/crossfit.hpp"
#include "poforge/error.hpp"
#include "poforge/inference.hpp"
#include "poforge/model.hpp"

namespace poforge {

// Running maximum, then clipped to [0,1].
inline Eigen::VectorXd monotonize_cdf(const Eigen::VectorXd& f) {
  Eigen::VectorXd out(f.size());
  double run = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < f.size(); ++k) {
    run = std::max(run, f(k));
    out(k) = std::clamp(run, 0.0, 1.0);
  }
  return out;
}

// Smallest grid point with F >= tau; the last grid point when none is.
inline double generalized_inverse(const std::vector<double>& grid, const Eigen::VectorXd& f, double tau, bool* clipped = nullptr) {
  for (std::size_t k = 0; k < grid.size(); ++k)
    if (f(static_cast<Eigen::Index>(k)) >= tau) return grid[k];
  if (clipped) *clipped = true;
  return grid.back();
}

// One arm: lambda(1{Y <= y} * group) for a given y, and the group probability.
struct QteArm {
  std::function<EstimateResult(const Rho&)> outcome;
  EstimateResult group;
};

struct QteResult {
  std::vector<double> taus;
  std::vector<double> q1, q0, qte;
  Eigen::VectorXd cdf1, cdf0;  // monotonized
  std::vector<EstimateResult> curve1, curve0;  // per grid point, kept for the bootstrap
  std::vector<std::string> warnings;
};

inline void check_qte_grids(const std::vector<double>& ygrid, const std::vector<double>& taus) {
  if (ygrid.empty()) throw ValidationError("y-grid is empty");
  for (std::size_t k = 1; k < ygrid.size(); ++k)
    if (!(ygrid[k] > ygrid[k - 1])) throw ValidationError("y-grid must be strictly increasing");
  for (double t : taus)
    if (!(t > 0.0 && t < 1.0)) throw ValidationError("quantile levels must lie in (0,1)");
}

inline QteResult estimate_qte(const QteArm& treated, const QteArm& control, const std::vector<double>& ygrid,
                              const std::vector<double>& taus, double p_min, bool keep_curves = false) {
  check_qte_grids(ygrid, taus);
  for (const QteArm* a : {&treated, &control})
    if (!(a->group.lambda_hat >= p_min))
      throw NumericalError("group probability " + std::to_string(a->group.lambda_hat) + " is below p_min");
  QteResult out;
  out.taus = taus;
  const Eigen::Index G = static_cast<Eigen::Index>(ygrid.size());
  Eigen::VectorXd raw1(G), raw0(G);
  for (Eigen::Index k = 0; k < G; ++k) {
    EstimateResult e1 = treated.outcome(Rho::indicator(ygrid[k]));
    EstimateResult e0 = control.outcome(Rho::indicator(ygrid[k]));
    raw1(k) = e1.lambda_hat / treated.group.lambda_hat;
    raw0(k) = e0.lambda_hat / control.group.lambda_hat;
    if (keep_curves) {
      out.curve1.push_back(std::move(e1));
      out.curve0.push_back(std::move(e0));
    }
  }
  out.cdf1 = monotonize_cdf(raw1);
  out.cdf0 = monotonize_cdf(raw0);
  bool clipped = false;
  for (double t : taus) {
    double a = generalized_inverse(ygrid, out.cdf1, t, &clipped);
    double b = generalized_inverse(ygrid, out.cdf0, t, &clipped);
    out.q1.push_back(a);
    out.q0.push_back(b);
    out.qte.push_back(a - b);
  }
  if (clipped) out.warnings.push_back("a quantile lies above the y-grid; the grid maximum was used");
  return out;
}

struct QteBootstrap {
  std::vector<Interval> ci;  // per tau
};

// Pointwise intervals: each replicate rebuilds both CDF curves from the same
// W draw, monotonizes, inverts, and differences.
inline QteBootstrap qte_bootstrap(const QteResult& res, const QteArm& treated, const QteArm& control,
                                  const std::vector<double>& ygrid, int B, WeightLaw law, std::uint64_t seed,
                                  double level, int threads = 1) {
  if (res.curve1.size() != ygrid.size()) throw ValidationError("QTE bootstrap needs the per-grid estimates (keep_curves)");
  std::vector<const EstimateResult*> reg;
  reg.push_back(&treated.group);
  reg.push_back(&control.group);
  for (const auto& e : res.curve1) reg.push_back(&e);
  for (const auto& e : res.curve0) reg.push_back(&e);
  BootstrapDraws d = multiplier_bootstrap(reg, B, law, seed, threads);
  const Eigen::Index G = static_cast<Eigen::Index>(ygrid.size());
  std::vector<std::vector<double>> dev(res.taus.size(), std::vector<double>(B));
  for (int b = 0; b < B; ++b) {
    Eigen::VectorXd f1(G), f0(G);
    for (Eigen::Index k = 0; k < G; ++k) {
      f1(k) = d.draws(b, 2 + k) / d.draws(b, 0);
      f0(k) = d.draws(b, 2 + G + k) / d.draws(b, 1);
    }
    f1 = monotonize_cdf(f1);
    f0 = monotonize_cdf(f0);
    for (std::size_t t = 0; t < res.taus.size(); ++t) {
      double q = generalized_inverse(ygrid, f1, res.taus[t]) - generalized_inverse(ygrid, f0, res.taus[t]);
      dev[t][b] = std::abs(q - res.qte[t]);
    }
  }
  QteBootstrap out;
  for (std::size_t t = 0; t < res.taus.size(); ++t) out.ci.push_back(symmetric_interval(res.qte[t], dev[t], level));
  return out;
}

}  // namespace poforge
