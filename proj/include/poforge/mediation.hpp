#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/crossfit.hpp"
#include "poforge/estimate.hpp"
#include "poforge/identify.hpp"

// Orthogonal scores for E[rho(Y(0,0)) 1{CN}] and E[rho(Y(1,1)) 1{CA}] in the
// relocation/mediator model under EIMC. Nuisances:
//   m(z,X)   regression of rho(Y)1{T=t_own} on b
//   p_t(z,X) regressions of 1{T=t} on b
//   kappa_c  Riesz fit with target +-(b(0,X) - b(1,X))
//   u, c     linear fits on f(X) = [1, X] built from kappa_c
// The score has the six additive terms of the no-split mediation algorithm.

namespace poforge {

enum class MediationSide { cn, ca };

namespace detail {

inline Eigen::VectorXd indicator_of(const Dataset& data, std::initializer_list<int> ts) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(data.n());
  for (int i = 0; i < data.n(); ++i)
    for (int t : ts)
      if (data.t(i) == t) v(i) = 1.0;
  return v;
}

inline EstimateResult mediation_score(EstimationContext& ctx, const MtoLayout& l, const Rho& rho, MediationSide side,
                                      std::string id) {
  const Dataset& data = ctx.data();
  const BasisSpec& basis = ctx.basis();
  if (basis.mode != InstrumentMode::discrete || basis.q != 2)
    throw ValidationError("mediation scores need a binary discrete instrument");
  if (!rho.bounded()) throw ValidationError("outcome transform must be bounded (clip the identity to [y_lo, y_hi])");
  const int n = data.n();
  const bool cn = side == MediationSide::cn;
  // own: the treatment whose outcome is targeted; side_t: the treatment whose
  // mass identifies the group (T=(1,0) for CN, T=(0,1) for CA).
  const int own = cn ? l.t00 : l.t11;
  const int side_t = cn ? l.t10 : l.t01;
  // "first" instrument value of the differences: z=0 for CN, z=1 for CA.
  const int za = cn ? l.z0 : l.z1;
  const int zb = cn ? l.z1 : l.z0;

  Eigen::VectorXd d_own = indicator_of(data, {own});
  Eigen::VectorXd d_side = indicator_of(data, {side_t});
  Eigen::VectorXd m0 = indicator_of(data, {l.t00, l.t10});  // mediator off
  Eigen::VectorXd resp(n);
  for (int i = 0; i < n; ++i) resp(i) = d_own(i) * rho(data.y(i));

  CrossFitter& fb = ctx.fitter();
  const std::string rkey = "T=" + std::to_string(own) + "|" + rho.describe();
  const auto beta_m = fb.regression(rkey, resp);
  const auto beta_own = fb.regression("T=" + std::to_string(own), d_own);
  const auto beta_side = fb.regression("T=" + std::to_string(side_t), d_side);
  const Eigen::MatrixXd& b = ctx.design();
  const Eigen::MatrixXd& ba = ctx.design_at(za);
  const Eigen::MatrixXd& bb = ctx.design_at(zb);
  const auto gamma = fb.riesz("kappa_c:" + std::to_string(za), ba - bb);

  const int K = fb.folds();
  std::vector<Eigen::VectorXd> kappa(K);
  for (int k = 0; k < K; ++k) kappa[k] = b * gamma.coef[k];

  CrossFitter& ff = ctx.covariate_fitter();
  // CN: pi_cc from +1{M=0}kappa, pi_cn from -1{T=10}kappa.
  // CA: pi_cc from -1{M=0}kappa, pi_ca from -1{T=01}kappa.
  const double sgn_cc = cn ? 1.0 : -1.0;
  auto pi_cc = ff.regression_per_fold([&](int k) { Eigen::VectorXd v = sgn_cc * m0.cwiseProduct(kappa[k]); return v; });
  auto pi_g = ff.regression_per_fold([&](int k) { Eigen::VectorXd v = -d_side.cwiseProduct(kappa[k]); return v; });
  Eigen::MatrixXd f = covariate_design(data);

  Eigen::VectorXd score = Eigen::VectorXd::Zero(n);
  int floored = 0, clipped = 0;
  const double u_min = ctx.settings().u_min;
  for (int k = 0; k < K; ++k) {
    for (int i : fb.members()[k]) {
      const double kap = kappa[k](i);
      const double mh = b.row(i).dot(beta_m.coef[k]);
      const double dm = ba.row(i).dot(beta_m.coef[k]) - bb.row(i).dot(beta_m.coef[k]);
      const double po = b.row(i).dot(beta_own.coef[k]);
      const double dpo = ba.row(i).dot(beta_own.coef[k]) - bb.row(i).dot(beta_own.coef[k]);
      const double ps = b.row(i).dot(beta_side.coef[k]);
      const double dps = ba.row(i).dot(beta_side.coef[k]) - bb.row(i).dot(beta_side.coef[k]);
      const double g_hat = f.row(i).dot(pi_g.coef[k]);
      double u = f.row(i).dot(pi_cc.coef[k]) + g_hat;
      if (u < u_min) {
        u = u_min;
        ++floored;
      }
      double c = g_hat / u;
      if (c < 0.0 || c > 1.0) {
        c = std::clamp(c, 0.0, 1.0);
        ++clipped;
      }
      score(i) = (resp(i) - mh) * c * kap + dm * c - (dm / u) * (d_side(i) - ps) * kap - (dm / u) * dps -
                 (dm * c / u) * (d_own(i) - po) * kap - (dm * c / u) * dpo;
    }
  }
  EstimateResult r = finalize_scores(std::move(id), score, data.omega);
  r.K = K;
  r.fold_seed = fb.plan().seed;
  r.weighted = data.weighted;
  const std::string tag = cn ? "cn" : "ca";
  for (int k = 0; k < K; ++k) {
    r.nuisance.push_back({tag + ":m", k, beta_m.alpha[k]});
    r.nuisance.push_back({tag + ":p_own", k, beta_own.alpha[k]});
    r.nuisance.push_back({tag + ":p_side", k, beta_side.alpha[k]});
    r.nuisance.push_back({tag + ":kappa_c", k, gamma.alpha[k]});
    r.nuisance.push_back({tag + ":pi_cc", k, pi_cc.alpha[k]});
    r.nuisance.push_back({tag + (cn ? ":pi_cn" : ":pi_ca"), k, pi_g.alpha[k]});
  }
  if (floored > 0.05 * n)
    r.warnings.push_back("u(X) below the floor " + std::to_string(u_min) + " for " + std::to_string(floored) + " of " +
                         std::to_string(n) + " observations");
  if (clipped > 0) r.warnings.push_back("c(X) clipped to [0,1] for " + std::to_string(clipped) + " observations");
  return r;
}

inline MtoLayout require_layout(const ModelSpec& model) {
  auto l = mto_layout(model);
  if (!l) throw ValidationError("mediation scores need treatments 00,01,10,11 and instrument values 0,1");
  return *l;
}

}  // namespace detail

inline EstimateResult mediation_cn(EstimationContext& ctx, const ModelSpec& model, const Rho& rho, std::string id = "") {
  return detail::mediation_score(ctx, detail::require_layout(model), rho, MediationSide::cn, std::move(id));
}

inline EstimateResult mediation_ca(EstimationContext& ctx, const ModelSpec& model, const Rho& rho, std::string id = "") {
  return detail::mediation_score(ctx, detail::require_layout(model), rho, MediationSide::ca, std::move(id));
}

// Standalone forms on the no-split path unless settings.folds >= 2.
inline EstimateResult mediation_cn(const Dataset& data, const ModelSpec& model, const Rho& rho,
                                   const EstimatorSettings& settings) {
  validate_dataset(data, model.d(), model.q());
  EstimationContext ctx(data, BasisSpec::discrete(2, data.m()), settings);
  return mediation_cn(ctx, model, rho);
}

inline EstimateResult mediation_ca(const Dataset& data, const ModelSpec& model, const Rho& rho,
                                   const EstimatorSettings& settings) {
  validate_dataset(data, model.d(), model.q());
  EstimationContext ctx(data, BasisSpec::discrete(2, data.m()), settings);
  return mediation_ca(ctx, model, rho);
}

}  // namespace poforge
