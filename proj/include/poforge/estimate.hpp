#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/crossfit.hpp"
#include "poforge/dataset.hpp"
#include "poforge/error.hpp"
#include "poforge/identify.hpp"
#include "poforge/model.hpp"

namespace poforge {

// Fixed functions that replace (add to) a fitted nuisance: `regression` shifts
// the fitted P(T=t|Z,X) or E[rho(Y)1{T=t}|Z,X]; `riesz` shifts the fitted
// representer b'gamma. Arguments: treatment index, instrument index, covariates.
struct Corruption {
  std::function<double(int, int, const Eigen::VectorXd&)> regression;
  std::function<double(int, int, const Eigen::VectorXd&)> riesz;
};

struct EstimatorSettings {
  int folds = 5;  // K; 1 means the no-split path
  std::uint64_t fold_seed = 20240101;
  CvSettings cv;
  int threads = 1;
  double u_min = 0.01;
  double p_min = 0.005;
  Corruption corruption;
};

// Shared state for estimating many functionals on one dataset: the design,
// the design with the instrument set to each value, the fold plan and the
// fold-wise nuisance fitters.
class EstimationContext {
 public:
  EstimationContext(const Dataset& data, const BasisSpec& basis, const EstimatorSettings& settings)
      : data_(data), basis_(basis), settings_(settings) {
    if (basis.m != data.m()) throw DimensionError("basis expects " + std::to_string(basis.m) + " covariates, data has " +
                                                  std::to_string(data.m()));
    plan_ = settings.folds == 1 ? FoldPlan::no_split(data.n()) : make_folds(data.n(), settings.folds, settings.fold_seed);
    fitter_ = std::make_unique<CrossFitter>(design_matrix(basis, data), data.omega, plan_, settings.cv, settings.threads);
    if (basis.mode == InstrumentMode::discrete)
      for (int j = 0; j < basis.q; ++j) at_.push_back(::poforge::design_at(basis, data, j));
  }

  const Dataset& data() const { return data_; }
  const BasisSpec& basis() const { return basis_; }
  const EstimatorSettings& settings() const { return settings_; }
  const FoldPlan& plan() const { return plan_; }
  CrossFitter& fitter() { return *fitter_; }
  const Eigen::MatrixXd& design() const { return fitter_->design(); }
  const Eigen::MatrixXd& design_at(int j) const { return at_.at(j); }

  CrossFitter& covariate_fitter() {
    if (!ffitter_)
      ffitter_ = std::make_unique<CrossFitter>(covariate_design(data_), data_.omega, plan_, settings_.cv, settings_.threads);
    return *ffitter_;
  }

 private:
  const Dataset& data_;
  BasisSpec basis_;
  EstimatorSettings settings_;
  FoldPlan plan_;
  std::unique_ptr<CrossFitter> fitter_;
  std::unique_ptr<CrossFitter> ffitter_;
  std::vector<Eigen::MatrixXd> at_;
};

namespace detail {

inline Eigen::VectorXd multiplier(const Dataset& data, std::optional<int> covariate) {
  if (!covariate) return Eigen::VectorXd::Ones(data.n());
  if (*covariate < 0 || *covariate >= data.m())
    throw DimensionError("covariate index " + std::to_string(*covariate) + " out of range");
  return data.x.col(*covariate);
}

// Score term for treatment m of solution `sol` with regression response `resp`.
inline DrTerm make_term(EstimationContext& ctx, const IdentificationSolution& sol, int m, const Eigen::VectorXd& resp,
                        std::string key, std::optional<int> covariate) {
  const Dataset& data = ctx.data();
  const int n = data.n(), p = ctx.basis().dim();
  const Eigen::VectorXd mult = multiplier(data, covariate);
  DrTerm term;
  term.name = "t" + std::to_string(m);
  term.regression_key = std::move(key);
  // The representer depends only on (m, s_{.,m}, covariate multiplier).
  term.riesz_key = "M:" + std::to_string(m) + ":" + std::to_string(covariate ? *covariate : -1);
  for (int j = 0; j < sol.q; ++j) {
    char buf[40];
    std::snprintf(buf, sizeof buf, ":%a", sol.at(j, m));
    term.riesz_key += buf;
  }
  term.response = resp;
  term.targets = Eigen::MatrixXd::Zero(n, p);
  for (int j = 0; j < sol.q; ++j) {
    const double s = sol.at(j, m);
    if (s != 0.0) term.targets.noalias() += s * ctx.design_at(j);
  }
  term.targets.array().colwise() *= mult.array();
  const Corruption& c = ctx.settings().corruption;
  if (c.regression) {
    term.pred_offset.resize(n);
    term.plugin_offset.setZero(n);
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd xi = data.x.row(i).transpose();
      term.pred_offset(i) = c.regression(m, data.z(i), xi);
      for (int j = 0; j < sol.q; ++j)
        if (sol.at(j, m) != 0.0) term.plugin_offset(i) += mult(i) * sol.at(j, m) * c.regression(m, j, xi);
    }
  }
  if (c.riesz) {
    term.riesz_offset.resize(n);
    for (int i = 0; i < n; ++i) term.riesz_offset(i) = c.riesz(m, data.z(i), data.x.row(i).transpose());
  }
  return term;
}

inline void require_identified(const IdentificationSolution& sol, FunctionalKind kind) {
  if (sol.kind != kind)
    throw ValidationError(kind == FunctionalKind::type ? "expected a type-functional solution"
                                                       : "expected an outcome-functional solution");
  if (!sol.identified)
    throw IdentificationError("functional is not identified (residual " + std::to_string(sol.residual) +
                              "); run the identify command for details");
}

inline Eigen::VectorXd treatment_indicator(const Dataset& data, int m) {
  Eigen::VectorXd v(data.n());
  for (int i = 0; i < data.n(); ++i) v(i) = data.t(i) == m ? 1.0 : 0.0;
  return v;
}

}  // namespace detail

inline EstimateResult estimate_type_functional(EstimationContext& ctx, const IdentificationSolution& sol,
                                               std::optional<int> covariate = std::nullopt, std::string id = "") {
  detail::require_identified(sol, FunctionalKind::type);
  const Dataset& data = ctx.data();
  if (sol.q != ctx.basis().q) throw DimensionError("solution and basis disagree on the number of instrument values");
  std::vector<DrTerm> terms;
  for (int m = 0; m < sol.d; ++m) {
    if (!sol.touches(m)) continue;
    terms.push_back(detail::make_term(ctx, sol, m, detail::treatment_indicator(data, m), "T=" + std::to_string(m), covariate));
  }
  EstimateResult r = dr_estimate(ctx.fitter(), terms, data.omega, std::move(id));
  r.weighted = data.weighted;
  return r;
}

inline EstimateResult estimate_outcome_functional(EstimationContext& ctx, const IdentificationSolution& sol,
                                                  const Rho& rho, std::optional<int> covariate = std::nullopt,
                                                  std::string id = "") {
  detail::require_identified(sol, FunctionalKind::outcome);
  if (!rho.bounded()) throw ValidationError("outcome transform must be bounded (clip the identity to [y_lo, y_hi])");
  const Dataset& data = ctx.data();
  const int t = sol.target_treatment;
  Eigen::VectorXd resp(data.n());
  for (int i = 0; i < data.n(); ++i) resp(i) = data.t(i) == t ? rho(data.y(i)) : 0.0;
  std::vector<DrTerm> terms;
  if (sol.touches(t)) {
    std::string key = rho.kind == Rho::Kind::constant && rho.value == 1.0 ? "T=" + std::to_string(t)
                                                                          : "T=" + std::to_string(t) + "|" + rho.describe();
    terms.push_back(detail::make_term(ctx, sol, t, resp, key, covariate));
  }
  EstimateResult r = dr_estimate(ctx.fitter(), terms, data.omega, std::move(id));
  r.weighted = data.weighted;
  return r;
}

inline EstimateResult estimate_type_functional(const Dataset& data, const ModelSpec& model, const IdentificationSolution& sol,
                                               const BasisSpec& basis, const EstimatorSettings& settings,
                                               std::optional<int> covariate = std::nullopt) {
  validate_dataset(data, model.d(), model.q());
  if (settings.folds < 2) throw ValidationError("K = 1 is only available through estimate_weighted_no_split");
  EstimationContext ctx(data, basis, settings);
  return estimate_type_functional(ctx, sol, covariate);
}

inline EstimateResult estimate_outcome_functional(const Dataset& data, const ModelSpec& model,
                                                  const IdentificationSolution& sol, const BasisSpec& basis,
                                                  const Rho& rho, const EstimatorSettings& settings,
                                                  std::optional<int> covariate = std::nullopt) {
  validate_dataset(data, model.d(), model.q());
  if (settings.folds < 2) throw ValidationError("K = 1 is only available through estimate_weighted_no_split");
  EstimationContext ctx(data, basis, settings);
  return estimate_outcome_functional(ctx, sol, rho, covariate);
}

// Full-sample nuisances, lambda = sum omega_i score_i, se = sqrt(sum omega^2 psi^2).
// Dispatches on the solution kind; `rho` is used for outcome solutions.
inline EstimateResult estimate_weighted_no_split(const Dataset& data, const ModelSpec& model,
                                                 const IdentificationSolution& sol, const BasisSpec& basis,
                                                 const EstimatorSettings& settings, const Rho& rho = Rho::constant(1.0),
                                                 std::optional<int> covariate = std::nullopt) {
  validate_dataset(data, model.d(), model.q());
  EstimatorSettings s = settings;
  s.folds = 1;
  EstimationContext ctx(data, basis, s);
  EstimateResult r = sol.kind == FunctionalKind::type ? estimate_type_functional(ctx, sol, covariate)
                                                      : estimate_outcome_functional(ctx, sol, rho, covariate);
  r.weighted = true;
  return r;
}

}  // namespace poforge
