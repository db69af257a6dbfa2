#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/continuous.hpp"
#include "poforge/crossfit.hpp"
#include "poforge/derived.hpp"
#include "poforge/estimate.hpp"
#include "poforge/identify.hpp"
#include "poforge/inference.hpp"
#include "poforge/mediation.hpp"
#include "poforge/model.hpp"
#include "poforge/parallel.hpp"
#include "poforge/qte.hpp"
#include "poforge/simulate.hpp"

namespace poforge {

// Quantile difference between Y(treated) and Y(control) within a group of types.
struct QteSpec {
  std::string id;
  std::string treated;
  std::string control;
  std::vector<double> group;  // indicator table over types
  std::vector<double> ygrid;
  std::vector<double> taus;
};

// P(a <= K_c <= b) for the threshold of instrument component c.
struct ContinuousTarget {
  std::string id;
  int c = 1;
  double a = 0.25;
  double b = 0.75;
  std::string treatment = "1";    // T = treatment iff K_C > W
  std::optional<double> bandwidth;
  double bandwidth_constant = 0.5;
  int order = 16;
};

struct BootstrapSettings {
  int B = 0;  // 0: analytic SEs only
  WeightLaw law = WeightLaw::normal;
  std::uint64_t seed = 1;
  double level = 0.95;
  bool qte = true;  // pointwise QTE intervals (one bootstrap over the whole y-grid)
};

struct EstimationPlan {
  std::vector<FunctionalSpec> functionals;
  std::vector<QteSpec> qte;
  std::vector<ContinuousTarget> continuous;
  EstimatorSettings settings;
  BootstrapSettings bootstrap;
  int degree = 3;  // polynomial degree in w for the continuous-pair basis
};

struct FunctionalEstimate {
  std::string id;
  std::string route;  // linear, mediation_cn, mediation_ca, derived, continuous, qte
  double point = 0.0;
  double se = 0.0;
  std::optional<Interval> ci;
  int n = 0;
  int K = 1;
  std::vector<NuisanceRecord> nuisance;
  std::vector<std::string> warnings;
};

struct QteEstimate {
  std::string id;
  QteResult result;
  std::vector<Interval> ci;  // per tau when bootstrapped
};

struct PlanResult {
  std::vector<FunctionalEstimate> estimates;
  std::vector<QteEstimate> qte;
  std::map<std::string, EstimateResult> components;  // non-derived estimates by id
  std::optional<BootstrapDraws> draws;
  std::vector<std::string> warnings;

  const FunctionalEstimate& find(const std::string& id) const {
    for (const auto& e : estimates)
      if (e.id == id) return e;
    throw ValidationError("no estimate named '" + id + "'");
  }
};

namespace detail {

inline FunctionalEstimate summarize(const EstimateResult& r, std::string route) {
  FunctionalEstimate e;
  e.id = r.id;
  e.route = std::move(route);
  e.point = r.lambda_hat;
  e.se = r.se;
  e.n = r.n;
  e.K = r.K;
  e.nuisance = r.nuisance;
  e.warnings = r.warnings;
  return e;
}

inline EstimateResult estimate_group(EstimationContext& ctx, const ModelSpec& model, const std::vector<double>& group,
                                     const std::string& id) {
  IdentificationSolution sol = solve_type_functional(model, group);
  if (!sol.identified) throw IdentificationError("QTE group '" + id + "' is not identified");
  return estimate_type_functional(ctx, sol, std::nullopt, id);
}

}  // namespace detail

// Estimates every functional of the plan on one dataset. Non-derived
// functionals share one fold plan and one set of nuisance fitters; derived
// functionals are linearized for analytic SEs and bootstrapped jointly with
// their components through the delta method.
inline PlanResult run_plan(const Dataset& data, const ModelSpec& model, const EstimationPlan& plan) {
  auto diag = validate_model(model);
  if (!diag.empty()) throw ValidationError("invalid model: " + diag.front());
  validate_dataset(data, model.d(), model.q());
  const bool cont = model.instruments.mode == InstrumentMode::continuous_pair;
  if (cont != data.continuous())
    throw DataError(cont ? "continuous-pair model needs a w column" : "discrete model given continuous instrument data");
  const EstimatorSettings& st = plan.settings;
  BasisSpec basis = cont ? BasisSpec::continuous(data.m(), plan.degree, model.instruments.w_lo, model.instruments.w_hi)
                         : BasisSpec::discrete(model.q(), data.m());
  EstimationContext ctx(data, basis, st);

  PlanResult out;
  std::vector<std::string> order;
  auto add = [&](EstimateResult r, const std::string& route) {
    if (out.components.count(r.id)) throw ValidationError("duplicate functional id '" + r.id + "'");
    out.estimates.push_back(detail::summarize(r, route));
    order.push_back(r.id);
    out.components.emplace(r.id, std::move(r));
  };

  for (const auto& f : plan.functionals) {
    if (f.kind == FunctionalKind::derived) continue;
    if (cont) throw ValidationError("functional '" + f.id + "': continuous-pair models take continuous targets only");
    if (f.kind == FunctionalKind::type) {
      IdentificationSolution sol = solve_type_functional(model, f.ell);
      if (!sol.identified)
        throw IdentificationError("functional '" + f.id + "' is not identified (residual " + std::to_string(sol.residual) +
                                  "); run the identify command for details");
      add(estimate_type_functional(ctx, sol, f.covariate, f.id), "linear");
      continue;
    }
    IdentificationSolution sol = solve_outcome_functional(model, f.treatment, f.ell);
    if (sol.identified) {
      add(estimate_outcome_functional(ctx, sol, f.rho, f.covariate, f.id), "linear");
      continue;
    }
    MediationTarget mt = mediation_target(model, f);
    if (mt == MediationTarget::cn) {
      add(mediation_cn(ctx, model, f.rho, f.id), "mediation_cn");
    } else if (mt == MediationTarget::ca) {
      add(mediation_ca(ctx, model, f.rho, f.id), "mediation_ca");
    } else {
      throw IdentificationError("functional '" + f.id + "' is not identified (residual " + std::to_string(sol.residual) +
                                ")" + (f.assume == Assumption::none && mto_layout(model) ? "; EIMC is not assumed" : "") +
                                "; run the identify command for details");
    }
  }

  for (const auto& ct : plan.continuous) {
    if (!cont) throw ValidationError("continuous target '" + ct.id + "' needs a continuous-pair model");
    const double h = ct.bandwidth ? *ct.bandwidth
                                  : default_bandwidth(data.n(), basis.w_lo, basis.w_hi, ct.bandwidth_constant);
    Eigen::MatrixXd targets = continuous_moment_target(ct.a, ct.b, h, basis, ct.c, data.x, ct.order);
    EstimateResult r = estimate_continuous_functional(ctx, targets, model.treatment_index(ct.treatment), ct.id);
    r.nuisance.push_back({"bandwidth", -1, h});
    add(std::move(r), "continuous");
  }

  // Derived functionals, in declaration order (they may reference each other).
  std::map<std::string, DerivedEstimate> derived;
  for (const auto& f : plan.functionals) {
    if (f.kind != FunctionalKind::derived) continue;
    std::vector<const EstimateResult*> reg;
    std::vector<EstimateResult> lifted;
    lifted.reserve(derived.size());
    for (const auto& [id, r] : out.components) reg.push_back(&r);
    for (const auto& [id, d] : derived) {
      EstimateResult e;
      e.id = id;
      e.lambda_hat = d.point;
      e.psi = d.psi.size() ? d.psi : Eigen::VectorXd::Zero(data.n());
      e.v = data.omega;
      e.n = data.n();
      lifted.push_back(std::move(e));
    }
    for (const auto& e : lifted) reg.push_back(&e);
    DerivedEstimate d = derive(f.combine, reg, st.p_min, f.id);
    FunctionalEstimate fe;
    fe.id = f.id;
    fe.route = "derived";
    fe.point = d.point;
    fe.se = d.se;
    fe.n = data.n();
    fe.K = ctx.plan().K;
    out.estimates.push_back(fe);
    derived.emplace(f.id, std::move(d));
  }

  for (const auto& qs : plan.qte) {
    QteArm treated, control;
    const std::string gid = qs.id + ":group";
    EstimateResult group = detail::estimate_group(ctx, model, qs.group, gid);
    IdentificationSolution s1 = solve_outcome_functional(model, qs.treated, qs.group);
    IdentificationSolution s0 = solve_outcome_functional(model, qs.control, qs.group);
    if (!s1.identified || !s0.identified) throw IdentificationError("QTE '" + qs.id + "': group outcome CDFs are not identified");
    treated.group = group;
    control.group = group;
    treated.outcome = [&, s1](const Rho& rho) { return estimate_outcome_functional(ctx, s1, rho); };
    control.outcome = [&, s0](const Rho& rho) { return estimate_outcome_functional(ctx, s0, rho); };
    QteEstimate q;
    q.id = qs.id;
    const bool boot = plan.bootstrap.B > 0 && plan.bootstrap.qte;
    q.result = estimate_qte(treated, control, qs.ygrid, qs.taus, st.p_min, boot);
    if (boot) {
      QteBootstrap qb = qte_bootstrap(q.result, treated, control, qs.ygrid, plan.bootstrap.B, plan.bootstrap.law,
                                      plan.bootstrap.seed, plan.bootstrap.level, st.threads);
      q.ci = qb.ci;
    }
    for (std::size_t k = 0; k < qs.taus.size(); ++k) {
      FunctionalEstimate fe;
      char buf[64];
      std::snprintf(buf, sizeof buf, "@%.17g", qs.taus[k]);
      fe.id = qs.id + buf;
      fe.route = "qte";
      fe.point = q.result.qte[k];
      fe.se = std::numeric_limits<double>::quiet_NaN();
      fe.n = data.n();
      fe.K = ctx.plan().K;
      fe.warnings = q.result.warnings;
      if (boot) {
        fe.ci = q.ci[k];
        fe.se = q.ci[k].halfwidth / 1.959963984540054;  // implied by the bootstrap interval
      }
      out.estimates.push_back(fe);
    }
    q.result.curve1.clear();
    q.result.curve0.clear();
    out.qte.push_back(std::move(q));
  }

  if (plan.bootstrap.B > 0 && !out.components.empty()) {
    std::vector<const EstimateResult*> reg;
    for (const auto& id : order) reg.push_back(&out.components.at(id));
    BootstrapDraws d = multiplier_bootstrap(reg, plan.bootstrap.B, plan.bootstrap.law, plan.bootstrap.seed, st.threads);
    // Derived functionals evaluated at the replicate draws (nested references
    // are expanded through the draw map).
    std::map<std::string, Combination> formulas;
    for (const auto& f : plan.functionals)
      if (f.kind == FunctionalKind::derived) formulas[f.id] = f.combine;
    for (auto& e : out.estimates) {
      if (e.route == "qte") continue;
      if (e.route == "derived") {
        Combination expanded = formulas.at(e.id);
        std::function<void(Combination&)> expand = [&](Combination& c) {
          if (c.op == Combination::Op::ref && formulas.count(c.ref)) c = formulas.at(c.ref);
          for (auto& a : c.args) expand(a);
        };
        expand(expanded);
        DeltaResult dm = delta_method(expanded, d, plan.bootstrap.level, st.p_min);
        e.ci = dm.ci;
      } else {
        e.ci = bootstrap_ci(d, e.id, plan.bootstrap.level);
      }
    }
    out.draws = std::move(d);
  }
  for (const auto& e : out.estimates)
    for (const auto& w : e.warnings) out.warnings.push_back(e.id + ": " + w);
  return out;
}

// The mediation panel: the nine building blocks and the five effects.
inline std::vector<FunctionalSpec> mediation_panel(const ModelSpec& model, const Rho& rho) {
  auto l = mto_layout(model);
  if (!l || l->cn < 0 || l->cc < 0 || l->ca < 0) throw ValidationError("mediation panel needs the relocation/mediator model");
  auto ind = [&](std::initializer_list<int> types) {
    std::vector<double> e(model.r(), 0.0);
    for (int t : types) e[t] = 1.0;
    return e;
  };
  auto outcome = [&](std::string id, std::string t, std::vector<double> ell, Assumption a) {
    FunctionalSpec f;
    f.id = std::move(id);
    f.kind = FunctionalKind::outcome;
    f.treatment = std::move(t);
    f.ell = std::move(ell);
    f.rho = rho;
    f.assume = a;
    return f;
  };
  auto type = [&](std::string id, std::vector<double> ell) {
    FunctionalSpec f;
    f.id = std::move(id);
    f.ell = std::move(ell);
    return f;
  };
  std::vector<FunctionalSpec> fs = {
      outcome("y10_cn", "10", ind({l->cn}), Assumption::none),
      outcome("y00_cn", "00", ind({l->cn}), Assumption::eimc),
      outcome("y11_ca", "11", ind({l->ca}), Assumption::eimc),
      outcome("y01_ca", "01", ind({l->ca}), Assumption::none),
      outcome("y11_ccca", "11", ind({l->cc, l->ca}), Assumption::none),
      outcome("y00_cncc", "00", ind({l->cn, l->cc}), Assumption::none),
      type("p_cn", ind({l->cn})),
      type("p_ca", ind({l->ca})),
      type("p_cc", ind({l->cc})),
  };
  for (const char* id : {"cde0", "cde1", "cte", "late", "implied_late"}) {
    FunctionalSpec f;
    f.id = id;
    f.kind = FunctionalKind::derived;
    f.combine = mediation_effect_formulas().at(id);
    fs.push_back(f);
  }
  return fs;
}

// ---------------------------------------------------------------------------
// Monte Carlo harness

struct McRow {
  std::string id;
  double truth = 0.0;
  int reps = 0;  // successful replications
  double mean = 0.0;
  double bias = 0.0;
  double mc_sd = 0.0;
  double mc_se = 0.0;     // mc_sd / sqrt(reps)
  double mean_se = 0.0;   // mean analytic (or bootstrap-implied) SE
  double se_ratio = 0.0;  // mean_se / mc_sd
  double coverage_analytic = std::numeric_limits<double>::quiet_NaN();
  double coverage_bootstrap = std::numeric_limits<double>::quiet_NaN();
};

struct McReport {
  std::vector<McRow> rows;
  int reps = 0;
  int n = 0;
  std::uint64_t seed = 0;
  int failures = 0;
  std::vector<std::string> failure_messages;

  const McRow& row(const std::string& id) const {
    for (const auto& r : rows)
      if (r.id == id) return r;
    throw ValidationError("no Monte Carlo row named '" + id + "'");
  }
};

// Per-replicate seeds derived from the master seed.
inline std::uint64_t replicate_seed(std::uint64_t master, std::uint64_t rep, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(rep), static_cast<std::uint32_t>(stream), 0x4d43u};
  std::mt19937_64 g(seq);
  return g();
}

// Exact targets of a plan under the simulation spec, keyed like run_plan's estimates.
inline std::map<std::string, double> plan_truth(const DgpSpec& spec, const EstimationPlan& plan) {
  std::map<std::string, double> truth = oracle_values(spec, plan.functionals);
  for (const auto& qs : plan.qte) {
    for (double tau : qs.taus) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "@%.17g", tau);
      truth[qs.id + buf] = oracle_quantile(spec, qs.treated, qs.group, tau) - oracle_quantile(spec, qs.control, qs.group, tau);
    }
  }
  return truth;
}

// Replications of generate_data + run_plan with seeds derived from `seed`.
// Replications that raise an error are counted as failures and excluded.
inline McReport monte_carlo(const DgpSpec& spec, const EstimationPlan& plan, int reps, int n, std::uint64_t seed,
                            int threads = 1, const std::map<std::string, double>* truth_override = nullptr) {
  if (reps < 2) throw ValidationError("Monte Carlo needs reps >= 2");
  const std::map<std::string, double> truth = truth_override ? *truth_override : plan_truth(spec, plan);
  struct Rep {
    bool ok = false;
    std::string error;
    std::map<std::string, FunctionalEstimate> est;
  };
  std::vector<Rep> runs(reps);
  parallel_for(static_cast<std::size_t>(reps), threads, [&](std::size_t r) {
    SimulatedData sim = generate_data(spec, n, replicate_seed(seed, r, 1));
    EstimationPlan p = plan;
    p.settings.threads = 1;
    p.settings.fold_seed = replicate_seed(seed, r, 2);
    p.settings.cv.seed = replicate_seed(seed, r, 3);
    p.bootstrap.seed = replicate_seed(seed, r, 4);
    try {
      PlanResult res = run_plan(sim.data, spec.model, p);
      for (auto& e : res.estimates) runs[r].est.emplace(e.id, e);
      runs[r].ok = true;
    } catch (const Error& e) {
      runs[r].error = e.what();
    }
  });
  McReport rep;
  rep.reps = reps;
  rep.n = n;
  rep.seed = seed;
  for (const auto& r : runs)
    if (!r.ok) {
      ++rep.failures;
      if (rep.failure_messages.size() < 5) rep.failure_messages.push_back(r.error);
    }
  for (const auto& [id, value] : truth) {
    McRow row;
    row.id = id;
    row.truth = value;
    std::vector<double> pts, ses;
    int cov_a = 0, n_a = 0, cov_b = 0, n_b = 0;
    for (const auto& r : runs) {
      if (!r.ok) continue;
      auto it = r.est.find(id);
      if (it == r.est.end()) continue;
      const FunctionalEstimate& e = it->second;
      pts.push_back(e.point);
      ses.push_back(e.se);
      if (std::isfinite(e.se)) {
        ++n_a;
        if (std::abs(e.point - value) <= 1.959963984540054 * e.se) ++cov_a;
      }
      if (e.ci) {
        ++n_b;
        if (e.ci->lo <= value && value <= e.ci->hi) ++cov_b;
      }
    }
    row.reps = static_cast<int>(pts.size());
    if (row.reps < 2) {
      rep.rows.push_back(row);
      continue;
    }
    double s = 0.0, se = 0.0;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      s += pts[k];
      se += ses[k];
    }
    row.mean = s / row.reps;
    row.mean_se = se / row.reps;
    double ss = 0.0;
    for (double v : pts) ss += (v - row.mean) * (v - row.mean);
    row.mc_sd = std::sqrt(ss / (row.reps - 1));
    row.mc_se = row.mc_sd / std::sqrt(static_cast<double>(row.reps));
    row.bias = row.mean - value;
    row.se_ratio = row.mc_sd > 0.0 ? row.mean_se / row.mc_sd : std::numeric_limits<double>::quiet_NaN();
    if (n_a > 0) row.coverage_analytic = static_cast<double>(cov_a) / n_a;
    if (n_b > 0) row.coverage_bootstrap = static_cast<double>(cov_b) / n_b;
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace poforge
