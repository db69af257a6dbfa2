#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/combination.hpp"
#include "poforge/crossfit.hpp"
#include "poforge/error.hpp"

namespace poforge {

// Smooth combination of component estimates with its linearized influence.
struct DerivedEstimate {
  std::string id;
  double point = 0.0;
  Eigen::VectorXd psi;
  double se = 0.0;
};

inline DerivedEstimate derive(const Combination& f, const std::vector<const EstimateResult*>& components,
                              double min_denominator, std::string id = "") {
  std::map<std::string, int> index;
  Eigen::VectorXd values(components.size());
  for (std::size_t g = 0; g < components.size(); ++g) {
    index[components[g]->id] = static_cast<int>(g);
    values(g) = components[g]->lambda_hat;
  }
  DualValue dv = evaluate_dual(f, index, values, min_denominator);
  DerivedEstimate out;
  out.id = std::move(id);
  out.point = dv.value;
  const EstimateResult* first = nullptr;
  for (std::size_t g = 0; g < components.size(); ++g) {
    if (dv.grad(g) == 0.0) continue;
    const EstimateResult& c = *components[g];
    if (!first) {
      first = &c;
      out.psi = Eigen::VectorXd::Zero(c.n);
    } else if (c.n != first->n) {
      throw DimensionError("components of '" + out.id + "' were estimated on different samples");
    }
    out.psi += dv.grad(g) * c.psi;
  }
  if (first && first->n >= 2) out.se = analytic_se(out.psi, first->v);
  return out;
}

struct MediationComponents {
  EstimateResult y10_cn;    // E[rho(Y(1,0)) 1{CN}]
  EstimateResult y00_cn;    // E[rho(Y(0,0)) 1{CN}]      (CN mediation score)
  EstimateResult y11_ca;    // E[rho(Y(1,1)) 1{CA}]      (CA mediation score)
  EstimateResult y01_ca;    // E[rho(Y(0,1)) 1{CA}]
  EstimateResult y11_ccca;  // E[rho(Y(1,1)) 1{CC or CA}]
  EstimateResult y00_cncc;  // E[rho(Y(0,0)) 1{CN or CC}]
  EstimateResult p_cn, p_ca, p_cc;
};

struct MediationEffects {
  DerivedEstimate cde0, cde1, cte, late, implied_late;
};

// The effect formulas as combinations over the component ids
// y10_cn, y00_cn, y11_ca, y01_ca, y11_ccca, y00_cncc, p_cn, p_ca, p_cc.
inline std::map<std::string, Combination> mediation_effect_formulas() {
  using C = Combination;
  std::map<std::string, Combination> f;
  f["cde0"] = C::ratio(C::difference(C::of("y10_cn"), C::of("y00_cn")), C::of("p_cn"));
  f["cde1"] = C::ratio(C::difference(C::of("y11_ca"), C::of("y01_ca")), C::of("p_ca"));
  f["cte"] = C::ratio(C::difference(C::difference(C::of("y11_ccca"), C::of("y11_ca")),
                                    C::difference(C::of("y00_cncc"), C::of("y00_cn"))),
                      C::of("p_cc"));
  C compliers = C::affine({C::of("p_cn"), C::of("p_ca"), C::of("p_cc")}, {1.0, 1.0, 1.0});
  f["late"] = C::ratio(C::affine({C::of("y10_cn"), C::of("y11_ccca"), C::of("y00_cncc"), C::of("y01_ca")},
                                 {1.0, 1.0, -1.0, -1.0}),
                       compliers);
  f["implied_late"] = C::ratio(C::affine({C::product(C::of("p_cn"), f["cde0"]), C::product(C::of("p_ca"), f["cde1"]),
                                          C::product(C::of("p_cc"), f["cte"])},
                                         {1.0, 1.0, 1.0}),
                               compliers);
  return f;
}

// Implied LATE from type probabilities and the three effects.
inline double implied_late(double p_cn, double p_ca, double p_cc, double cde0, double cde1, double cte,
                           double p_min = 0.005) {
  auto check = [&](double p, const char* name) {
    if (!(p >= p_min)) throw NumericalError(std::string("type probability ") + name + " is below p_min");
  };
  check(p_cn, "p_cn");
  check(p_ca, "p_ca");
  check(p_cc, "p_cc");
  return (p_cn * cde0 + p_ca * cde1 + p_cc * cte) / (p_cn + p_ca + p_cc);
}

inline MediationEffects derived_mediation_effects(const MediationComponents& c, double p_min = 0.005) {
  auto named = [](EstimateResult r, const char* id) {
    r.id = id;
    return r;
  };
  std::vector<EstimateResult> comps = {named(c.y10_cn, "y10_cn"), named(c.y00_cn, "y00_cn"),   named(c.y11_ca, "y11_ca"),
                                       named(c.y01_ca, "y01_ca"), named(c.y11_ccca, "y11_ccca"), named(c.y00_cncc, "y00_cncc"),
                                       named(c.p_cn, "p_cn"),     named(c.p_ca, "p_ca"),       named(c.p_cc, "p_cc")};
  for (const char* p : {"p_cn", "p_ca", "p_cc"}) {
    for (const auto& r : comps)
      if (r.id == p && !(r.lambda_hat >= p_min))
        throw NumericalError(std::string("type probability ") + p + " = " + std::to_string(r.lambda_hat) +
                             " is below p_min = " + std::to_string(p_min));
  }
  std::vector<const EstimateResult*> reg;
  for (const auto& r : comps) reg.push_back(&r);
  auto f = mediation_effect_formulas();
  MediationEffects e;
  e.cde0 = derive(f["cde0"], reg, p_min, "cde0");
  e.cde1 = derive(f["cde1"], reg, p_min, "cde1");
  e.cte = derive(f["cte"], reg, p_min, "cte");
  e.late = derive(f["late"], reg, p_min, "late");
  e.implied_late = derive(f["implied_late"], reg, p_min, "implied_late");
  return e;
}

}  // namespace poforge
