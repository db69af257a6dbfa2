#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/error.hpp"
#include "poforge/model.hpp"

namespace poforge {

inline constexpr double tol_id = 1e-8;
inline constexpr double tol_rank = 1e-10;

struct IdentificationSolution {
  Eigen::VectorXd s;  // type: index j*d + m; outcome: index j
  double residual = 0.0;
  bool identified = false;
  FunctionalKind kind = FunctionalKind::type;
  int target_treatment = -1;  // outcome functionals
  int q = 0;
  int d = 0;

  // Coefficient on 1{T = t_m} within instrument block j.
  double at(int j, int m) const {
    if (kind == FunctionalKind::outcome) return m == target_treatment ? s(j) : 0.0;
    return s(j * d + m);
  }
  bool touches(int m) const {
    for (int j = 0; j < q; ++j)
      if (at(j, m) != 0.0) return true;
    return false;
  }
};

namespace detail {

inline Eigen::VectorXd min_norm_solve(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
  if (a.cols() == 0) return Eigen::VectorXd();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(tol_rank);
  return svd.solve(b);
}

inline int numerical_rank(const Eigen::MatrixXd& a) {
  if (a.size() == 0) return 0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  svd.setThreshold(tol_rank);
  return static_cast<int>(svd.rank());
}

inline IdentificationSolution solve_system(const Eigen::MatrixXd& omega, const Eigen::VectorXd& ell) {
  if (ell.size() != omega.rows())
    throw DimensionError("ell has length " + std::to_string(ell.size()) + " but the response matrix has " +
                         std::to_string(omega.rows()) + " rows");
  IdentificationSolution sol;
  sol.s = min_norm_solve(omega, ell);
  sol.residual = (omega * sol.s - ell).norm();
  sol.identified = sol.residual <= tol_id * std::max(1.0, ell.norm());
  return sol;
}

inline Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

// `q` fixes the block layout of Omega's columns (q blocks of d treatments).
inline IdentificationSolution solve_type_functional(const Eigen::MatrixXd& omega, const Eigen::VectorXd& ell, int q) {
  if (q < 1 || omega.cols() % q != 0)
    throw DimensionError("response matrix has " + std::to_string(omega.cols()) + " columns, not a multiple of q=" +
                         std::to_string(q));
  IdentificationSolution sol = detail::solve_system(omega, ell);
  sol.kind = FunctionalKind::type;
  sol.q = q;
  sol.d = static_cast<int>(omega.cols() / q);
  return sol;
}

inline IdentificationSolution solve_outcome_functional(const Eigen::MatrixXd& omega_t, const Eigen::VectorXd& ell,
                                                       int target_treatment, int d) {
  IdentificationSolution sol = detail::solve_system(omega_t, ell);
  sol.kind = FunctionalKind::outcome;
  sol.q = static_cast<int>(omega_t.cols());
  sol.d = d;
  sol.target_treatment = target_treatment;
  return sol;
}

inline IdentificationSolution solve_type_functional(const ModelSpec& model, const std::vector<double>& ell) {
  return solve_type_functional(response_matrix_types(model), detail::to_vector(ell), model.q());
}

inline IdentificationSolution solve_outcome_functional(const ModelSpec& model, const std::string& t,
                                                       const std::vector<double>& ell) {
  return solve_outcome_functional(response_matrix_outcome(model, t), detail::to_vector(ell), model.treatment_index(t),
                                  model.d());
}

// kappa(t_m, z_j) = s_{j,m} / P(Z = z_j | X) as a d x q table. For outcome
// solutions only the target treatment's row is nonzero (the 1{T=t} factor).
inline Eigen::MatrixXd kappa_weights(const IdentificationSolution& sol, const Eigen::VectorXd& pz_given_x) {
  if (pz_given_x.size() != sol.q)
    throw DimensionError("instrument probabilities have length " + std::to_string(pz_given_x.size()) + ", expected " +
                         std::to_string(sol.q));
  for (int j = 0; j < sol.q; ++j)
    if (!(pz_given_x(j) > 0.0)) throw ValidationError("positivity violated: P(Z=z_" + std::to_string(j) + "|X) <= 0");
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(sol.d, sol.q);
  for (int m = 0; m < sol.d; ++m)
    for (int j = 0; j < sol.q; ++j) k(m, j) = sol.at(j, m) / pz_given_x(j);
  return k;
}

// Riesz targets M(x) = mult * sum_j s_{j,m} b(z_j, x): one column per treatment
// for type solutions, a single column for outcome solutions. `mult` carries the
// covariate multiplier X_j when the functional has one.
template <class XRow>
Eigen::MatrixXd moment_target(const IdentificationSolution& sol, const BasisSpec& basis, const XRow& x,
                              double mult = 1.0) {
  if (basis.mode != InstrumentMode::discrete || basis.q != sol.q)
    throw DimensionError("basis does not match the solution's instrument layout");
  const int p = basis.dim();
  const int cols = sol.kind == FunctionalKind::type ? sol.d : 1;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(p, cols);
  Eigen::VectorXd bz(p);
  for (int j = 0; j < sol.q; ++j) {
    basis.eval(j, x, bz);
    if (sol.kind == FunctionalKind::type) {
      for (int m = 0; m < sol.d; ++m) out.col(m) += (mult * sol.at(j, m)) * bz;
    } else {
      out.col(0) += (mult * sol.s(j)) * bz;
    }
  }
  return out;
}

inline std::vector<bool> check_rank_condition(const ModelSpec& model) {
  std::vector<bool> out;
  for (const auto& t : model.treatments.labels)
    out.push_back(detail::numerical_rank(response_matrix_outcome(model, t)) == model.q());
  return out;
}

// Null vectors of Omega must be constant across treatments within each block.
inline bool check_nullspace_condition(const ModelSpec& model) {
  Eigen::MatrixXd omega = response_matrix_types(model);
  const int d = model.d(), q = model.q();
  const int cols = d * q;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(omega, Eigen::ComputeFullV);
  svd.setThreshold(tol_rank);
  const int rank = static_cast<int>(svd.rank());
  if (rank == cols) return true;
  Eigen::MatrixXd nulls = svd.matrixV().rightCols(cols - rank);
  Eigen::MatrixXd blocks = Eigen::MatrixXd::Zero(cols, q);
  for (int j = 0; j < q; ++j)
    for (int m = 0; m < d; ++m) blocks(j * d + m, j) = 1.0 / std::sqrt(static_cast<double>(d));
  for (int k = 0; k < nulls.cols(); ++k) {
    Eigen::VectorXd v = nulls.col(k);
    double res = (v - blocks * (blocks.transpose() * v)).norm();
    if (res > tol_rank * std::max(1.0, v.norm()) * cols) return false;
  }
  return true;
}

// Dense indices for the relocation/mediator model: treatments "00","01","10","11"
// and a binary instrument, plus the CN / CC / CA types located by assignment.
struct MtoLayout {
  int t00 = -1, t01 = -1, t10 = -1, t11 = -1;
  int z0 = -1, z1 = -1;
  int cn = -1, cc = -1, ca = -1;
};

inline std::optional<MtoLayout> mto_layout(const ModelSpec& model) {
  if (model.instruments.mode != InstrumentMode::discrete || model.d() != 4 || model.q() != 2) return std::nullopt;
  MtoLayout l;
  auto t = [&](const char* a) { return model.find_treatment(a); };
  if (!t("00") || !t("01") || !t("10") || !t("11")) return std::nullopt;
  if (!model.find_instrument("0") || !model.find_instrument("1")) return std::nullopt;
  l.t00 = *t("00");
  l.t01 = *t("01");
  l.t10 = *t("10");
  l.t11 = *t("11");
  l.z0 = *model.find_instrument("0");
  l.z1 = *model.find_instrument("1");
  for (int i = 0; i < model.r(); ++i) {
    const auto& a = model.support.types[i].assignment;
    const std::string& at0 = a[l.z0];
    const std::string& at1 = a[l.z1];
    if (at0 == "00" && at1 == "10") l.cn = i;
    if (at0 == "00" && at1 == "11") l.cc = i;
    if (at0 == "01" && at1 == "11") l.ca = i;
  }
  return l;
}

enum class MediationTarget { none, cn, ca };

// Which mediation score, if any, an eimc outcome functional maps to.
inline MediationTarget mediation_target(const ModelSpec& model, const FunctionalSpec& f) {
  if (f.kind != FunctionalKind::outcome || f.assume != Assumption::eimc || f.covariate) return MediationTarget::none;
  auto l = mto_layout(model);
  if (!l) return MediationTarget::none;
  auto is_indicator = [&](int type) {
    if (type < 0 || static_cast<int>(f.ell.size()) != model.r()) return false;
    for (int i = 0; i < model.r(); ++i)
      if (f.ell[i] != (i == type ? 1.0 : 0.0)) return false;
    return true;
  };
  const int t = model.find_treatment(f.treatment).value_or(-1);
  if (t == l->t00 && is_indicator(l->cn)) return MediationTarget::cn;
  if (t == l->t11 && is_indicator(l->ca)) return MediationTarget::ca;
  return MediationTarget::none;
}

struct FunctionalVerdict {
  std::string id;
  FunctionalKind kind = FunctionalKind::type;
  bool identified = false;
  double residual = 0.0;
  Eigen::VectorXd s;
  std::string route;  // "linear", "mediation_cn", "mediation_ca", "derived"
  std::string note;
};

struct IdentificationReport {
  std::vector<std::string> diagnostics;
  std::vector<FunctionalVerdict> functionals;
  std::vector<std::pair<std::string, bool>> rank_condition;
  bool nullspace_condition = false;
  bool efficiency_checked = false;
};

inline IdentificationReport identification_report(const ModelSpec& model, const std::vector<FunctionalSpec>& functionals) {
  IdentificationReport rep;
  rep.diagnostics = validate_model(model);
  if (!rep.diagnostics.empty()) return rep;
  if (model.instruments.mode == InstrumentMode::discrete) {
    auto ranks = check_rank_condition(model);
    for (int m = 0; m < model.d(); ++m) rep.rank_condition.emplace_back(model.treatments.labels[m], ranks[m]);
    rep.nullspace_condition = check_nullspace_condition(model);
    rep.efficiency_checked = true;
  }
  std::map<std::string, bool> known;
  for (const auto& f : functionals) {
    FunctionalVerdict v;
    v.id = f.id;
    v.kind = f.kind;
    if (f.kind == FunctionalKind::derived) {
      v.route = "derived";
      v.identified = true;
      for (const auto& ref : f.combine.references()) {
        auto it = known.find(ref);
        if (it == known.end()) {
          v.identified = false;
          v.note += "unknown component '" + ref + "'; ";
        } else if (!it->second) {
          v.identified = false;
          v.note += "component '" + ref + "' not identified; ";
        }
      }
    } else if (model.instruments.mode != InstrumentMode::discrete) {
      v.route = "continuous";
      v.identified = false;
      v.note = "linear identification system needs a discrete instrument";
    } else {
      IdentificationSolution sol = f.kind == FunctionalKind::type ? solve_type_functional(model, f.ell)
                                                                  : solve_outcome_functional(model, f.treatment, f.ell);
      v.identified = sol.identified;
      v.residual = sol.residual;
      v.s = sol.s;
      v.route = "linear";
      if (!sol.identified && f.kind == FunctionalKind::outcome) {
        MediationTarget mt = mediation_target(model, f);
        if (mt != MediationTarget::none) {
          v.identified = true;
          v.route = mt == MediationTarget::cn ? "mediation_cn" : "mediation_ca";
          v.note = "not identified by the support restriction alone; identified under EIMC";
        }
      }
    }
    known[f.id] = v.identified;
    rep.functionals.push_back(std::move(v));
  }
  return rep;
}

}  // namespace poforge
