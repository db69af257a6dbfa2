#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/combination.hpp"
#include "poforge/error.hpp"

namespace poforge {

enum class InstrumentMode { discrete, continuous_pair };

struct TreatmentSpace {
  std::vector<std::string> labels;
  int size() const { return static_cast<int>(labels.size()); }
};

// In continuous-pair mode `values` holds the labels of the binary component C
// and [w_lo, w_hi] is the support of the continuous component W.
struct InstrumentSpace {
  std::vector<std::string> values;
  InstrumentMode mode = InstrumentMode::discrete;
  double w_lo = 0.0;
  double w_hi = 1.0;
  int size() const { return static_cast<int>(values.size()); }
};

struct ResponseType {
  std::string name;
  std::vector<std::string> assignment;  // entry j: treatment chosen at instrument value j
};

struct SupportRestriction {
  std::vector<ResponseType> types;
  std::vector<double> masses;  // optional, simulator only
};

// Weights over instrument values, constant in X. Empty means uniform.
struct BaseMeasure {
  std::vector<double> mu;
};

// Outcome transform applied before taking expectations.
struct Rho {
  enum class Kind { identity, clipped, indicator, constant };
  Kind kind = Kind::identity;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  double threshold = 0.0;  // indicator: 1{Y <= threshold}
  double value = 1.0;      // constant

  static Rho identity() { return Rho{}; }
  static Rho clipped(double lo, double hi) {
    Rho r;
    r.kind = Kind::clipped;
    r.lo = lo;
    r.hi = hi;
    return r;
  }
  static Rho indicator(double y) {
    Rho r;
    r.kind = Kind::indicator;
    r.threshold = y;
    return r;
  }
  static Rho constant(double c) {
    Rho r;
    r.kind = Kind::constant;
    r.value = c;
    return r;
  }

  bool bounded() const {
    switch (kind) {
      case Kind::identity:
        return false;
      case Kind::clipped:
        return std::isfinite(lo) && std::isfinite(hi);
      default:
        return true;
    }
  }

  double operator()(double y) const {
    switch (kind) {
      case Kind::identity:
        return y;
      case Kind::clipped:
        return y < lo ? lo : (y > hi ? hi : y);
      case Kind::indicator:
        return y <= threshold ? 1.0 : 0.0;
      case Kind::constant:
        return value;
    }
    return y;
  }

  std::string describe() const {
    char buf[96];
    switch (kind) {
      case Kind::identity:
        return "identity";
      case Kind::clipped:
        std::snprintf(buf, sizeof buf, "clip[%.17g,%.17g]", lo, hi);
        return buf;
      case Kind::indicator:
        std::snprintf(buf, sizeof buf, "le[%.17g]", threshold);
        return buf;
      case Kind::constant:
        std::snprintf(buf, sizeof buf, "const[%.17g]", value);
        return buf;
    }
    return "?";
  }
};

enum class FunctionalKind { type, outcome, derived };

// `eimc` routes the two outcome targets that the support restriction alone
// leaves unidentified (Y(0,0) for CN, Y(1,1) for CA) to the mediation scores.
enum class Assumption { none, eimc };

struct FunctionalSpec {
  std::string id;
  FunctionalKind kind = FunctionalKind::type;
  std::vector<double> ell;          // one entry per admissible type
  std::optional<int> covariate;     // multiplies ell by X_j
  Rho rho;                          // outcome functionals
  std::string treatment;            // outcome functionals
  Combination combine;              // derived functionals
  Assumption assume = Assumption::none;
};

struct ModelSpec {
  std::string name;
  TreatmentSpace treatments;
  InstrumentSpace instruments;
  SupportRestriction support;
  BaseMeasure mu;
  std::vector<FunctionalSpec> functionals;

  int d() const { return treatments.size(); }
  int q() const { return instruments.size(); }
  int r() const { return static_cast<int>(support.types.size()); }

  std::optional<int> find_treatment(const std::string& label) const {
    for (int i = 0; i < d(); ++i)
      if (treatments.labels[i] == label) return i;
    return std::nullopt;
  }
  int treatment_index(const std::string& label) const {
    auto i = find_treatment(label);
    if (!i) throw ValidationError("unknown treatment label '" + label + "'");
    return *i;
  }
  std::optional<int> find_instrument(const std::string& value) const {
    for (int i = 0; i < q(); ++i)
      if (instruments.values[i] == value) return i;
    return std::nullopt;
  }
  int instrument_index(const std::string& value) const {
    auto i = find_instrument(value);
    if (!i) throw ValidationError("unknown instrument value '" + value + "'");
    return *i;
  }
  std::optional<int> find_type(const std::string& name) const {
    for (int i = 0; i < r(); ++i)
      if (support.types[i].name == name) return i;
    return std::nullopt;
  }
  int type_index(const std::string& name) const {
    auto i = find_type(name);
    if (!i) throw ValidationError("unknown response type '" + name + "'");
    return *i;
  }

  // Dense treatment index chosen by type i at instrument j.
  Eigen::MatrixXi assignment_indices() const {
    Eigen::MatrixXi a(r(), q());
    for (int i = 0; i < r(); ++i) {
      const auto& t = support.types[i];
      if (static_cast<int>(t.assignment.size()) != q())
        throw DimensionError("type '" + t.name + "' assigns " + std::to_string(t.assignment.size()) +
                             " treatments, expected " + std::to_string(q()));
      for (int j = 0; j < q(); ++j) a(i, j) = treatment_index(t.assignment[j]);
    }
    return a;
  }

  std::vector<double> mu_or_uniform() const {
    if (!mu.mu.empty()) return mu.mu;
    return std::vector<double>(q(), 1.0 / q());
  }

  // Indicator table 1{T* in names}.
  std::vector<double> indicator(const std::vector<std::string>& names) const {
    std::vector<double> ell(r(), 0.0);
    for (const auto& n : names) ell[type_index(n)] = 1.0;
    return ell;
  }
};

// Basis b(z, x). Discrete mode: for each instrument value z, 1{Z=z} times
// [1, x_1..x_m], so p = q(m+1). Continuous-pair mode: for each c in {0,1},
// 1{C=c} times [1, u, .., u^k, x_1..x_m] with u = (w - w_lo)/(w_hi - w_lo).
struct BasisSpec {
  InstrumentMode mode = InstrumentMode::discrete;
  int q = 2;
  int m = 0;
  int degree = 3;
  double w_lo = 0.0;
  double w_hi = 1.0;

  static BasisSpec discrete(int q, int m) {
    BasisSpec b;
    b.q = q;
    b.m = m;
    return b;
  }
  static BasisSpec continuous(int m, int degree, double w_lo, double w_hi) {
    BasisSpec b;
    b.mode = InstrumentMode::continuous_pair;
    b.q = 2;
    b.m = m;
    b.degree = degree;
    b.w_lo = w_lo;
    b.w_hi = w_hi;
    return b;
  }

  int block() const { return mode == InstrumentMode::discrete ? m + 1 : degree + 1 + m; }
  int dim() const { return q * block(); }

  template <class XRow, class Out>
  void eval(int z, const XRow& x, Out&& out) const {
    if (mode != InstrumentMode::discrete) throw ValidationError("discrete basis evaluation on a continuous-pair basis");
    for (int k = 0; k < dim(); ++k) out[k] = 0.0;
    const int o = z * block();
    out[o] = 1.0;
    for (int j = 0; j < m; ++j) out[o + 1 + j] = x[j];
  }

  template <class XRow, class Out>
  void eval_continuous(int c, double w, const XRow& x, Out&& out) const {
    if (mode != InstrumentMode::continuous_pair) throw ValidationError("continuous basis evaluation on a discrete basis");
    for (int k = 0; k < dim(); ++k) out[k] = 0.0;
    const int o = c * block();
    const double u = (w - w_lo) / (w_hi - w_lo);
    double pw = 1.0;
    for (int k = 0; k <= degree; ++k) {
      out[o + k] = pw;
      pw *= u;
    }
    for (int j = 0; j < m; ++j) out[o + degree + 1 + j] = x[j];
  }
};

inline std::vector<std::string> validate_model(const ModelSpec& model) {
  std::vector<std::string> diag;
  const auto& tl = model.treatments.labels;
  if (tl.size() < 2) diag.push_back("treatment space needs at least 2 labels, got " + std::to_string(tl.size()));
  if (std::set<std::string>(tl.begin(), tl.end()).size() != tl.size()) diag.push_back("treatment labels are not unique");
  const auto& iv = model.instruments.values;
  if (iv.empty()) diag.push_back("instrument space is empty");
  if (std::set<std::string>(iv.begin(), iv.end()).size() != iv.size()) diag.push_back("instrument values are not unique");
  const bool continuous = model.instruments.mode == InstrumentMode::continuous_pair;
  if (continuous) {
    if (!(model.instruments.w_lo < model.instruments.w_hi)) diag.push_back("continuous instrument needs w_lo < w_hi");
    if (iv.size() != 2) diag.push_back("continuous-pair mode needs exactly 2 values for the binary component");
  }

  const auto& types = model.support.types;
  if (types.empty() && !continuous) diag.push_back("support restriction has no response types");
  std::set<std::vector<std::string>> seen;
  std::set<std::string> names;
  for (std::size_t i = 0; i < types.size(); ++i) {
    const auto& t = types[i];
    std::string tag = t.name.empty() ? "#" + std::to_string(i) : "'" + t.name + "'";
    if (!t.name.empty() && !names.insert(t.name).second) diag.push_back("duplicate type name " + tag);
    if (t.assignment.size() != iv.size()) {
      diag.push_back("type " + tag + " has " + std::to_string(t.assignment.size()) + " entries, expected " +
                     std::to_string(iv.size()));
      continue;
    }
    for (const auto& a : t.assignment)
      if (!model.find_treatment(a)) diag.push_back("type " + tag + " uses unknown treatment label '" + a + "'");
    if (!seen.insert(t.assignment).second) diag.push_back("type " + tag + " duplicates an earlier type");
  }

  const auto& ms = model.support.masses;
  if (!ms.empty()) {
    if (ms.size() != types.size()) {
      diag.push_back("type masses have length " + std::to_string(ms.size()) + ", expected " + std::to_string(types.size()));
    } else {
      double s = 0.0;
      bool neg = false;
      for (double v : ms) {
        if (!(v >= 0.0) || !std::isfinite(v)) neg = true;
        s += v;
      }
      if (neg) diag.push_back("type masses must be finite and nonnegative");
      if (std::abs(s - 1.0) > 1e-9) diag.push_back("type masses sum to " + std::to_string(s) + ", expected 1");
    }
  }

  const auto& mu = model.mu.mu;
  if (!mu.empty()) {
    if (mu.size() != iv.size()) {
      diag.push_back("base measure has length " + std::to_string(mu.size()) + ", expected " + std::to_string(iv.size()));
    } else {
      double s = 0.0;
      bool bad = false;
      for (double v : mu) {
        if (!(v > 0.0) || !std::isfinite(v)) bad = true;
        s += v;
      }
      if (bad) diag.push_back("base measure weights must be strictly positive");
      if (std::abs(s - 1.0) > 1e-9) diag.push_back("base measure weights sum to " + std::to_string(s) + ", expected 1");
    }
  }

  std::set<std::string> declared;
  for (const auto& f : model.functionals) {
    std::string tag = "functional '" + f.id + "'";
    if (f.id.empty()) diag.push_back("functional without id");
    if (!declared.insert(f.id).second) diag.push_back(tag + " declared twice");
    if (f.kind != FunctionalKind::derived && f.ell.size() != types.size())
      diag.push_back(tag + " has an ell table of length " + std::to_string(f.ell.size()) + ", expected " +
                     std::to_string(types.size()));
    if (f.kind == FunctionalKind::outcome) {
      if (f.treatment.empty())
        diag.push_back(tag + " needs a target treatment");
      else if (!model.find_treatment(f.treatment))
        diag.push_back(tag + " targets unknown treatment '" + f.treatment + "'");
    }
    if (f.covariate && *f.covariate < 0) diag.push_back(tag + " has a negative covariate index");
    if (f.kind == FunctionalKind::derived) {
      auto refs = f.combine.references();
      if (refs.empty()) diag.push_back(tag + " combines no components");
      for (const auto& ref : refs) {
        if (ref == f.id || !declared.count(ref))
          diag.push_back(tag + " references '" + ref + "' which is not declared before it");
      }
    }
  }
  return diag;
}

// r x (q*d) matrix; row i holds the q blocks (1{t_i(z_j) = t_1}, .., 1{t_i(z_j) = t_d}).
inline Eigen::MatrixXd response_matrix_types(const ModelSpec& model) {
  if (model.instruments.mode != InstrumentMode::discrete)
    throw ValidationError("response matrices are only defined for discrete instruments");
  const int d = model.d(), q = model.q();
  Eigen::MatrixXi a = model.assignment_indices();
  Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(model.r(), q * d);
  for (int i = 0; i < model.r(); ++i)
    for (int j = 0; j < q; ++j) omega(i, j * d + a(i, j)) = 1.0;
  return omega;
}

// r x q matrix with entries 1{t_i(z_j) = t}.
inline Eigen::MatrixXd response_matrix_outcome(const ModelSpec& model, const std::string& t) {
  if (model.instruments.mode != InstrumentMode::discrete)
    throw ValidationError("response matrices are only defined for discrete instruments");
  const int ti = model.treatment_index(t);
  Eigen::MatrixXi a = model.assignment_indices();
  Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(model.r(), model.q());
  for (int i = 0; i < model.r(); ++i)
    for (int j = 0; j < model.q(); ++j) omega(i, j) = a(i, j) == ti ? 1.0 : 0.0;
  return omega;
}

namespace detail {

inline ModelSpec make_model(std::string name, std::vector<std::string> treatments, std::vector<std::string> instruments,
                            std::vector<ResponseType> types, std::vector<double> masses) {
  ModelSpec m;
  m.name = std::move(name);
  m.treatments.labels = std::move(treatments);
  m.instruments.values = std::move(instruments);
  m.support.types = std::move(types);
  m.support.masses = std::move(masses);
  return m;
}

}  // namespace detail

// Relocation (D) and mediator (M) pairs labeled "DM"; instrument is the voucher.
inline ModelSpec preset_mto7() {
  return detail::make_model("mto7", {"00", "01", "10", "11"}, {"0", "1"},
                            {{"NN", {"00", "00"}},
                             {"NA", {"01", "01"}},
                             {"CN", {"00", "10"}},
                             {"CC", {"00", "11"}},
                             {"CA", {"01", "11"}},
                             {"AN", {"10", "10"}},
                             {"AA", {"11", "11"}}},
                            {0.258, 0.253, 0.194, 0.065, 0.203, 0.014, 0.013});
}

// Treatments: Head Start (h), other schools (c), home care (n).
inline ModelSpec preset_headstart5() {
  return detail::make_model("headstart5", {"h", "c", "n"}, {"0", "1"},
                            {{"nh", {"n", "h"}}, {"ch", {"c", "h"}}, {"nn", {"n", "n"}}, {"cc", {"c", "c"}}, {"hh", {"h", "h"}}},
                            {});
}

inline ModelSpec preset_late3() {
  return detail::make_model("late3", {"0", "1"}, {"0", "1"},
                            {{"never", {"0", "0"}}, {"complier", {"0", "1"}}, {"always", {"1", "1"}}},
                            {0.25, 0.5, 0.25});
}

inline std::map<std::string, ModelSpec> preset_models() {
  return {{"mto7", preset_mto7()}, {"headstart5", preset_headstart5()}, {"late3", preset_late3()}};
}

inline ModelSpec preset_model(const std::string& name) {
  auto all = preset_models();
  auto it = all.find(name);
  if (it == all.end()) throw ValidationError("unknown preset model '" + name + "'");
  return it->second;
}

}  // namespace poforge
