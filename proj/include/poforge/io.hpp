#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poforge/dataset.hpp"
#include "poforge/error.hpp"
#include "poforge/model.hpp"
#include "poforge/pipeline.hpp"
#include "poforge/simulate.hpp"

namespace poforge {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// JSON output with 17 significant digits

namespace detail {

inline void dump_number(std::string& out, double v) {
  if (!std::isfinite(v)) {
    out += "null";
    return;
  }
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

inline void dump17(const json& j, std::string& out, int indent, int depth) {
  auto newline = [&](int d) {
    out += '\n';
    out.append(static_cast<std::size_t>(indent * d), ' ');
  };
  switch (j.type()) {
    case json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += '{';
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ',';
        first = false;
        newline(depth + 1);
        out += json(it.key()).dump();
        out += ": ";
        dump17(it.value(), out, indent, depth + 1);
      }
      newline(depth);
      out += '}';
      return;
    }
    case json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      bool scalars = true;
      for (const auto& v : j)
        if (v.is_structured()) scalars = false;
      out += '[';
      for (std::size_t k = 0; k < j.size(); ++k) {
        if (k) out += scalars ? ", " : ",";
        if (!scalars) newline(depth + 1);
        dump17(j[k], out, indent, depth + 1);
      }
      if (!scalars) newline(depth);
      out += ']';
      return;
    }
    case json::value_t::number_float:
      dump_number(out, j.get<double>());
      return;
    default:
      out += j.dump();
  }
}

}  // namespace detail

inline std::string dump_json(const json& j) {
  std::string out;
  detail::dump17(j, out, 2, 0);
  out += '\n';
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << content;
  if (!out) throw ValidationError("error writing '" + path + "'");
}

inline json parse_json_text(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(where + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Strict JSON readers

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw ValidationError(where + ": unknown key '" + it.key() + "'");
}

template <class T>
T get_as(const json& j, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(where + ": " + e.what());
  }
}

inline double get_number(const json& j, const std::string& where) {
  if (!j.is_number()) throw ValidationError(where + ": expected a number");
  return j.get<double>();
}

inline std::uint64_t get_seed(const json& j, const std::string& where) {
  if (!j.is_number_integer()) throw ValidationError(where + ": expected a nonnegative integer seed");
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  const auto v = j.get<std::int64_t>();
  if (v < 0) throw ValidationError(where + ": seed must be nonnegative");
  return static_cast<std::uint64_t>(v);
}

inline std::vector<std::string> get_labels(const json& j, const std::string& where) {
  if (!j.is_array()) throw ValidationError(where + ": expected an array of labels");
  std::vector<std::string> out;
  for (const auto& v : j) {
    if (v.is_string()) out.push_back(v.get<std::string>());
    else if (v.is_number_integer()) out.push_back(std::to_string(v.get<long long>()));
    else throw ValidationError(where + ": labels must be strings");
  }
  return out;
}

inline std::vector<double> get_numbers(const json& j, const std::string& where) {
  if (!j.is_array()) throw ValidationError(where + ": expected an array of numbers");
  std::vector<double> out;
  for (const auto& v : j) out.push_back(get_number(v, where));
  return out;
}

}  // namespace detail

inline Rho rho_from_json(const json& j, const std::string& where) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "identity") return Rho::identity();
    throw ValidationError(where + ": unknown outcome transform '" + s + "'");
  }
  if (j.is_number()) return Rho::constant(j.get<double>());
  detail::check_keys(j, {"kind", "lo", "hi", "y", "value"}, where);
  if (!j.contains("kind")) throw ValidationError(where + ": outcome transform needs 'kind'");
  const auto kind = detail::get_as<std::string>(j["kind"], where);
  if (kind == "identity") return Rho::identity();
  if (kind == "clipped") {
    if (!j.contains("lo") || !j.contains("hi")) throw ValidationError(where + ": clipped transform needs lo and hi");
    return Rho::clipped(detail::get_number(j["lo"], where), detail::get_number(j["hi"], where));
  }
  if (kind == "indicator") {
    if (!j.contains("y")) throw ValidationError(where + ": indicator transform needs y");
    return Rho::indicator(detail::get_number(j["y"], where));
  }
  if (kind == "constant") return Rho::constant(j.contains("value") ? detail::get_number(j["value"], where) : 1.0);
  throw ValidationError(where + ": unknown outcome transform kind '" + kind + "'");
}

inline json rho_to_json(const Rho& r) {
  switch (r.kind) {
    case Rho::Kind::identity:
      return json{{"kind", "identity"}};
    case Rho::Kind::clipped:
      return json{{"kind", "clipped"}, {"lo", r.lo}, {"hi", r.hi}};
    case Rho::Kind::indicator:
      return json{{"kind", "indicator"}, {"y", r.threshold}};
    case Rho::Kind::constant:
      return json{{"kind", "constant"}, {"value", r.value}};
  }
  return {};
}

// "id" -> reference; number -> constant; {"ratio": [a, b]}, {"difference": [a, b]},
// {"product": [a, b]}, {"affine": {"terms": [...], "coefs": [...], "intercept": c}}.
inline Combination combination_from_json(const json& j, const std::string& where) {
  if (j.is_string()) return Combination::of(j.get<std::string>());
  if (j.is_number()) return Combination::constant_(j.get<double>());
  if (!j.is_object() || j.size() != 1) throw ValidationError(where + ": a combination is a string, a number or a one-key object");
  const std::string op = j.begin().key();
  const json& a = j.begin().value();
  auto pair = [&](const char* name) {
    if (!a.is_array() || a.size() != 2) throw ValidationError(where + ": '" + name + "' takes two arguments");
    return std::make_pair(combination_from_json(a[0], where), combination_from_json(a[1], where));
  };
  if (op == "ratio") {
    auto [x, y] = pair("ratio");
    return Combination::ratio(x, y);
  }
  if (op == "difference") {
    auto [x, y] = pair("difference");
    return Combination::difference(x, y);
  }
  if (op == "product") {
    auto [x, y] = pair("product");
    return Combination::product(x, y);
  }
  if (op == "affine") {
    detail::check_keys(a, {"terms", "coefs", "intercept"}, where + ".affine");
    if (!a.contains("terms") || !a["terms"].is_array()) throw ValidationError(where + ": affine needs 'terms'");
    std::vector<Combination> terms;
    for (const auto& t : a["terms"]) terms.push_back(combination_from_json(t, where));
    std::vector<double> coefs = a.contains("coefs") ? detail::get_numbers(a["coefs"], where)
                                                    : std::vector<double>(terms.size(), 1.0);
    double c = a.contains("intercept") ? detail::get_number(a["intercept"], where) : 0.0;
    return Combination::affine(std::move(terms), std::move(coefs), c);
  }
  throw ValidationError(where + ": unknown combination operator '" + op + "'");
}

inline json combination_to_json(const Combination& c) {
  using Op = Combination::Op;
  switch (c.op) {
    case Op::ref:
      return c.ref;
    case Op::constant:
      return c.value;
    case Op::ratio:
      return json{{"ratio", json::array({combination_to_json(c.args[0]), combination_to_json(c.args[1])})}};
    case Op::difference:
      return json{{"difference", json::array({combination_to_json(c.args[0]), combination_to_json(c.args[1])})}};
    case Op::product:
      return json{{"product", json::array({combination_to_json(c.args[0]), combination_to_json(c.args[1])})}};
    case Op::affine: {
      json terms = json::array();
      for (const auto& a : c.args) terms.push_back(combination_to_json(a));
      return json{{"affine", json{{"terms", terms}, {"coefs", c.coefs}, {"intercept", c.value}}}};
    }
  }
  return {};
}

// Functional entry. ell is given either as "ell" (one number per type) or as
// "types" (names of the types in an indicator).
inline FunctionalSpec functional_from_json(const json& j, const ModelSpec& model, const std::string& where) {
  detail::check_keys(j, {"id", "kind", "ell", "types", "covariate", "rho", "treatment", "combine", "assume"}, where);
  FunctionalSpec f;
  if (!j.contains("id")) throw ValidationError(where + ": functional needs an 'id'");
  f.id = detail::get_as<std::string>(j["id"], where);
  const std::string w = where + " ('" + f.id + "')";
  const std::string kind = j.contains("kind") ? detail::get_as<std::string>(j["kind"], w) : "type";
  if (kind == "type") f.kind = FunctionalKind::type;
  else if (kind == "outcome") f.kind = FunctionalKind::outcome;
  else if (kind == "derived") f.kind = FunctionalKind::derived;
  else throw ValidationError(w + ": unknown functional kind '" + kind + "'");
  if (f.kind == FunctionalKind::derived) {
    for (const char* k : {"ell", "types", "covariate", "rho", "treatment", "assume"})
      if (j.contains(k)) throw ValidationError(w + ": derived functionals take only 'combine'");
    if (!j.contains("combine")) throw ValidationError(w + ": derived functional needs 'combine'");
    f.combine = combination_from_json(j["combine"], w);
    return f;
  }
  if (j.contains("combine")) throw ValidationError(w + ": 'combine' is only valid for derived functionals");
  if (j.contains("ell") == j.contains("types")) throw ValidationError(w + ": give exactly one of 'ell' and 'types'");
  if (j.contains("ell")) {
    f.ell = detail::get_numbers(j["ell"], w);
    if (static_cast<int>(f.ell.size()) != model.r())
      throw DimensionError(w + ": ell has " + std::to_string(f.ell.size()) + " entries, the model has " +
                           std::to_string(model.r()) + " types");
  } else {
    f.ell = model.indicator(detail::get_labels(j["types"], w));
  }
  if (j.contains("covariate")) {
    if (!j["covariate"].is_number_integer() || j["covariate"].get<int>() < 0)
      throw ValidationError(w + ": covariate must be a nonnegative column index");
    f.covariate = j["covariate"].get<int>();
  }
  if (j.contains("assume")) {
    const auto a = detail::get_as<std::string>(j["assume"], w);
    if (a == "eimc") f.assume = Assumption::eimc;
    else if (a != "none") throw ValidationError(w + ": unknown assumption '" + a + "'");
  }
  if (f.kind == FunctionalKind::outcome) {
    if (!j.contains("treatment")) throw ValidationError(w + ": outcome functional needs 'treatment'");
    f.treatment = j["treatment"].is_string() ? j["treatment"].get<std::string>()
                                             : std::to_string(detail::get_as<long long>(j["treatment"], w));
    model.treatment_index(f.treatment);
    f.rho = j.contains("rho") ? rho_from_json(j["rho"], w) : Rho::identity();
  } else {
    for (const char* k : {"rho", "treatment"})
      if (j.contains(k)) throw ValidationError(w + ": '" + k + "' is only valid for outcome functionals");
  }
  return f;
}

inline json functional_to_json(const FunctionalSpec& f) {
  json j;
  j["id"] = f.id;
  switch (f.kind) {
    case FunctionalKind::type:
      j["kind"] = "type";
      break;
    case FunctionalKind::outcome:
      j["kind"] = "outcome";
      break;
    case FunctionalKind::derived:
      j["kind"] = "derived";
      j["combine"] = combination_to_json(f.combine);
      return j;
  }
  j["ell"] = f.ell;
  if (f.covariate) j["covariate"] = *f.covariate;
  if (f.kind == FunctionalKind::outcome) {
    j["treatment"] = f.treatment;
    j["rho"] = rho_to_json(f.rho);
  }
  if (f.assume == Assumption::eimc) j["assume"] = "eimc";
  return j;
}

// Model file: treatments, instruments, types (array of arrays), optional mu
// and functionals; also name, type_names, masses and continuous {w_lo, w_hi}.
inline ModelSpec model_from_json(const json& j, const std::string& where = "model") {
  detail::check_keys(j, {"name", "treatments", "instruments", "types", "type_names", "masses", "mu", "continuous",
                         "functionals"},
                     where);
  for (const char* k : {"treatments", "instruments", "types"})
    if (!j.contains(k)) throw ValidationError(where + ": missing key '" + k + "'");
  ModelSpec m;
  if (j.contains("name")) m.name = detail::get_as<std::string>(j["name"], where);
  m.treatments.labels = detail::get_labels(j["treatments"], where + ".treatments");
  m.instruments.values = detail::get_labels(j["instruments"], where + ".instruments");
  if (!j["types"].is_array()) throw ValidationError(where + ".types: expected an array of arrays");
  std::vector<std::string> names;
  if (j.contains("type_names")) names = detail::get_labels(j["type_names"], where + ".type_names");
  if (!names.empty() && names.size() != j["types"].size())
    throw ValidationError(where + ": type_names and types differ in length");
  for (std::size_t i = 0; i < j["types"].size(); ++i) {
    ResponseType t;
    t.assignment = detail::get_labels(j["types"][i], where + ".types");
    if (!names.empty()) {
      t.name = names[i];
    } else {
      for (std::size_t k = 0; k < t.assignment.size(); ++k) t.name += (k ? "," : "") + t.assignment[k];
    }
    m.support.types.push_back(std::move(t));
  }
  if (j.contains("masses")) m.support.masses = detail::get_numbers(j["masses"], where + ".masses");
  if (j.contains("mu")) m.mu.mu = detail::get_numbers(j["mu"], where + ".mu");
  if (j.contains("continuous")) {
    const json& c = j["continuous"];
    detail::check_keys(c, {"w_lo", "w_hi"}, where + ".continuous");
    m.instruments.mode = InstrumentMode::continuous_pair;
    if (c.contains("w_lo")) m.instruments.w_lo = detail::get_number(c["w_lo"], where);
    if (c.contains("w_hi")) m.instruments.w_hi = detail::get_number(c["w_hi"], where);
  }
  auto diag = validate_model(m);
  if (!diag.empty()) {
    std::string msg = where + ": invalid model";
    for (const auto& d : diag) msg += "; " + d;
    throw ValidationError(msg);
  }
  if (j.contains("functionals")) {
    if (!j["functionals"].is_array()) throw ValidationError(where + ".functionals: expected an array");
    for (std::size_t k = 0; k < j["functionals"].size(); ++k)
      m.functionals.push_back(functional_from_json(j["functionals"][k], m, where + ".functionals[" + std::to_string(k) + "]"));
  }
  return m;
}

inline json model_to_json(const ModelSpec& m) {
  json j;
  if (!m.name.empty()) j["name"] = m.name;
  j["treatments"] = m.treatments.labels;
  j["instruments"] = m.instruments.values;
  json types = json::array(), names = json::array();
  for (const auto& t : m.support.types) {
    types.push_back(t.assignment);
    names.push_back(t.name);
  }
  j["types"] = types;
  j["type_names"] = names;
  if (!m.support.masses.empty()) j["masses"] = m.support.masses;
  if (!m.mu.mu.empty()) j["mu"] = m.mu.mu;
  if (m.instruments.mode == InstrumentMode::continuous_pair)
    j["continuous"] = json{{"w_lo", m.instruments.w_lo}, {"w_hi", m.instruments.w_hi}};
  if (!m.functionals.empty()) {
    json fs = json::array();
    for (const auto& f : m.functionals) fs.push_back(functional_to_json(f));
    j["functionals"] = fs;
  }
  return j;
}

// "preset:NAME" or a path to a model file.
inline ModelSpec load_model(const std::string& ref) {
  if (ref.rfind("preset:", 0) == 0) return preset_model(ref.substr(7));
  return model_from_json(parse_json_text(read_file(ref), ref), ref);
}

inline ModelSpec model_ref_from_json(const json& j, const std::string& where) {
  if (j.is_string()) return load_model(j.get<std::string>());
  return model_from_json(j, where);
}

// ---------------------------------------------------------------------------
// Simulation specs

inline OutcomeLaw outcome_law_from_json(const json& j, const std::string& where) {
  auto component = [&](const json& c) {
    detail::check_keys(c, {"weight", "mean", "sd"}, where);
    NormalComponent n;
    if (c.contains("weight")) n.weight = detail::get_number(c["weight"], where);
    if (c.contains("mean")) n.mean = detail::get_number(c["mean"], where);
    if (c.contains("sd")) n.sd = detail::get_number(c["sd"], where);
    return n;
  };
  if (j.is_number()) return {NormalComponent{1.0, j.get<double>(), 1.0}};
  if (j.is_object()) return {component(j)};
  if (!j.is_array()) throw ValidationError(where + ": outcome law must be a number, a component or an array of components");
  OutcomeLaw law;
  for (const auto& c : j) law.push_back(component(c));
  return law;
}

inline json outcome_law_to_json(const OutcomeLaw& law) {
  json a = json::array();
  for (const auto& c : law) a.push_back(json{{"weight", c.weight}, {"mean", c.mean}, {"sd", c.sd}});
  return a;
}

// {"model", "cells": [{x, mass, type_probs, pz, log_weight_mean}], "outcomes":
//  [cell][type][treatment] laws, "survey_weights", "weight_sigma", "x_noise_sd", "seed"}
inline DgpSpec dgp_from_json(const json& j, const std::string& where = "dgp") {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s.rfind("preset:", 0) == 0) return preset_dgp(s.substr(7));
    return dgp_from_json(parse_json_text(read_file(s), s), s);
  }
  detail::check_keys(j, {"model", "cells", "outcomes", "survey_weights", "weight_sigma", "x_noise_sd", "seed"}, where);
  for (const char* k : {"model", "cells", "outcomes"})
    if (!j.contains(k)) throw ValidationError(where + ": missing key '" + k + "'");
  DgpSpec s;
  s.model = model_ref_from_json(j["model"], where + ".model");
  if (!j["cells"].is_array()) throw ValidationError(where + ".cells: expected an array");
  for (const auto& c : j["cells"]) {
    detail::check_keys(c, {"x", "mass", "type_probs", "pz", "log_weight_mean"}, where + ".cells");
    CovariateCell cell;
    if (c.contains("x")) cell.x = detail::get_numbers(c["x"], where + ".cells.x");
    if (c.contains("mass")) cell.mass = detail::get_number(c["mass"], where);
    if (c.contains("type_probs")) cell.type_probs = detail::get_numbers(c["type_probs"], where + ".cells.type_probs");
    else cell.type_probs = s.model.support.masses;
    if (c.contains("pz")) cell.pz = detail::get_numbers(c["pz"], where + ".cells.pz");
    else cell.pz = std::vector<double>(s.model.q(), 1.0 / s.model.q());
    if (c.contains("log_weight_mean")) cell.log_weight_mean = detail::get_number(c["log_weight_mean"], where);
    s.cells.push_back(std::move(cell));
  }
  const json& o = j["outcomes"];
  if (!o.is_array()) throw ValidationError(where + ".outcomes: expected [cell][type][treatment] laws");
  for (const auto& cell : o) {
    if (!cell.is_array()) throw ValidationError(where + ".outcomes: expected [cell][type][treatment] laws");
    std::vector<std::vector<OutcomeLaw>> per_type;
    for (const auto& type : cell) {
      if (!type.is_array()) throw ValidationError(where + ".outcomes: expected [cell][type][treatment] laws");
      std::vector<OutcomeLaw> per_t;
      for (const auto& law : type) per_t.push_back(outcome_law_from_json(law, where + ".outcomes"));
      per_type.push_back(std::move(per_t));
    }
    s.outcomes.push_back(std::move(per_type));
  }
  if (j.contains("survey_weights")) s.survey_weights = detail::get_as<bool>(j["survey_weights"], where);
  if (j.contains("weight_sigma")) s.weight_sigma = detail::get_number(j["weight_sigma"], where);
  if (j.contains("x_noise_sd")) s.x_noise_sd = detail::get_number(j["x_noise_sd"], where);
  if (j.contains("seed")) s.seed = detail::get_seed(j["seed"], where + ".seed");
  auto diag = validate_dgp(s);
  if (!diag.empty()) {
    std::string msg = where + ": invalid simulation spec";
    for (const auto& d : diag) msg += "; " + d;
    throw ValidationError(msg);
  }
  return s;
}

inline json dgp_to_json(const DgpSpec& s) {
  json j;
  j["model"] = model_to_json(s.model);
  json cells = json::array();
  for (const auto& c : s.cells)
    cells.push_back(json{{"x", c.x}, {"mass", c.mass}, {"type_probs", c.type_probs}, {"pz", c.pz},
                         {"log_weight_mean", c.log_weight_mean}});
  j["cells"] = cells;
  json out = json::array();
  for (const auto& cell : s.outcomes) {
    json ct = json::array();
    for (const auto& type : cell) {
      json tt = json::array();
      for (const auto& law : type) tt.push_back(outcome_law_to_json(law));
      ct.push_back(tt);
    }
    out.push_back(ct);
  }
  j["outcomes"] = out;
  j["survey_weights"] = s.survey_weights;
  j["weight_sigma"] = s.weight_sigma;
  j["x_noise_sd"] = s.x_noise_sd;
  j["seed"] = s.seed;
  return j;
}

// ---------------------------------------------------------------------------
// Estimation plans

inline std::vector<double> grid_from_json(const json& j, const std::string& where) {
  if (j.is_array()) return detail::get_numbers(j, where);
  detail::check_keys(j, {"from", "to", "step"}, where);
  for (const char* k : {"from", "to", "step"})
    if (!j.contains(k)) throw ValidationError(where + ": grid needs from, to and step");
  const double a = detail::get_number(j["from"], where), b = detail::get_number(j["to"], where),
               h = detail::get_number(j["step"], where);
  if (!(h > 0.0) || !(b >= a)) throw ValidationError(where + ": grid needs step > 0 and to >= from");
  const long count = std::lround(std::floor((b - a) / h + 1e-9)) + 1;
  if (count > 100000) throw ValidationError(where + ": grid too long");
  std::vector<double> g;
  for (long k = 0; k < count; ++k) g.push_back(a + h * static_cast<double>(k));
  return g;
}

inline CvSettings cv_from_json(const json& j, CvSettings cv, const std::string& where) {
  detail::check_keys(j, {"folds", "loo", "grid_size", "grid_ratio", "seed", "alpha", "standardize"}, where);
  if (j.contains("folds")) cv.folds = detail::get_as<int>(j["folds"], where);
  if (j.contains("loo")) cv.loo = detail::get_as<bool>(j["loo"], where);
  if (j.contains("grid_size")) cv.grid_size = detail::get_as<int>(j["grid_size"], where);
  if (j.contains("grid_ratio")) cv.grid_ratio = detail::get_number(j["grid_ratio"], where);
  if (j.contains("seed")) cv.seed = detail::get_seed(j["seed"], where);
  if (j.contains("alpha")) cv.fixed_alpha = detail::get_number(j["alpha"], where);
  if (j.contains("standardize")) cv.lasso.standardize = detail::get_as<bool>(j["standardize"], where);
  if (cv.folds < 2) throw ValidationError(where + ": CV needs at least 2 folds");
  if (cv.grid_size < 1) throw ValidationError(where + ": grid_size must be positive");
  if (!(cv.grid_ratio > 0.0 && cv.grid_ratio < 1.0)) throw ValidationError(where + ": grid_ratio must lie in (0,1)");
  if (cv.fixed_alpha && !(*cv.fixed_alpha >= 0.0)) throw ValidationError(where + ": alpha must be nonnegative");
  return cv;
}

struct PlanConfig {
  EstimationPlan plan;
  bool fold_seed_set = false;
  bool cv_seed_set = false;
  bool bootstrap_seed_set = false;
  std::optional<std::uint64_t> seed;
};

// Keys: functionals, mediation_panel {rho}, qte, continuous, estimator, bootstrap, seed.
inline PlanConfig plan_from_json(const json& j, const ModelSpec& model, const std::string& where,
                                 std::initializer_list<const char*> extra_keys = {}) {
  std::set<std::string> ok = {"functionals", "mediation_panel", "qte", "continuous", "estimator", "bootstrap", "seed"};
  for (const char* k : extra_keys) ok.insert(k);
  if (!j.is_object()) throw ValidationError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw ValidationError(where + ": unknown key '" + it.key() + "'");
  PlanConfig pc;
  EstimationPlan& p = pc.plan;
  if (j.contains("functionals")) {
    if (!j["functionals"].is_array()) throw ValidationError(where + ".functionals: expected an array");
    for (std::size_t k = 0; k < j["functionals"].size(); ++k)
      p.functionals.push_back(
          functional_from_json(j["functionals"][k], model, where + ".functionals[" + std::to_string(k) + "]"));
  } else {
    p.functionals = model.functionals;
  }
  if (j.contains("mediation_panel")) {
    const json& mp = j["mediation_panel"];
    detail::check_keys(mp, {"rho"}, where + ".mediation_panel");
    if (!mp.contains("rho")) throw ValidationError(where + ".mediation_panel: needs 'rho'");
    for (auto& f : mediation_panel(model, rho_from_json(mp["rho"], where + ".mediation_panel.rho")))
      p.functionals.push_back(std::move(f));
  }
  if (j.contains("qte")) {
    for (const auto& q : j["qte"]) {
      detail::check_keys(q, {"id", "treated", "control", "types", "ell", "ygrid", "taus"}, where + ".qte");
      QteSpec qs;
      for (const char* k : {"id", "treated", "control", "ygrid", "taus"})
        if (!q.contains(k)) throw ValidationError(where + ".qte: missing key '" + k + "'");
      qs.id = detail::get_as<std::string>(q["id"], where);
      qs.treated = detail::get_as<std::string>(q["treated"], where);
      qs.control = detail::get_as<std::string>(q["control"], where);
      model.treatment_index(qs.treated);
      model.treatment_index(qs.control);
      if (q.contains("types") == q.contains("ell")) throw ValidationError(where + ".qte: give exactly one of 'types' and 'ell'");
      qs.group = q.contains("ell") ? detail::get_numbers(q["ell"], where) : model.indicator(detail::get_labels(q["types"], where));
      qs.ygrid = grid_from_json(q["ygrid"], where + ".qte.ygrid");
      qs.taus = detail::get_numbers(q["taus"], where + ".qte.taus");
      check_qte_grids(qs.ygrid, qs.taus);
      p.qte.push_back(std::move(qs));
    }
  }
  if (j.contains("continuous")) {
    for (const auto& c : j["continuous"]) {
      detail::check_keys(c, {"id", "c", "a", "b", "treatment", "bandwidth", "bandwidth_constant", "order"},
                         where + ".continuous");
      ContinuousTarget t;
      if (!c.contains("id")) throw ValidationError(where + ".continuous: missing 'id'");
      t.id = detail::get_as<std::string>(c["id"], where);
      if (c.contains("c")) t.c = detail::get_as<int>(c["c"], where);
      if (c.contains("a")) t.a = detail::get_number(c["a"], where);
      if (c.contains("b")) t.b = detail::get_number(c["b"], where);
      if (c.contains("treatment")) t.treatment = detail::get_as<std::string>(c["treatment"], where);
      if (c.contains("bandwidth")) t.bandwidth = detail::get_number(c["bandwidth"], where);
      if (c.contains("bandwidth_constant")) t.bandwidth_constant = detail::get_number(c["bandwidth_constant"], where);
      if (c.contains("order")) t.order = detail::get_as<int>(c["order"], where);
      p.continuous.push_back(std::move(t));
    }
  }
  if (j.contains("estimator")) {
    const json& e = j["estimator"];
    detail::check_keys(e, {"folds", "fold_seed", "u_min", "p_min", "cv", "degree"}, where + ".estimator");
    if (e.contains("folds")) p.settings.folds = detail::get_as<int>(e["folds"], where);
    if (e.contains("fold_seed")) {
      p.settings.fold_seed = detail::get_seed(e["fold_seed"], where);
      pc.fold_seed_set = true;
    }
    if (e.contains("u_min")) p.settings.u_min = detail::get_number(e["u_min"], where);
    if (e.contains("p_min")) p.settings.p_min = detail::get_number(e["p_min"], where);
    if (e.contains("degree")) p.degree = detail::get_as<int>(e["degree"], where);
    if (e.contains("cv")) {
      pc.cv_seed_set = e["cv"].contains("seed");
      p.settings.cv = cv_from_json(e["cv"], p.settings.cv, where + ".estimator.cv");
    }
    if (p.settings.folds < 1) throw ValidationError(where + ": folds must be >= 1");
    if (!(p.settings.u_min > 0.0 && p.settings.u_min < 1.0)) throw ValidationError(where + ": u_min must lie in (0,1)");
    if (!(p.settings.p_min > 0.0 && p.settings.p_min < 1.0)) throw ValidationError(where + ": p_min must lie in (0,1)");
    if (p.degree < 1 || p.degree > 12) throw ValidationError(where + ": degree must lie in [1, 12]");
  }
  p.bootstrap.B = 1000;
  if (j.contains("bootstrap")) {
    const json& b = j["bootstrap"];
    detail::check_keys(b, {"B", "law", "seed", "level", "qte"}, where + ".bootstrap");
    if (b.contains("B")) p.bootstrap.B = detail::get_as<int>(b["B"], where);
    if (b.contains("law")) p.bootstrap.law = weight_law_from_string(detail::get_as<std::string>(b["law"], where));
    if (b.contains("seed")) {
      p.bootstrap.seed = detail::get_seed(b["seed"], where);
      pc.bootstrap_seed_set = true;
    }
    if (b.contains("level")) p.bootstrap.level = detail::get_number(b["level"], where);
    if (b.contains("qte")) p.bootstrap.qte = detail::get_as<bool>(b["qte"], where);
    if (p.bootstrap.B < 0) throw ValidationError(where + ": B must be >= 0");
    if (!(p.bootstrap.level > 0.0 && p.bootstrap.level < 1.0)) throw ValidationError(where + ": level must lie in (0,1)");
  }
  if (j.contains("seed")) pc.seed = detail::get_seed(j["seed"], where + ".seed");
  return pc;
}

// A master seed fills every seed the config did not pin.
inline void apply_master_seed(PlanConfig& pc, std::uint64_t seed) {
  if (!pc.fold_seed_set) pc.plan.settings.fold_seed = replicate_seed(seed, 0, 2);
  if (!pc.cv_seed_set) pc.plan.settings.cv.seed = replicate_seed(seed, 0, 3);
  if (!pc.bootstrap_seed_set) pc.plan.bootstrap.seed = replicate_seed(seed, 0, 4);
}

// ---------------------------------------------------------------------------
// CSV datasets

struct LoadDiagnostics {
  int rows_read = 0;
  int rows_dropped = 0;
  std::vector<std::string> messages;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char ch = line[k];
    if (quoted) {
      if (ch == '"') {
        if (k + 1 < line.size() && line[k + 1] == '"') {
          cur += '"';
          ++k;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    std::size_t a = s.find_first_not_of(" \t"), b = s.find_last_not_of(" \t\r");
    s = a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  }
  return out;
}

inline bool parse_double(const std::string& s, double& v) {
  if (s.empty()) return false;
  char* end = nullptr;
  v = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(v);
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// Columns y, t, z (or c, w), x1..xm, optional weight. Rows with a missing or
// unparsable cell are dropped and counted; labels outside the model are errors.
inline Dataset load_dataset(const std::string& path, const ModelSpec& model, LoadDiagnostics* diag = nullptr) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": file is empty");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // UTF-8 BOM
  std::vector<std::string> header = detail::split_csv_line(line);
  std::map<std::string, int> col;
  for (int k = 0; k < static_cast<int>(header.size()); ++k) {
    if (col.count(header[k])) throw DataError(path + ": duplicate column '" + header[k] + "'");
    col[header[k]] = k;
  }
  const bool cont = model.instruments.mode == InstrumentMode::continuous_pair;
  std::vector<std::string> need = cont ? std::vector<std::string>{"y", "t", "c", "w"} : std::vector<std::string>{"y", "t", "z"};
  for (const auto& c : need)
    if (!col.count(c)) throw DataError(path + ": missing mandatory column '" + c + "'");
  std::vector<int> xcols;
  for (int m = 1;; ++m) {
    auto it = col.find("x" + std::to_string(m));
    if (it == col.end()) break;
    xcols.push_back(it->second);
  }
  for (const auto& h : header) {
    const bool known = h == "y" || h == "t" || h == "z" || h == "c" || h == "w" || h == "weight" ||
                       (h.size() > 1 && h[0] == 'x' && col.count(h) &&
                        std::find(xcols.begin(), xcols.end(), col[h]) != xcols.end());
    if (!known) throw DataError(path + ": unexpected column '" + h + "' (covariates must be x1..xm without gaps)");
  }
  const bool has_w = col.count("weight") > 0;
  std::vector<double> ys, ws, omegas;
  std::vector<int> ts, zs;
  std::vector<std::vector<double>> xs;
  LoadDiagnostics d;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    ++d.rows_read;
    std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw DataError(path + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(header.size()));
    bool missing = false;
    double y = 0.0, w = 0.0, om = 1.0;
    if (!detail::parse_double(cells[col["y"]], y)) missing = true;
    const std::string& tl = cells[col["t"]];
    const std::string& zl = cells[col[cont ? "c" : "z"]];
    if (tl.empty() || zl.empty()) missing = true;
    if (cont && !detail::parse_double(cells[col["w"]], w)) missing = true;
    std::vector<double> x(xcols.size());
    for (std::size_t k = 0; k < xcols.size(); ++k)
      if (!detail::parse_double(cells[xcols[k]], x[k])) missing = true;
    if (has_w && !detail::parse_double(cells[col["weight"]], om)) missing = true;
    if (missing) {
      ++d.rows_dropped;
      continue;
    }
    auto t = model.find_treatment(tl);
    if (!t) throw DataError(path + ": row " + std::to_string(row) + ": unknown treatment label '" + tl + "'");
    auto z = model.find_instrument(zl);
    if (!z) throw DataError(path + ": row " + std::to_string(row) + ": unknown instrument value '" + zl + "'");
    if (om < 0.0) throw DataError(path + ": row " + std::to_string(row) + ": negative survey weight");
    if (cont && (w < model.instruments.w_lo || w > model.instruments.w_hi))
      throw DataError(path + ": row " + std::to_string(row) + ": w outside [w_lo, w_hi]");
    ys.push_back(y);
    ts.push_back(*t);
    zs.push_back(*z);
    ws.push_back(w);
    omegas.push_back(om);
    xs.push_back(std::move(x));
  }
  if (d.rows_dropped > 0)
    d.messages.push_back(std::to_string(d.rows_dropped) + " row(s) with missing or unparsable cells dropped");
  if (ys.empty()) throw DataError(path + ": no usable rows");
  const int n = static_cast<int>(ys.size());
  Dataset data;
  data.y = Eigen::Map<Eigen::VectorXd>(ys.data(), n);
  data.t = Eigen::Map<Eigen::VectorXi>(ts.data(), n);
  data.z = Eigen::Map<Eigen::VectorXi>(zs.data(), n);
  if (cont) data.w = Eigen::Map<Eigen::VectorXd>(ws.data(), n);
  data.x.resize(n, static_cast<Eigen::Index>(xcols.size()));
  for (int i = 0; i < n; ++i)
    for (std::size_t k = 0; k < xcols.size(); ++k) data.x(i, k) = xs[i][k];
  data.omega = Eigen::Map<Eigen::VectorXd>(omegas.data(), n);
  const double s = data.omega.sum();
  if (!(s > 0.0)) throw DataError(path + ": survey weights sum to zero");
  data.omega /= s;
  data.weighted = has_w;
  if (diag) *diag = d;
  return data;
}

inline std::string dataset_to_csv(const Dataset& data, const ModelSpec& model) {
  const bool cont = data.continuous();
  std::string out = cont ? "y,t,c,w" : "y,t,z";
  for (int k = 0; k < data.m(); ++k) out += ",x" + std::to_string(k + 1);
  if (data.weighted) out += ",weight";
  out += '\n';
  for (int i = 0; i < data.n(); ++i) {
    out += detail::fmt17(data.y(i));
    out += ',' + model.treatments.labels.at(data.t(i));
    out += ',' + model.instruments.values.at(data.z(i));
    if (cont) out += ',' + detail::fmt17(data.w(i));
    for (int k = 0; k < data.m(); ++k) out += ',' + detail::fmt17(data.x(i, k));
    if (data.weighted) out += ',' + detail::fmt17(data.omega(i));
    out += '\n';
  }
  return out;
}

inline void write_dataset(const std::string& path, const Dataset& data, const ModelSpec& model) {
  write_file(path, dataset_to_csv(data, model));
}

// Columnar draws: replicate, functional, value.
inline std::string draws_to_csv(const BootstrapDraws& d) {
  std::string out = "replicate,functional,value\n";
  for (int b = 0; b < d.B; ++b)
    for (std::size_t g = 0; g < d.ids.size(); ++g)
      out += std::to_string(b) + ',' + d.ids[g] + ',' + detail::fmt17(d.draws(b, static_cast<Eigen::Index>(g))) + '\n';
  return out;
}

}  // namespace poforge
