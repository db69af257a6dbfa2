#pragma once

#include <cstdint>
#include <cstdlib>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "poforge/identify.hpp"
#include "poforge/io.hpp"
#include "poforge/pipeline.hpp"
#include "poforge/simulate.hpp"

namespace poforge {

inline constexpr const char* report_schema = "po-forge/1";

struct CliOptions {
  std::string model;   // path or preset:NAME
  std::string data;    // CSV path
  std::string config;  // JSON path
  std::string out;     // report path; empty writes to the output stream
  std::string draws;   // bootstrap draws CSV path
  std::optional<std::uint64_t> seed;
  int threads = 1;
  // simulate
  std::string dgp;     // path or preset:NAME
  std::string csv;     // generated dataset path
  std::optional<int> n;
  std::optional<int> reps;
};

// --seed, else the config's seed, else PO_FORGE_SEED, else the fallback.
inline std::uint64_t resolve_seed(const CliOptions& o, std::optional<std::uint64_t> config_seed, std::uint64_t fallback) {
  if (o.seed) return *o.seed;
  if (config_seed) return *config_seed;
  if (const char* env = std::getenv("PO_FORGE_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') throw ValidationError("PO_FORGE_SEED must be a nonnegative integer");
    return v;
  }
  return fallback;
}

namespace detail {

inline json base_report(const char* command) {
  json r;
  r["schema"] = report_schema;
  r["command"] = command;
  return r;
}

inline void emit(const CliOptions& o, const json& report, std::ostream& out) {
  const std::string text = dump_json(report);
  if (o.out.empty()) out << text;
  else write_file(o.out, text);
}

inline json load_config(const CliOptions& o) {
  if (o.config.empty()) return json::object();
  json j = parse_json_text(read_file(o.config), o.config);
  if (!j.is_object()) throw ValidationError(o.config + ": config must be a JSON object");
  return j;
}

inline ModelSpec resolve_model(const CliOptions& o, const json& cfg) {
  if (!o.model.empty()) return load_model(o.model);
  if (cfg.contains("model")) return model_ref_from_json(cfg["model"], "config.model");
  throw ValidationError("no model given (use --model PATH or --model preset:NAME)");
}

inline json ci_json(const Interval& ci) {
  return json{{"lo", ci.lo}, {"hi", ci.hi}, {"halfwidth", ci.halfwidth}};
}

inline const char* kind_name(FunctionalKind k) {
  switch (k) {
    case FunctionalKind::type:
      return "type";
    case FunctionalKind::outcome:
      return "outcome";
    case FunctionalKind::derived:
      return "derived";
  }
  return "?";
}

// Runs `body`; on error writes a report with the message and returns 1.
template <class F>
int guarded(const CliOptions& o, const char* command, std::ostream& out, std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    if (!o.out.empty()) {
      try {
        json r = base_report(command);
        r["status"] = "error";
        r["error"] = e.what();
        emit(o, r, out);
      } catch (const std::exception&) {
      }
    }
    return 1;
  }
}

}  // namespace detail

inline json identification_json(const ModelSpec& model, const IdentificationReport& rep) {
  json j;
  json m;
  m["name"] = model.name;
  m["treatments"] = model.treatments.labels;
  m["instruments"] = model.instruments.values;
  json types = json::array();
  for (const auto& t : model.support.types) types.push_back(json{{"name", t.name}, {"assignment", t.assignment}});
  m["types"] = types;
  j["model"] = m;
  j["diagnostics"] = rep.diagnostics;
  if (rep.efficiency_checked) {
    json rank = json::object();
    for (const auto& [t, ok] : rep.rank_condition) rank[t] = ok;
    j["efficiency"] = json{{"rank_condition", rank}, {"nullspace_condition", rep.nullspace_condition}};
  }
  json fs = json::array();
  for (const auto& v : rep.functionals) {
    json f;
    f["id"] = v.id;
    f["kind"] = detail::kind_name(v.kind);
    f["identified"] = v.identified;
    f["route"] = v.route;
    if (v.route != "derived") {
      f["residual"] = v.residual;
      f["s"] = std::vector<double>(v.s.data(), v.s.data() + v.s.size());
    }
    if (!v.note.empty()) f["note"] = v.note;
    fs.push_back(f);
  }
  j["functionals"] = fs;
  return j;
}

inline int cmd_identify(const CliOptions& o, std::ostream& out, std::ostream& err) {
  return detail::guarded(o, "identify", out, err, [&] {
    json cfg = detail::load_config(o);
    detail::check_keys(cfg, {"model", "functionals"}, "config");
    json report = detail::base_report("identify");
    ModelSpec model;
    try {
      model = detail::resolve_model(o, cfg);
    } catch (const ValidationError& e) {
      report["status"] = "error";
      report["error"] = e.what();
      err << "error: " << e.what() << "\n";
      if (!o.out.empty()) detail::emit(o, report, out);
      return 1;
    }
    std::vector<FunctionalSpec> fs = model.functionals;
    if (cfg.contains("functionals")) {
      fs.clear();
      for (std::size_t k = 0; k < cfg["functionals"].size(); ++k)
        fs.push_back(functional_from_json(cfg["functionals"][k], model, "config.functionals[" + std::to_string(k) + "]"));
    }
    IdentificationReport rep = identification_report(model, fs);
    json body = identification_json(model, rep);
    const bool ok = rep.diagnostics.empty();
    report["status"] = ok ? "ok" : "error";
    for (auto it = body.begin(); it != body.end(); ++it) report[it.key()] = it.value();
    json warnings = json::array();
    for (const auto& v : rep.functionals)
      if (!v.identified) warnings.push_back("functional '" + v.id + "' is not identified");
    report["warnings"] = warnings;
    detail::emit(o, report, out);
    if (!ok)
      for (const auto& d : rep.diagnostics) err << "model: " << d << "\n";
    return ok ? 0 : 1;
  });
}

inline json plan_result_json(const PlanResult& res, const EstimationPlan& plan) {
  json est = json::array();
  for (const auto& e : res.estimates) {
    json r;
    r["id"] = e.id;
    r["route"] = e.route;
    r["estimate"] = e.point;
    r["se"] = e.se;
    if (e.ci) r["ci"] = detail::ci_json(*e.ci);
    r["n"] = e.n;
    r["K"] = e.K;
    r["B"] = plan.bootstrap.B;
    r["seed"] = plan.bootstrap.seed;
    json alphas = json::array();
    for (const auto& a : e.nuisance) alphas.push_back(json{{"nuisance", a.name}, {"fold", a.fold}, {"alpha", a.alpha}});
    r["alphas"] = alphas;
    if (!e.warnings.empty()) r["warnings"] = e.warnings;
    est.push_back(r);
  }
  json j;
  j["estimates"] = est;
  if (!res.qte.empty()) {
    json q = json::array();
    for (const auto& qe : res.qte) {
      json r;
      r["id"] = qe.id;
      r["taus"] = qe.result.taus;
      r["q_treated"] = qe.result.q1;
      r["q_control"] = qe.result.q0;
      r["qte"] = qe.result.qte;
      if (!qe.ci.empty()) {
        json cis = json::array();
        for (const auto& c : qe.ci) cis.push_back(detail::ci_json(c));
        r["ci"] = cis;
      }
      q.push_back(r);
    }
    j["qte"] = q;
  }
  return j;
}

inline int cmd_estimate(const CliOptions& o, std::ostream& out, std::ostream& err) {
  return detail::guarded(o, "estimate", out, err, [&] {
    json cfg = detail::load_config(o);
    ModelSpec model = detail::resolve_model(o, cfg);
    PlanConfig pc = plan_from_json(cfg, model, "config", {"model", "data", "draws_csv"});
    const std::uint64_t seed = resolve_seed(o, pc.seed, 20240101);
    apply_master_seed(pc, seed);
    EstimationPlan& plan = pc.plan;
    plan.settings.threads = std::max(1, o.threads);
    std::string data_path = o.data;
    if (data_path.empty() && cfg.contains("data")) data_path = detail::get_as<std::string>(cfg["data"], "config.data");
    if (data_path.empty()) throw ValidationError("no data given (use --data PATH)");
    LoadDiagnostics ld;
    Dataset data = load_dataset(data_path, model, &ld);
    PlanResult res = run_plan(data, model, plan);

    json report = detail::base_report("estimate");
    report["status"] = "ok";
    report["model"] = model.name;
    report["data"] = json{{"path", data_path}, {"n", data.n()}, {"rows_read", ld.rows_read},
                          {"rows_dropped", ld.rows_dropped}, {"weighted", data.weighted}};
    const auto& st = plan.settings;
    json settings;
    settings["seed"] = seed;
    settings["K"] = st.folds;
    settings["fold_seed"] = st.fold_seed;
    settings["cv"] = json{{"folds", st.cv.folds}, {"loo", st.cv.loo}, {"grid_size", st.cv.grid_size},
                          {"grid_ratio", st.cv.grid_ratio}, {"seed", st.cv.seed}};
    if (st.cv.fixed_alpha) settings["cv"]["alpha"] = *st.cv.fixed_alpha;
    settings["u_min"] = st.u_min;
    settings["p_min"] = st.p_min;
    report["settings"] = settings;
    if (plan.bootstrap.B > 0)
      report["bootstrap"] = json{{"B", plan.bootstrap.B}, {"law", to_string(plan.bootstrap.law)},
                                 {"seed", plan.bootstrap.seed}, {"level", plan.bootstrap.level}};
    json body = plan_result_json(res, plan);
    for (auto it = body.begin(); it != body.end(); ++it) report[it.key()] = it.value();
    json warnings = json::array();
    for (const auto& m : ld.messages) warnings.push_back(m);
    for (const auto& w : res.warnings) warnings.push_back(w);
    report["warnings"] = warnings;

    std::string draws = o.draws;
    if (draws.empty() && cfg.contains("draws_csv")) draws = detail::get_as<std::string>(cfg["draws_csv"], "config.draws_csv");
    if (!draws.empty()) {
      if (!res.draws) throw ValidationError("bootstrap draws requested but B = 0");
      write_file(draws, draws_to_csv(*res.draws));
    }
    for (const auto& m : ld.messages) err << "warning: " << m << "\n";
    for (const auto& w : res.warnings) err << "warning: " << w << "\n";
    detail::emit(o, report, out);
    return 0;
  });
}

inline json mc_json(const McReport& mc) {
  json rows = json::array();
  for (const auto& r : mc.rows)
    rows.push_back(json{{"id", r.id},
                        {"truth", r.truth},
                        {"reps", r.reps},
                        {"mean", r.mean},
                        {"bias", r.bias},
                        {"mc_sd", r.mc_sd},
                        {"mc_se", r.mc_se},
                        {"mean_se", r.mean_se},
                        {"se_ratio", r.se_ratio},
                        {"coverage_analytic", r.coverage_analytic},
                        {"coverage_bootstrap", r.coverage_bootstrap}});
  return json{{"reps", mc.reps}, {"n", mc.n}, {"seed", mc.seed}, {"failures", mc.failures},
              {"failure_messages", mc.failure_messages}, {"rows", rows}};
}

// Config: {"dgp": preset:NAME | path | inline spec, "n", "seed", "csv",
//          "monte_carlo": {"reps", "n", "plan": {...estimation plan keys...}}}
inline int cmd_simulate(const CliOptions& o, std::ostream& out, std::ostream& err) {
  return detail::guarded(o, "simulate", out, err, [&] {
    json cfg = detail::load_config(o);
    detail::check_keys(cfg, {"dgp", "n", "seed", "csv", "monte_carlo"}, "config");
    DgpSpec spec;
    if (!o.dgp.empty()) spec = dgp_from_json(json(o.dgp), o.dgp);
    else if (!o.model.empty() && o.model.rfind("preset:", 0) == 0) spec = preset_dgp(o.model.substr(7));
    else if (cfg.contains("dgp")) spec = dgp_from_json(cfg["dgp"], "config.dgp");
    else throw ValidationError("no simulation spec given (use --dgp preset:NAME or a config with 'dgp')");
    std::optional<std::uint64_t> cseed;
    if (cfg.contains("seed")) cseed = detail::get_seed(cfg["seed"], "config.seed");
    const std::uint64_t seed = resolve_seed(o, cseed, spec.seed);
    json report = detail::base_report("simulate");
    report["status"] = "ok";
    report["model"] = spec.model.name;
    report["seed"] = seed;
    int n = o.n.value_or(cfg.contains("n") ? detail::get_as<int>(cfg["n"], "config.n") : 0);
    std::string csv = o.csv.empty() ? (cfg.contains("csv") ? detail::get_as<std::string>(cfg["csv"], "config.csv") : "")
                                    : o.csv;
    if (n > 0) {
      SimulatedData sim = generate_data(spec, n, seed);
      if (!csv.empty()) write_dataset(csv, sim.data, spec.model);
      report["dataset"] = json{{"n", n}, {"path", csv}, {"weighted", sim.data.weighted}};
    } else if (!csv.empty()) {
      throw ValidationError("a dataset path was given without a sample size n");
    }
    if (cfg.contains("monte_carlo")) {
      const json& mcj = cfg["monte_carlo"];
      detail::check_keys(mcj, {"reps", "n", "plan"}, "config.monte_carlo");
      const int reps = o.reps.value_or(mcj.contains("reps") ? detail::get_as<int>(mcj["reps"], "config.monte_carlo.reps") : 0);
      const int mn = mcj.contains("n") ? detail::get_as<int>(mcj["n"], "config.monte_carlo.n") : n;
      if (mn < 1) throw ValidationError("monte_carlo needs a sample size n");
      PlanConfig pc = plan_from_json(mcj.contains("plan") ? mcj["plan"] : json::object(), spec.model,
                                     "config.monte_carlo.plan");
      McReport mc = monte_carlo(spec, pc.plan, reps, mn, seed, std::max(1, o.threads));
      report["monte_carlo"] = mc_json(mc);
      if (mc.failures > 0) err << "warning: " << mc.failures << " replication(s) failed\n";
      json warnings = json::array();
      if (mc.failures > 0) warnings.push_back(std::to_string(mc.failures) + " replication(s) failed");
      report["warnings"] = warnings;
    } else if (n <= 0) {
      throw ValidationError("nothing to do: give n (dataset) and/or monte_carlo");
    }
    if (!report.contains("warnings")) report["warnings"] = json::array();
    detail::emit(o, report, out);
    return 0;
  });
}

}  // namespace poforge
