#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/dataset.hpp"
#include "poforge/error.hpp"
#include "poforge/identify.hpp"
#include "poforge/model.hpp"

namespace poforge {

struct NormalComponent {
  double weight = 1.0;
  double mean = 0.0;
  double sd = 1.0;
};

using OutcomeLaw = std::vector<NormalComponent>;  // finite Gaussian mixture

struct CovariateCell {
  std::vector<double> x;
  double mass = 1.0;
  std::vector<double> type_probs;  // over the model's types
  std::vector<double> pz;          // P(Z = z_j | cell)
  double log_weight_mean = 0.0;    // survey weights: exp(log_weight_mean + sigma N(0,1))
};

struct DgpSpec {
  ModelSpec model;
  std::vector<CovariateCell> cells;
  std::vector<std::vector<std::vector<OutcomeLaw>>> outcomes;  // [cell][type][treatment]
  bool survey_weights = false;
  double weight_sigma = 0.0;
  double x_noise_sd = 0.0;  // within-cell covariate noise, ignored by outcome laws
  std::uint64_t seed = 1;

  int m() const { return cells.empty() ? 0 : static_cast<int>(cells.front().x.size()); }
};

inline std::vector<std::string> validate_dgp(const DgpSpec& spec) {
  std::vector<std::string> diag = validate_model(spec.model);
  if (!diag.empty()) return diag;
  const int r = spec.model.r(), q = spec.model.q(), d = spec.model.d();
  if (spec.cells.empty()) diag.push_back("covariate law has no cells");
  double mass = 0.0;
  for (std::size_t c = 0; c < spec.cells.size(); ++c) {
    const auto& cell = spec.cells[c];
    const std::string tag = "cell " + std::to_string(c);
    if (cell.x.size() != static_cast<std::size_t>(spec.m())) diag.push_back(tag + " has a covariate vector of the wrong length");
    if (!(cell.mass >= 0.0)) diag.push_back(tag + " has a negative mass");
    mass += cell.mass;
    auto check_simplex = [&](const std::vector<double>& p, std::size_t len, const std::string& what, double floor) {
      if (p.size() != len) {
        diag.push_back(tag + ": " + what + " has length " + std::to_string(p.size()) + ", expected " + std::to_string(len));
        return;
      }
      double s = 0.0;
      for (double v : p) {
        if (!(v >= floor)) diag.push_back(tag + ": " + what + " entry " + std::to_string(v) + " below " + std::to_string(floor));
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-9) diag.push_back(tag + ": " + what + " sums to " + std::to_string(s));
    };
    check_simplex(cell.type_probs, r, "type probabilities", 0.0);
    check_simplex(cell.pz, q, "instrument probabilities", 1e-3);
  }
  if (std::abs(mass - 1.0) > 1e-9) diag.push_back("cell masses sum to " + std::to_string(mass));
  if (spec.outcomes.size() != spec.cells.size()) {
    diag.push_back("outcome laws must be given for every cell");
  } else {
    for (std::size_t c = 0; c < spec.outcomes.size(); ++c) {
      if (spec.outcomes[c].size() != static_cast<std::size_t>(r)) {
        diag.push_back("cell " + std::to_string(c) + ": outcome laws must be given for every type");
        continue;
      }
      for (int i = 0; i < r; ++i) {
        if (spec.outcomes[c][i].size() != static_cast<std::size_t>(d)) {
          diag.push_back("cell " + std::to_string(c) + ", type " + std::to_string(i) + ": one law per treatment needed");
          continue;
        }
        for (const auto& law : spec.outcomes[c][i]) {
          double w = 0.0;
          for (const auto& comp : law) {
            if (!(comp.weight >= 0.0) || !(comp.sd >= 0.0) || !std::isfinite(comp.mean))
              diag.push_back("invalid mixture component in cell " + std::to_string(c));
            w += comp.weight;
          }
          if (law.empty() || std::abs(w - 1.0) > 1e-9) diag.push_back("mixture weights must sum to one in cell " + std::to_string(c));
        }
      }
    }
  }
  if (spec.survey_weights && !(spec.weight_sigma >= 0.0)) diag.push_back("weight_sigma must be nonnegative");
  if (!(spec.x_noise_sd >= 0.0)) diag.push_back("x_noise_sd must be nonnegative");
  return diag;
}

struct SimulatedData {
  Dataset data;
  Eigen::VectorXi types;       // hidden T*
  Eigen::MatrixXd potential;   // hidden Y*(t), n x d
  Eigen::VectorXi cell;
};

namespace detail {

inline int draw_categorical(std::mt19937_64& rng, const std::vector<double>& p) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double v = u(rng), acc = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    acc += p[k];
    if (v < acc) return static_cast<int>(k);
  }
  for (std::size_t k = p.size(); k-- > 0;)
    if (p[k] > 0.0) return static_cast<int>(k);
  return 0;
}

inline double draw_mixture(std::mt19937_64& rng, const OutcomeLaw& law) {
  std::vector<double> w;
  for (const auto& c : law) w.push_back(c.weight);
  const auto& comp = law[draw_categorical(rng, w)];
  std::normal_distribution<double> nd(0.0, 1.0);
  return comp.mean + comp.sd * nd(rng);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846); }

// E[rho(Y)] for Y ~ N(mu, sd^2).
inline double normal_expectation(const Rho& rho, double mu, double sd) {
  if (sd == 0.0) return rho(mu);
  switch (rho.kind) {
    case Rho::Kind::identity:
      return mu;
    case Rho::Kind::constant:
      return rho.value;
    case Rho::Kind::indicator:
      return normal_cdf((rho.threshold - mu) / sd);
    case Rho::Kind::clipped: {
      const double a = (rho.lo - mu) / sd, b = (rho.hi - mu) / sd;
      const double pa = std::isfinite(a) ? normal_cdf(a) : (a < 0 ? 0.0 : 1.0);
      const double pb = std::isfinite(b) ? normal_cdf(b) : (b < 0 ? 0.0 : 1.0);
      const double da = std::isfinite(a) ? normal_pdf(a) : 0.0;
      const double db = std::isfinite(b) ? normal_pdf(b) : 0.0;
      double v = mu * (pb - pa) + sd * (da - db);
      if (std::isfinite(rho.lo)) v += rho.lo * pa;
      if (std::isfinite(rho.hi)) v += rho.hi * (1.0 - pb);
      return v;
    }
  }
  return 0.0;
}

}  // namespace detail

inline double law_expectation(const OutcomeLaw& law, const Rho& rho) {
  double v = 0.0;
  for (const auto& c : law) v += c.weight * detail::normal_expectation(rho, c.mean, c.sd);
  return v;
}

inline SimulatedData generate_data(const DgpSpec& spec, int n, std::uint64_t seed) {
  auto diag = validate_dgp(spec);
  if (!diag.empty()) throw ValidationError("invalid simulation spec: " + diag.front());
  if (n < 1) throw ValidationError("sample size must be positive");
  const int d = spec.model.d(), m = spec.m();
  Eigen::MatrixXi assign = spec.model.assignment_indices();
  std::vector<double> cell_mass;
  for (const auto& c : spec.cells) cell_mass.push_back(c.mass);

  SimulatedData out;
  Dataset& data = out.data;
  data.y.resize(n);
  data.t.resize(n);
  data.z.resize(n);
  data.x.resize(n, m);
  data.omega.resize(n);
  out.types.resize(n);
  out.potential.resize(n, d);
  out.cell.resize(n);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0xd6e8feb8u};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const int c = detail::draw_categorical(rng, cell_mass);
    const CovariateCell& cell = spec.cells[c];
    const int type = detail::draw_categorical(rng, cell.type_probs);
    for (int t = 0; t < d; ++t) out.potential(i, t) = detail::draw_mixture(rng, spec.outcomes[c][type][t]);
    const int z = detail::draw_categorical(rng, cell.pz);
    for (int j = 0; j < m; ++j) data.x(i, j) = cell.x[j] + (spec.x_noise_sd > 0.0 ? spec.x_noise_sd * nd(rng) : 0.0);
    double w = 1.0;
    if (spec.survey_weights) w = std::exp(cell.log_weight_mean + spec.weight_sigma * nd(rng));
    out.cell(i) = c;
    out.types(i) = type;
    data.z(i) = z;
    data.t(i) = assign(type, z);
    data.y(i) = out.potential(i, data.t(i));
    data.omega(i) = w;
  }
  data.omega /= data.omega.sum();
  data.weighted = spec.survey_weights;
  return out;
}

inline SimulatedData generate_data(const DgpSpec& spec, int n) { return generate_data(spec, n, spec.seed); }

// Cell masses of the population the estimators target: tilted by the mean
// survey weight when weights are drawn.
inline std::vector<double> target_cell_masses(const DgpSpec& spec) {
  std::vector<double> m;
  double s = 0.0;
  for (const auto& c : spec.cells) {
    double v = c.mass;
    if (spec.survey_weights) v *= std::exp(c.log_weight_mean + 0.5 * spec.weight_sigma * spec.weight_sigma);
    m.push_back(v);
    s += v;
  }
  for (auto& v : m) v /= s;
  return m;
}

// Exact E[rho(Y(t)) l(T*, X)] (outcome) or E[l(T*, X)] (type).
inline double oracle_value(const DgpSpec& spec, const FunctionalSpec& f) {
  if (f.kind == FunctionalKind::derived) throw ValidationError("derived functionals need their components: use oracle_values");
  const int r = spec.model.r();
  if (static_cast<int>(f.ell.size()) != r) throw DimensionError("ell table does not match the model's types");
  if (f.covariate && (*f.covariate < 0 || *f.covariate >= spec.m())) throw DimensionError("covariate index out of range");
  const int t = f.kind == FunctionalKind::outcome ? spec.model.treatment_index(f.treatment) : -1;
  std::vector<double> mass = target_cell_masses(spec);
  double v = 0.0;
  for (std::size_t c = 0; c < spec.cells.size(); ++c) {
    const auto& cell = spec.cells[c];
    const double mult = f.covariate ? cell.x[*f.covariate] : 1.0;
    for (int i = 0; i < r; ++i) {
      if (f.ell[i] == 0.0 || cell.type_probs[i] == 0.0) continue;
      double e = f.kind == FunctionalKind::outcome ? law_expectation(spec.outcomes[c][i][t], f.rho) : 1.0;
      v += mass[c] * cell.type_probs[i] * f.ell[i] * mult * e;
    }
  }
  return v;
}

inline std::map<std::string, double> oracle_values(const DgpSpec& spec, const std::vector<FunctionalSpec>& fs) {
  std::map<std::string, double> out;
  for (const auto& f : fs) {
    if (f.kind == FunctionalKind::derived) {
      out[f.id] = evaluate(f.combine, [&](const std::string& id) {
        auto it = out.find(id);
        if (it == out.end()) throw ValidationError("derived functional '" + f.id + "' references unknown '" + id + "'");
        return it->second;
      });
    } else {
      out[f.id] = oracle_value(spec, f);
    }
  }
  return out;
}

// Sum over all (cell, type, z) of mass * kappa(t*(z), z, x) [* E rho(Y(t))];
// equals oracle_value for identified functionals.
inline double kappa_moment(const DgpSpec& spec, const FunctionalSpec& f) {
  IdentificationSolution sol = f.kind == FunctionalKind::type ? solve_type_functional(spec.model, f.ell)
                                                              : solve_outcome_functional(spec.model, f.treatment, f.ell);
  if (!sol.identified) throw IdentificationError("functional '" + f.id + "' is not identified");
  Eigen::MatrixXi assign = spec.model.assignment_indices();
  std::vector<double> mass = target_cell_masses(spec);
  double v = 0.0;
  for (std::size_t c = 0; c < spec.cells.size(); ++c) {
    const auto& cell = spec.cells[c];
    Eigen::VectorXd pz = detail::to_vector(cell.pz);
    Eigen::MatrixXd kappa = kappa_weights(sol, pz);
    const double mult = f.covariate ? cell.x[*f.covariate] : 1.0;
    for (int i = 0; i < spec.model.r(); ++i) {
      for (int j = 0; j < spec.model.q(); ++j) {
        const int t = assign(i, j);
        double e = f.kind == FunctionalKind::outcome ? law_expectation(spec.outcomes[c][i][t], f.rho) : 1.0;
        v += mass[c] * cell.type_probs[i] * cell.pz[j] * kappa(t, j) * mult * e;
      }
    }
  }
  return v;
}

// Quantile of Y(t) within the group `ell` (an indicator table) by bisection
// on the exact mixture CDF.
inline double oracle_quantile(const DgpSpec& spec, const std::string& treatment, const std::vector<double>& group, double tau) {
  FunctionalSpec g;
  g.kind = FunctionalKind::type;
  g.ell = group;
  const double pg = oracle_value(spec, g);
  if (!(pg > 0.0)) throw ValidationError("group has zero mass");
  FunctionalSpec f;
  f.kind = FunctionalKind::outcome;
  f.ell = group;
  f.treatment = treatment;
  auto cdf = [&](double y) {
    f.rho = Rho::indicator(y);
    return oracle_value(spec, f) / pg;
  };
  double lo = -1.0, hi = 1.0;
  while (cdf(lo) > tau) lo *= 2.0;
  while (cdf(hi) < tau) hi *= 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-13; ++it) {
    double mid = 0.5 * (lo + hi);
    (cdf(mid) < tau ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

namespace detail {

inline std::vector<std::vector<OutcomeLaw>> gaussian_laws(const std::vector<std::vector<double>>& means, double sd) {
  std::vector<std::vector<OutcomeLaw>> out;
  for (const auto& row : means) {
    std::vector<OutcomeLaw> laws;
    for (double mu : row) laws.push_back({NormalComponent{1.0, mu, sd}});
    out.push_back(laws);
  }
  return out;
}

}  // namespace detail

// Binary instrument and treatment, three covariate cells coded by two dummies.
// Complier share 0.5; among compliers Y(1) is Y(0) shifted by exactly 1.
inline DgpSpec dgp_late3() {
  DgpSpec s;
  s.model = preset_late3();
  const std::vector<std::vector<double>> xs = {{0, 0}, {1, 0}, {0, 1}};
  const std::vector<double> mass = {0.4, 0.3, 0.3};
  const std::vector<std::vector<double>> tp = {{0.25, 0.5, 0.25}, {0.2, 0.55, 0.25}, {0.3, 0.45, 0.25}};
  const std::vector<double> p1 = {0.5, 0.4, 0.6};
  const double base[3] = {-0.5, 0.0, 0.8};
  const double effect[3] = {0.3, 1.0, 0.6};
  for (int c = 0; c < 3; ++c) {
    s.cells.push_back({xs[c], mass[c], tp[c], {1.0 - p1[c], p1[c]}, 0.0});
    std::vector<std::vector<double>> means(3, std::vector<double>(2));
    for (int i = 0; i < 3; ++i)
      for (int t = 0; t < 2; ++t) means[i][t] = base[i] + 0.5 * xs[c][0] - 0.3 * xs[c][1] + t * effect[i];
    s.outcomes.push_back(detail::gaussian_laws(means, 1.0));
  }
  s.seed = 11;
  return s;
}

// Relocation/mediator design satisfying EIMC by construction: within a cell,
// Y(0,0) has the same law for CN and CC, and Y(1,1) the same law for CC and CA.
// Survey weights depend on the cell, so targets are weighted-population values.
inline DgpSpec dgp_mto_eimc() {
  DgpSpec s;
  s.model = preset_mto7();
  const std::vector<std::vector<double>> xs = {{0, 0}, {1, 0}, {0, 1}};
  const std::vector<double> mass = {0.4, 0.3, 0.3};
  // NN NA CN CC CA AN AA
  const std::vector<double> base = {0.15, 0.10, 0.20, 0.25, 0.20, 0.05, 0.05};
  std::vector<std::vector<double>> tp(3, base);
  tp[1][2] += 0.03;
  tp[1][0] -= 0.03;
  tp[2][4] += 0.03;
  tp[2][1] -= 0.03;
  const std::vector<double> p1 = {0.5, 0.45, 0.55};
  const std::vector<double> lw = {0.0, 0.2, -0.2};
  // Means per type (rows) and treatment 00, 01, 10, 11 (columns).
  const std::vector<std::vector<double>> mu = {{0.0, 0.3, 0.5, 0.8},  {0.1, 0.4, 0.6, 0.9},  {0.2, 0.35, 0.7, 1.0},
                                               {0.2, 0.45, 0.6, 1.1}, {0.3, 0.5, 0.8, 1.1},  {0.1, 0.3, 0.9, 1.0},
                                               {0.4, 0.6, 1.0, 1.3}};
  for (int c = 0; c < 3; ++c) {
    s.cells.push_back({xs[c], mass[c], tp[c], {1.0 - p1[c], p1[c]}, lw[c]});
    std::vector<std::vector<double>> means = mu;
    for (auto& row : means)
      for (double& v : row) v += 0.4 * xs[c][0] + 0.2 * xs[c][1];
    s.outcomes.push_back(detail::gaussian_laws(means, 1.0));
  }
  s.survey_weights = true;
  s.weight_sigma = 0.3;
  s.seed = 12;
  return s;
}

inline std::map<std::string, DgpSpec> preset_dgps() { return {{"late3", dgp_late3()}, {"mto_eimc", dgp_mto_eimc()}}; }

inline DgpSpec preset_dgp(const std::string& name) {
  auto all = preset_dgps();
  auto it = all.find(name);
  if (it == all.end()) throw ValidationError("unknown simulation preset '" + name + "'");
  return it->second;
}

// Continuous-pair design: C ~ Bernoulli(p_c), W ~ U[w_lo, w_hi], K1 ~ U[w_lo, w_hi],
// K0 = w_lo + (K1 - w_lo) V with V ~ U[0,1] (so K1 >= K0), T = 1{K_C > W}.
struct ContinuousDgp {
  double p_c = 0.5;
  double w_lo = 0.0;
  double w_hi = 1.0;
  std::vector<std::vector<double>> cells = {{0.0}, {1.0}};
  std::vector<double> cell_mass = {0.5, 0.5};
  std::uint64_t seed = 21;

  double prob_k1_between(double a, double b) const { return (b - a) / (w_hi - w_lo); }
};

inline Dataset generate_continuous(const ContinuousDgp& g, int n, std::uint64_t seed) {
  Dataset data;
  const int m = g.cells.empty() ? 0 : static_cast<int>(g.cells.front().size());
  data.y.resize(n);
  data.t.resize(n);
  data.z.resize(n);
  data.w.resize(n);
  data.x.resize(n, m);
  data.omega = uniform_weights(n);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x7c0ffeeu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const int c = detail::draw_categorical(rng, g.cell_mass);
    for (int j = 0; j < m; ++j) data.x(i, j) = g.cells[c][j];
    const double k1 = g.w_lo + (g.w_hi - g.w_lo) * u(rng);
    const double k0 = g.w_lo + (k1 - g.w_lo) * u(rng);
    const int cc = u(rng) < g.p_c ? 1 : 0;
    const double w = g.w_lo + (g.w_hi - g.w_lo) * u(rng);
    const int t = (cc == 1 ? k1 : k0) > w ? 1 : 0;
    data.z(i) = cc;
    data.w(i) = w;
    data.t(i) = t;
    data.y(i) = t + nd(rng);
  }
  return data;
}

}  // namespace poforge
