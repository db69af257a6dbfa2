#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/combination.hpp"
#include "poforge/crossfit.hpp"
#include "poforge/error.hpp"
#include "poforge/parallel.hpp"

namespace poforge {

// `one` is the degenerate W = 1 law used to test the centering identity.
enum class WeightLaw { normal, rademacher, one };

inline const char* to_string(WeightLaw l) {
  switch (l) {
    case WeightLaw::normal:
      return "normal";
    case WeightLaw::rademacher:
      return "rademacher";
    case WeightLaw::one:
      return "one";
  }
  return "?";
}

inline WeightLaw weight_law_from_string(const std::string& s) {
  if (s == "normal") return WeightLaw::normal;
  if (s == "rademacher") return WeightLaw::rademacher;
  if (s == "one") return WeightLaw::one;
  throw ValidationError("unknown bootstrap weight law '" + s + "'");
}

struct BootstrapDraws {
  Eigen::MatrixXd draws;  // B x G
  std::vector<std::string> ids;
  Eigen::VectorXd lambda_hat;
  WeightLaw law = WeightLaw::normal;
  std::uint64_t seed = 0;
  int B = 0;

  int column(const std::string& id) const {
    for (std::size_t g = 0; g < ids.size(); ++g)
      if (ids[g] == id) return static_cast<int>(g);
    throw ValidationError("functional '" + id + "' is not in the bootstrap registry");
  }
};

// Stream for replicate b; independent of evaluation order.
inline std::mt19937_64 replicate_rng(std::uint64_t seed, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32), 0x5eedu};
  return std::mt19937_64(seq);
}

inline void draw_weights(WeightLaw law, std::mt19937_64& rng, std::vector<double>& w) {
  switch (law) {
    case WeightLaw::normal: {
      std::normal_distribution<double> nd(0.0, 1.0);
      for (auto& v : w) v = nd(rng);
      break;
    }
    case WeightLaw::rademacher:
      for (auto& v : w) v = (rng() >> 63) ? 1.0 : -1.0;
      break;
    case WeightLaw::one:
      std::fill(w.begin(), w.end(), 1.0);
      break;
  }
}

// lambda*_g = lambda_g + sum_i v_i W_i psi_gi with one W draw per replicate
// shared by every registered functional. The in-sample sum of v psi (zero up
// to rounding) is subtracted, so W = 1 reproduces lambda_g bit for bit.
inline BootstrapDraws multiplier_bootstrap(const std::vector<const EstimateResult*>& registry, int B, WeightLaw law,
                                           std::uint64_t seed, int threads = 1) {
  if (B < 1) throw ValidationError("bootstrap needs B >= 1");
  if (registry.empty()) throw ValidationError("bootstrap registry is empty");
  const int n = registry.front()->n;
  const std::size_t G = registry.size();
  for (const auto* r : registry) {
    if (r->n != n || r->psi.size() != n) throw DimensionError("registered estimates have different sample sizes");
    if (r->v.size() != n) throw DimensionError("estimate '" + r->id + "' has no aggregation weights");
  }
  // a[g][i] = v_i psi_gi
  std::vector<std::vector<double>> a(G, std::vector<double>(n));
  std::vector<double> resid(G, 0.0);
  for (std::size_t g = 0; g < G; ++g) {
    for (int i = 0; i < n; ++i) a[g][i] = registry[g]->v(i) * registry[g]->psi(i);
    for (int i = 0; i < n; ++i) resid[g] += a[g][i];
  }

  BootstrapDraws out;
  out.B = B;
  out.law = law;
  out.seed = seed;
  out.draws.resize(B, static_cast<Eigen::Index>(G));
  out.lambda_hat.resize(static_cast<Eigen::Index>(G));
  for (std::size_t g = 0; g < G; ++g) {
    out.ids.push_back(registry[g]->id);
    out.lambda_hat(g) = registry[g]->lambda_hat;
  }
  parallel_for(static_cast<std::size_t>(B), threads, [&](std::size_t b) {
    std::mt19937_64 rng = replicate_rng(seed, b);
    std::vector<double> w(n);
    draw_weights(law, rng, w);
    for (std::size_t g = 0; g < G; ++g) {
      double s = 0.0;
      const double* ag = a[g].data();
      for (int i = 0; i < n; ++i) s += w[i] * ag[i];
      out.draws(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(g)) = out.lambda_hat(g) + (s - resid[g]);
    }
  });
  return out;
}

// Linear-interpolation sample quantile (type 7).
inline double quantile_type7(std::vector<double> v, double p) {
  if (v.empty()) throw ValidationError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double h = (v.size() - 1) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - lo) * (v[hi] - v[lo]);
}

struct Interval {
  double center = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double halfwidth = 0.0;
  std::vector<std::string> warnings;
};

inline Interval symmetric_interval(double center, const std::vector<double>& absdev, double level) {
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("confidence level must lie in (0,1)");
  Interval ci;
  ci.center = center;
  ci.halfwidth = quantile_type7(absdev, level);
  ci.lo = center - ci.halfwidth;
  ci.hi = center + ci.halfwidth;
  if (absdev.size() < 20) ci.warnings.push_back("bootstrap uses fewer than 20 replicates");
  return ci;
}

inline Interval bootstrap_ci(const Eigen::VectorXd& draws, double lambda_hat, double level) {
  std::vector<double> dev(draws.size());
  for (Eigen::Index b = 0; b < draws.size(); ++b) dev[b] = std::abs(draws(b) - lambda_hat);
  return symmetric_interval(lambda_hat, dev, level);
}

inline Interval bootstrap_ci(const BootstrapDraws& d, const std::string& id, double level) {
  const int g = d.column(id);
  return bootstrap_ci(d.draws.col(g), d.lambda_hat(g), level);
}

struct DeltaResult {
  double point = 0.0;
  Interval ci;
};

// F evaluated at the point estimates and at every replicate, all replicates
// sharing the registry's joint W draws.
inline DeltaResult delta_method(const Combination& f, const BootstrapDraws& d, double level, double p_min) {
  std::map<std::string, int> index;
  for (std::size_t g = 0; g < d.ids.size(); ++g) index[d.ids[g]] = static_cast<int>(g);
  auto lookup_at = [&](const Eigen::VectorXd& vals) {
    return [&, vals](const std::string& id) {
      auto it = index.find(id);
      if (it == index.end()) throw ValidationError("combination references '" + id + "' which is not in the bootstrap run");
      return vals(it->second);
    };
  };
  DeltaResult out;
  out.point = evaluate(f, lookup_at(d.lambda_hat), p_min);
  std::vector<double> dev(d.B);
  for (int b = 0; b < d.B; ++b) {
    Eigen::VectorXd row = d.draws.row(b).transpose();
    // The denominator floor guards the point estimate; replicate values only
    // need a nonzero denominator.
    dev[b] = std::abs(evaluate(f, lookup_at(row), 0.0) - out.point);
  }
  out.ci = symmetric_interval(out.point, dev, level);
  return out;
}

}  // namespace poforge
