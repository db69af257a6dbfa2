#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "poforge/continuous.hpp"
#include "poforge/derived.hpp"
#include "poforge/estimate.hpp"
#include "poforge/inference.hpp"
#include "poforge/pipeline.hpp"
#include "poforge/qte.hpp"
#include "poforge/simulate.hpp"

using namespace poforge;

namespace {

EstimateResult synthetic(const std::string& id, int n, std::uint64_t seed, double lambda) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Eigen::VectorXd s(n);
  for (int i = 0; i < n; ++i) s(i) = lambda + nd(rng);
  return finalize_scores(id, s, uniform_weights(n));
}

struct Late3Fit {
  SimulatedData sim;
  EstimateResult p;
};

const Late3Fit& late3_fit() {
  static const Late3Fit fit = [] {
    DgpSpec spec = dgp_late3();
    Late3Fit f{generate_data(spec, 2000, 51), {}};
    auto sol = solve_type_functional(spec.model, spec.model.indicator({"complier"}));
    f.p = estimate_type_functional(f.sim.data, spec.model, sol, BasisSpec::discrete(2, 2), EstimatorSettings{});
    f.p.id = "p";
    return f;
  }();
  return fit;
}

double column_sd(const Eigen::VectorXd& c) {
  const double m = c.mean();
  return std::sqrt((c.array() - m).square().sum() / (c.size() - 1));
}

}  // namespace

TEST(Bootstrap, UnitWeightsReproducePointEstimates) {
  const auto& f = late3_fit();
  EstimateResult q = synthetic("q", f.p.n, 3, -2.0);
  BootstrapDraws d = multiplier_bootstrap({&f.p, &q}, 50, WeightLaw::one, 1);
  for (int b = 0; b < 50; ++b) {
    EXPECT_EQ(d.draws(b, 0), f.p.lambda_hat);
    EXPECT_EQ(d.draws(b, 1), q.lambda_hat);
  }
}

TEST(Bootstrap, SeedDeterminismAcrossThreads) {
  const auto& f = late3_fit();
  BootstrapDraws a = multiplier_bootstrap({&f.p}, 300, WeightLaw::normal, 99, 1);
  BootstrapDraws b = multiplier_bootstrap({&f.p}, 300, WeightLaw::normal, 99, 8);
  EXPECT_EQ(a.draws, b.draws);
  BootstrapDraws c = multiplier_bootstrap({&f.p}, 300, WeightLaw::normal, 100, 1);
  EXPECT_NE(a.draws, c.draws);
}

TEST(Bootstrap, RegistryOrderDoesNotChangeMarginals) {
  const auto& f = late3_fit();
  EstimateResult q = synthetic("q", f.p.n, 4, 1.0);
  BootstrapDraws ab = multiplier_bootstrap({&f.p, &q}, 100, WeightLaw::rademacher, 7);
  BootstrapDraws ba = multiplier_bootstrap({&q, &f.p}, 100, WeightLaw::rademacher, 7);
  EXPECT_EQ(ab.draws.col(ab.column("p")), ba.draws.col(ba.column("p")));
  EXPECT_EQ(ab.draws.col(ab.column("q")), ba.draws.col(ba.column("q")));
  BootstrapDraws solo = multiplier_bootstrap({&q}, 100, WeightLaw::rademacher, 7);
  EXPECT_EQ(solo.draws.col(0), ab.draws.col(ab.column("q")));
}

TEST(Bootstrap, RejectsMismatchedSamples) {
  EstimateResult a = synthetic("a", 100, 1, 0.0), b = synthetic("b", 101, 2, 0.0);
  EXPECT_THROW(multiplier_bootstrap({&a, &b}, 10, WeightLaw::normal, 1), DimensionError);
  EXPECT_THROW(multiplier_bootstrap({&a}, 0, WeightLaw::normal, 1), ValidationError);
  EXPECT_THROW(weight_law_from_string("gaussian"), ValidationError);
}

TEST(Bootstrap, SpreadMatchesAnalyticSe) {
  const auto& f = late3_fit();
  for (WeightLaw law : {WeightLaw::normal, WeightLaw::rademacher}) {
    BootstrapDraws d = multiplier_bootstrap({&f.p}, 2000, law, 5, 4);
    EXPECT_NEAR(column_sd(d.draws.col(0)) / f.p.se, 1.0, 0.15) << to_string(law);
  }
}

TEST(Intervals, HandQuantiles) {
  EXPECT_DOUBLE_EQ(quantile_type7({4, 1, 3, 2}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile_type7({1, 2, 3, 4, 5}, 0.95), 4.8);
  Eigen::VectorXd alt(100);
  for (int b = 0; b < 100; ++b) alt(b) = 3.0 + (b % 2 ? 1.0 : -1.0);
  Interval ci = bootstrap_ci(alt, 3.0, 0.95);
  EXPECT_DOUBLE_EQ(ci.halfwidth, 1.0);
  EXPECT_DOUBLE_EQ(ci.lo, 2.0);
  EXPECT_TRUE(ci.warnings.empty());
  Interval flat = bootstrap_ci(Eigen::VectorXd::Constant(50, 0.3), 0.3, 0.9);
  EXPECT_EQ(flat.halfwidth, 0.0);
  EXPECT_FALSE(bootstrap_ci(alt.head(10), 3.0, 0.95).warnings.empty());
  EXPECT_THROW(bootstrap_ci(alt, 3.0, 1.0), ValidationError);
}

TEST(Intervals, HalfwidthNondecreasingInLevel) {
  const auto& f = late3_fit();
  BootstrapDraws d = multiplier_bootstrap({&f.p}, 400, WeightLaw::normal, 11);
  double last = 0.0;
  for (double level = 0.05; level < 1.0; level += 0.05) {
    double h = bootstrap_ci(d, "p", level).halfwidth;
    EXPECT_GE(h, last);
    last = h;
  }
}

TEST(Delta, IdentityReducesToBootstrapCi) {
  const auto& f = late3_fit();
  BootstrapDraws d = multiplier_bootstrap({&f.p}, 500, WeightLaw::normal, 12);
  DeltaResult r = delta_method(Combination::of("p"), d, 0.95, 0.005);
  Interval ci = bootstrap_ci(d, "p", 0.95);
  EXPECT_EQ(r.point, f.p.lambda_hat);
  EXPECT_EQ(r.ci.halfwidth, ci.halfwidth);
}

TEST(Delta, RatioWithConstantNumerator) {
  BootstrapDraws d;
  d.B = 200;
  d.ids = {"num", "den"};
  d.lambda_hat.resize(2);
  d.lambda_hat << 3.0, 0.5;
  d.draws.resize(200, 2);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.4, 0.6);
  std::vector<double> dev(200);
  for (int b = 0; b < 200; ++b) {
    d.draws(b, 0) = 3.0;
    d.draws(b, 1) = u(rng);
    dev[b] = std::abs(1.0 / d.draws(b, 1) - 2.0);
  }
  DeltaResult r = delta_method(Combination::ratio(Combination::of("num"), Combination::of("den")), d, 0.9, 0.005);
  EXPECT_DOUBLE_EQ(r.point, 6.0);
  EXPECT_NEAR(r.ci.halfwidth, 3.0 * quantile_type7(dev, 0.9), 1e-12);
  d.lambda_hat(1) = 0.001;
  EXPECT_THROW(delta_method(Combination::ratio(Combination::of("num"), Combination::of("den")), d, 0.9, 0.005),
               NumericalError);
  EXPECT_THROW(delta_method(Combination::of("other"), d, 0.9, 0.005), ValidationError);
}

TEST(Derived, RatioLinearization) {
  EstimateResult a = synthetic("a", 500, 21, 0.3), b = synthetic("b", 500, 22, 0.6);
  DerivedEstimate r = derive(Combination::ratio(Combination::of("a"), Combination::of("b")), {&a, &b}, 0.005, "r");
  EXPECT_DOUBLE_EQ(r.point, a.lambda_hat / b.lambda_hat);
  Eigen::VectorXd expect = (a.psi - r.point * b.psi) / b.lambda_hat;
  EXPECT_LT((r.psi - expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(r.se, analytic_se(expect, a.v), 1e-14);
}

// Implied LATE from the published type probabilities and effect estimates.
TEST(Derived, PublishedImpliedLate) {
  const double p_cn = 0.194, p_cc = 0.065, p_ca = 0.203;
  struct Row { double cde0, cde1, cte, implied; };
  const Row rows[] = {{0.024, 0.048, 0.059, 0.039},
                      {0.127, -0.003, 0.132, 0.070},
                      {-0.042, -0.074, -0.412, -0.106},
                      {0.498, 2.928, 2.479, 1.840}};
  for (const Row& r : rows) {
    EXPECT_NEAR(implied_late(p_cn, p_ca, p_cc, r.cde0, r.cde1, r.cte), r.implied, 0.005);
    const double hand = (p_cn * r.cde0 + p_ca * r.cde1 + p_cc * r.cte) / (p_cn + p_ca + p_cc);
    EXPECT_NEAR(implied_late(p_cn, p_ca, p_cc, r.cde0, r.cde1, r.cte), hand, 1e-15);
  }
  EXPECT_THROW(implied_late(0.001, p_ca, p_cc, 0, 0, 0), NumericalError);
}

TEST(Derived, MediationEffectsFromComponents) {
  const int n = 400;
  auto comp = [&](const char* id, double value, std::uint64_t seed) { return synthetic(id, n, seed, value); };
  MediationComponents c;
  c.p_cn = comp("p_cn", 0.2, 1);
  c.p_ca = comp("p_ca", 0.25, 2);
  c.p_cc = comp("p_cc", 0.1, 3);
  c.y10_cn = comp("", 0.5, 4);
  c.y00_cn = comp("", 0.3, 5);
  c.y11_ca = comp("", 0.9, 6);
  c.y01_ca = comp("", 0.4, 7);
  c.y11_ccca = comp("", 1.2, 8);
  c.y00_cncc = comp("", 0.35, 9);
  MediationEffects e = derived_mediation_effects(c);
  const double pcn = c.p_cn.lambda_hat, pca = c.p_ca.lambda_hat, pcc = c.p_cc.lambda_hat;
  const double y10 = c.y10_cn.lambda_hat, y00 = c.y00_cn.lambda_hat, y11 = c.y11_ca.lambda_hat, y01 = c.y01_ca.lambda_hat;
  const double y11cc = c.y11_ccca.lambda_hat - y11, y00cc = c.y00_cncc.lambda_hat - y00;
  EXPECT_NEAR(e.cde0.point, (y10 - y00) / pcn, 1e-14);
  EXPECT_NEAR(e.cde1.point, (y11 - y01) / pca, 1e-14);
  EXPECT_NEAR(e.cte.point, (y11cc - y00cc) / pcc, 1e-13);
  EXPECT_NEAR(e.implied_late.point, implied_late(pcn, pca, pcc, e.cde0.point, e.cde1.point, e.cte.point), 1e-13);
  EXPECT_NEAR(e.late.point, e.implied_late.point, 1e-13);
  for (const auto* d : {&e.cde0, &e.cde1, &e.cte, &e.late}) EXPECT_GT(d->se, 0.0);
}

TEST(Derived, ZeroOutcomeComponentsGiveZeroEffects) {
  MediationComponents c;
  const int n = 50;
  auto zero = [&] { return finalize_scores("", Eigen::VectorXd::Zero(n), uniform_weights(n)); };
  c.y10_cn = c.y00_cn = c.y11_ca = c.y01_ca = c.y11_ccca = c.y00_cncc = zero();
  c.p_cn = finalize_scores("", Eigen::VectorXd::Constant(n, 0.2), uniform_weights(n));
  c.p_ca = c.p_cc = c.p_cn;
  MediationEffects e = derived_mediation_effects(c);
  EXPECT_EQ(e.cde0.point, 0.0);
  EXPECT_EQ(e.cde1.point, 0.0);
  EXPECT_EQ(e.cte.point, 0.0);
  EXPECT_EQ(e.late.point, 0.0);
}

TEST(Qte, MonotonizationAndInverse) {
  Eigen::VectorXd raw(6);
  raw << -0.1, 0.3, 0.2, 0.7, 0.65, 1.2;
  Eigen::VectorXd m = monotonize_cdf(raw);
  Eigen::VectorXd expect(6);
  expect << 0.0, 0.3, 0.3, 0.7, 0.7, 1.0;
  EXPECT_EQ(m, expect);
  EXPECT_EQ(monotonize_cdf(m), m);
  std::vector<double> grid = {0, 1, 2, 3, 4, 5};
  EXPECT_EQ(generalized_inverse(grid, m, 0.3), 1.0);
  EXPECT_EQ(generalized_inverse(grid, m, 0.31), 3.0);
  bool clipped = false;
  Eigen::VectorXd low = Eigen::VectorXd::Constant(6, 0.4);
  EXPECT_EQ(generalized_inverse(grid, low, 0.5, &clipped), 5.0);
  EXPECT_TRUE(clipped);
  EXPECT_THROW(check_qte_grids({0, 0, 1}, {0.5}), ValidationError);
  EXPECT_THROW(check_qte_grids({0, 1}, {1.0}), ValidationError);
}

// Arms fed with exact oracle moments: the estimated quantiles are the oracle
// quantiles rounded up to the grid.
TEST(Qte, OracleArmsRecoverOracleQuantiles) {
  DgpSpec spec = dgp_late3();
  auto group = spec.model.indicator({"complier"});
  FunctionalSpec pg;
  pg.ell = group;
  auto arm = [&](const std::string& t) {
    QteArm a;
    a.group.lambda_hat = oracle_value(spec, pg);
    a.outcome = [&spec, group, t](const Rho& rho) {
      FunctionalSpec f;
      f.kind = FunctionalKind::outcome;
      f.treatment = t;
      f.ell = group;
      f.rho = rho;
      EstimateResult r;
      r.lambda_hat = oracle_value(spec, f);
      return r;
    };
    return a;
  };
  std::vector<double> grid;
  for (int k = 0; k <= 600; ++k) grid.push_back(-3.0 + 0.01 * k);
  const std::vector<double> taus = {0.25, 0.5, 0.75};
  QteResult r = estimate_qte(arm("1"), arm("0"), grid, taus, 0.005);
  for (std::size_t k = 0; k < taus.size(); ++k) {
    const double q1 = oracle_quantile(spec, "1", group, taus[k]);
    const double q0 = oracle_quantile(spec, "0", group, taus[k]);
    EXPECT_GE(r.q1[k], q1 - 1e-9);
    EXPECT_LT(r.q1[k], q1 + 0.01 + 1e-9);
    EXPECT_GE(r.q0[k], q0 - 1e-9);
    EXPECT_LT(r.q0[k], q0 + 0.01 + 1e-9);
  }
  QteResult same = estimate_qte(arm("1"), arm("1"), grid, taus, 0.005);
  for (double v : same.qte) EXPECT_EQ(v, 0.0);
}

TEST(Qte, EstimatedOnSimulatedData) {
  DgpSpec spec = dgp_late3();
  SimulatedData sim = generate_data(spec, 4000, 52);
  EstimationPlan plan;
  QteSpec q;
  q.id = "qte";
  q.treated = "1";
  q.control = "0";
  q.group = spec.model.indicator({"complier"});
  for (int k = 0; k <= 60; ++k) q.ygrid.push_back(-2.5 + 0.1 * k);
  q.taus = {0.5};
  plan.qte.push_back(q);
  plan.bootstrap.B = 199;
  PlanResult res = run_plan(sim.data, spec.model, plan);
  const auto& e = res.find("qte@0.5");
  const double truth = oracle_quantile(spec, "1", q.group, 0.5) - oracle_quantile(spec, "0", q.group, 0.5);
  ASSERT_TRUE(e.ci.has_value());
  EXPECT_LT(std::abs(e.point - truth), 3.0 * e.se + 0.1);
  EXPECT_GT(e.se, 0.0);
}

TEST(Continuous, KernelAndQuadrature) {
  auto [x, w] = gauss_legendre(16);
  double s = 0.0, s30 = 0.0;
  for (int k = 0; k < 16; ++k) {
    s += w[k];
    s30 += w[k] * std::pow(x[k], 30);
  }
  EXPECT_NEAR(s, 2.0, 1e-14);
  EXPECT_NEAR(s30, 2.0 / 31.0, 1e-14);
  double pdf = 0.0, m2 = 0.0;
  for (int k = 0; k < 16; ++k) {
    pdf += w[k] * biweight_pdf(x[k]);
    m2 += w[k] * x[k] * x[k] * biweight_pdf(x[k]);
  }
  EXPECT_NEAR(pdf, 1.0, 1e-14);
  EXPECT_NEAR(m2, 1.0 / 7.0, 1e-14);
  EXPECT_EQ(biweight_pdf(1.2), 0.0);
  EXPECT_NEAR(biweight_cdf(0.0), 0.5, 1e-15);
  EXPECT_EQ(biweight_cdf(1.0), 1.0);
  EXPECT_EQ(biweight_cdf(-1.0), 0.0);
}

// Against u^3 the smoothed target is (a^3 - b^3) + 3 mu2 h^2 (a - b).
TEST(Continuous, SmoothedTargetIsSecondOrder) {
  const double a = 0.3, b = 0.7, mu2 = 1.0 / 7.0;
  BasisSpec basis = BasisSpec::continuous(1, 3, 0.0, 1.0);
  Eigen::MatrixXd x(1, 1);
  x << 0.4;
  const int o = basis.block();
  std::vector<double> hs = {0.2, 0.1, 0.05, 0.025}, err;
  for (double h : hs) {
    Eigen::MatrixXd m = continuous_moment_target(a, b, h, basis, 1, x);
    EXPECT_NEAR(m(0, o + 3), a * a * a - b * b * b + 3 * mu2 * h * h * (a - b), 1e-14);
    EXPECT_NEAR(m(0, o), 0.0, 1e-14);
    EXPECT_NEAR(m(0, o + 1), a - b, 1e-14);
    EXPECT_EQ(m.leftCols(o).norm(), 0.0);
    err.push_back(std::abs(m(0, o + 3) - (a * a * a - b * b * b)));
  }
  const double slope = std::log(err.front() / err.back()) / std::log(hs.front() / hs.back());
  EXPECT_NEAR(slope, 2.0, 0.2);
  EXPECT_THROW(continuous_moment_target(0.0, b, 0.1, basis, 1, x), ValidationError);
  EXPECT_THROW(continuous_moment_target(a, b, 0.1, BasisSpec::discrete(2, 1), 1, x), ValidationError);
}

TEST(Continuous, SmoothFunctionalTarget) {
  // l(w) = w (1 - w): against u the target is int (1 - 2w) w dw = -1/6.
  BasisSpec basis = BasisSpec::continuous(1, 3, 0.0, 1.0);
  Eigen::MatrixXd x(2, 1);
  x << 0.0, 1.0;
  Eigen::MatrixXd m = continuous_moment_target([](double w) { return 1.0 - 2.0 * w; }, basis, 0, x);
  EXPECT_NEAR(m(0, 1), -1.0 / 6.0, 1e-14);
  EXPECT_NEAR(m(1, 0), 0.0, 1e-14);
  EXPECT_NEAR(m(1, 4), 0.0, 1e-14);
}

TEST(Continuous, ThresholdShareOnSimulatedData) {
  ContinuousDgp g;
  ModelSpec m;
  m.name = "cpair";
  m.treatments.labels = {"0", "1"};
  m.instruments.values = {"0", "1"};
  m.instruments.mode = InstrumentMode::continuous_pair;
  m.instruments.w_lo = 0.0;
  m.instruments.w_hi = 1.0;
  EstimationPlan plan;
  ContinuousTarget t;
  t.id = "k1";
  plan.continuous.push_back(t);
  Dataset d = generate_continuous(g, 5000, 53);
  PlanResult res = run_plan(d, m, plan);
  const auto& e = res.find("k1");
  EXPECT_LT(std::abs(e.point - g.prob_k1_between(0.25, 0.75)), 3.0 * e.se);
  EXPECT_EQ(e.route, "continuous");
}
