#include <chrono>
#include <random>

#include <gtest/gtest.h>

#include "poforge/identify.hpp"
#include "poforge/io.hpp"
#include "poforge/model.hpp"
#include "poforge/simulate.hpp"

using namespace poforge;

namespace {

// Pseudo-inverse through a complete orthogonal decomposition; the library
// solver uses an SVD.
Eigen::VectorXd pinv_solve(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(a);
  cod.setThreshold(1e-10);
  return cod.solve(b);
}

int lu_rank(const Eigen::MatrixXd& a) {
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  lu.setThreshold(1e-10);
  return static_cast<int>(lu.rank());
}

ModelSpec full_binary_model() {
  return detail::make_model("full22", {"0", "1"}, {"0", "1"},
                            {{"nn", {"0", "0"}}, {"co", {"0", "1"}}, {"de", {"1", "0"}}, {"aa", {"1", "1"}}}, {});
}

}  // namespace

TEST(Model, PresetsValidate) {
  for (const auto& [name, m] : preset_models()) EXPECT_TRUE(validate_model(m).empty()) << name;
  EXPECT_EQ(preset_model("mto7").r(), 7);
  EXPECT_EQ(preset_model("late3").r(), 3);
  EXPECT_EQ(preset_model("headstart5").r(), 5);
}

TEST(Model, Mto7TypeTable) {
  const ModelSpec m = preset_model("mto7");
  const std::vector<std::pair<std::string, std::vector<std::string>>> expect = {
      {"NN", {"00", "00"}}, {"NA", {"01", "01"}}, {"CN", {"00", "10"}}, {"CC", {"00", "11"}},
      {"CA", {"01", "11"}}, {"AN", {"10", "10"}}, {"AA", {"11", "11"}}};
  ASSERT_EQ(m.r(), 7);
  for (int i = 0; i < 7; ++i) {
    EXPECT_EQ(m.support.types[i].name, expect[i].first);
    EXPECT_EQ(m.support.types[i].assignment, expect[i].second);
  }
}

TEST(Model, Late3ExcludesDefiers) {
  const ModelSpec m = preset_model("late3");
  for (const auto& t : m.support.types) EXPECT_FALSE(t.assignment[0] == "1" && t.assignment[1] == "0") << t.name;
}

TEST(Model, DiagnosticsForUnknownLabelAndBadMeasure) {
  ModelSpec m = preset_model("late3");
  m.support.types[1].assignment[1] = "2";
  EXPECT_EQ(validate_model(m).size(), 1u);
  ModelSpec b = preset_model("late3");
  b.mu.mu = {0.45, 0.45};
  EXPECT_EQ(validate_model(b).size(), 1u);
}

TEST(Model, ResponseMatrixLate3) {
  Eigen::MatrixXd om = response_matrix_types(preset_model("late3"));
  Eigen::MatrixXd expect(3, 4);
  expect << 1, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 1;
  EXPECT_EQ(om, expect);
}

TEST(Model, ResponseMatrixShapesAndRowSums) {
  for (const auto& [name, m] : preset_models()) {
    Eigen::MatrixXd om = response_matrix_types(m);
    EXPECT_EQ(om.rows(), m.r());
    EXPECT_EQ(om.cols(), m.q() * m.d());
    for (int i = 0; i < om.rows(); ++i) EXPECT_EQ(om.row(i).sum(), m.q()) << name;
    // Column subselection equals the outcome matrix.
    for (int t = 0; t < m.d(); ++t) {
      Eigen::MatrixXd ot = response_matrix_outcome(m, m.treatments.labels[t]);
      for (int j = 0; j < m.q(); ++j) EXPECT_EQ(ot.col(j), om.col(j * m.d() + t)) << name;
    }
  }
  EXPECT_EQ(lu_rank(response_matrix_types(preset_model("mto7"))), 7);
  EXPECT_EQ(response_matrix_types(preset_model("headstart5")).rows(), 5);
  EXPECT_EQ(response_matrix_types(preset_model("headstart5")).cols(), 6);
}

TEST(Model, OutcomeMatrixMto00) {
  Eigen::MatrixXd ot = response_matrix_outcome(preset_model("mto7"), "00");
  Eigen::VectorXd z0(7), z1(7);
  z0 << 1, 0, 1, 1, 0, 0, 0;
  z1 << 1, 0, 0, 0, 0, 0, 0;
  EXPECT_EQ(ot.col(0), z0);
  EXPECT_EQ(ot.col(1), z1);
}

TEST(Model, OutcomeMatrixUnusedTreatmentIsZero) {
  ModelSpec m = preset_model("late3");
  m.treatments.labels.push_back("2");
  EXPECT_TRUE(response_matrix_outcome(m, "2").isZero());
}

TEST(Model, PresetRoundTripIsExact) {
  for (const auto& [name, m] : preset_models()) {
    ModelSpec back = model_from_json(parse_json_text(dump_json(model_to_json(m)), name));
    EXPECT_EQ(back.name, m.name);
    EXPECT_EQ(back.treatments.labels, m.treatments.labels);
    EXPECT_EQ(back.instruments.values, m.instruments.values);
    ASSERT_EQ(back.r(), m.r());
    for (int i = 0; i < m.r(); ++i) {
      EXPECT_EQ(back.support.types[i].name, m.support.types[i].name);
      EXPECT_EQ(back.support.types[i].assignment, m.support.types[i].assignment);
    }
    EXPECT_EQ(back.support.masses, m.support.masses);
  }
}

TEST(Identify, MtoTypeIndicatorsIdentified) {
  const ModelSpec m = preset_model("mto7");
  for (const auto& t : m.support.types) {
    auto sol = solve_type_functional(m, m.indicator({t.name}));
    EXPECT_TRUE(sol.identified) << t.name;
    EXPECT_LT(sol.residual, 1e-8) << t.name;
  }
}

TEST(Identify, HeadStartTypeIndicatorsIdentified) {
  const ModelSpec m = preset_model("headstart5");
  for (const auto& t : m.support.types) EXPECT_TRUE(solve_type_functional(m, m.indicator({t.name})).identified) << t.name;
}

TEST(Identify, ConstantOneWitness) {
  for (const auto& [name, m] : preset_models()) {
    auto sol = solve_type_functional(m, std::vector<double>(m.r(), 1.0));
    ASSERT_TRUE(sol.identified) << name;
    // The block-1 witness is feasible: every row of Omega has one 1 per block.
    Eigen::VectorXd w = Eigen::VectorXd::Zero(m.q() * m.d());
    w.head(m.d()).setOnes();
    EXPECT_TRUE((response_matrix_types(m) * w - Eigen::VectorXd::Ones(m.r())).isZero(1e-14)) << name;
  }
}

TEST(Identify, MtoCnOutcomeNotIdentified) {
  const ModelSpec m = preset_model("mto7");
  auto sol = solve_outcome_functional(m, "00", m.indicator({"CN"}));
  EXPECT_FALSE(sol.identified);
  EXPECT_GT(sol.residual, 1e-8);
  // Representable functions: span of (NN+CN+CC) and (NN); CN alone has residual 1/sqrt 2.
  EXPECT_NEAR(sol.residual, std::sqrt(0.5), 1e-12);
}

TEST(Identify, MtoCnCcOutcomeIdentified) {
  const ModelSpec m = preset_model("mto7");
  auto sol = solve_outcome_functional(m, "00", m.indicator({"CN", "CC"}));
  ASSERT_TRUE(sol.identified);
  EXPECT_NEAR(sol.s(0), 1.0, 1e-12);
  EXPECT_NEAR(sol.s(1), -1.0, 1e-12);
  Eigen::VectorXd expect(7);
  expect << 0, 0, 1, 1, 0, 0, 0;
  EXPECT_TRUE((response_matrix_outcome(m, "00") * sol.s - expect).isZero(1e-12));
}

TEST(Identify, ZeroFunctional) {
  const ModelSpec m = preset_model("mto7");
  auto sol = solve_type_functional(m, std::vector<double>(7, 0.0));
  EXPECT_TRUE(sol.identified);
  EXPECT_TRUE(sol.s.isZero());
}

TEST(Identify, MinNormMatchesIndependentPseudoInverse) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  for (const auto& [name, m] : preset_models()) {
    Eigen::MatrixXd om = response_matrix_types(m);
    for (int rep = 0; rep < 10; ++rep) {
      Eigen::VectorXd ell(m.r());
      for (int i = 0; i < m.r(); ++i) ell(i) = nd(rng);
      auto sol = solve_type_functional(m, std::vector<double>(ell.data(), ell.data() + ell.size()));
      // The library solves Omega s = ell; the oracle works on the same system.
      Eigen::VectorXd s = pinv_solve(om, ell);
      EXPECT_TRUE((sol.s - s).isZero(1e-10)) << name;
    }
  }
}

TEST(Identify, MinimumNormAgainstNullPerturbations) {
  const ModelSpec m = preset_model("mto7");
  Eigen::MatrixXd om = response_matrix_types(m);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(om);
  Eigen::MatrixXd ker = lu.kernel();
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  for (const auto& t : m.support.types) {
    auto sol = solve_type_functional(m, m.indicator({t.name}));
    for (int rep = 0; rep < 50; ++rep) {
      Eigen::VectorXd c(ker.cols());
      for (int k = 0; k < c.size(); ++k) c(k) = nd(rng);
      Eigen::VectorXd alt = sol.s + ker * c;
      EXPECT_TRUE((om * alt - om * sol.s).isZero(1e-10));
      EXPECT_LE(sol.s.norm(), alt.norm() + 1e-12);
    }
  }
}

TEST(Identify, Linearity) {
  const ModelSpec m = preset_model("headstart5");
  auto a = solve_type_functional(m, m.indicator({"nh"}));
  auto b = solve_type_functional(m, m.indicator({"cc"}));
  std::vector<double> comb(m.r());
  for (int i = 0; i < m.r(); ++i) comb[i] = 2.0 * m.indicator({"nh"})[i] - 3.0 * m.indicator({"cc"})[i];
  auto c = solve_type_functional(m, comb);
  EXPECT_TRUE((c.s - (2.0 * a.s - 3.0 * b.s)).isZero(1e-10));
}

TEST(Identify, OutcomeIdentificationImpliesTypeIdentification) {
  for (const auto& [name, m] : preset_models()) {
    const int r = m.r();
    for (int mask = 1; mask < (1 << r); ++mask) {
      std::vector<double> ell(r);
      for (int i = 0; i < r; ++i) ell[i] = (mask >> i) & 1;
      const bool type_ok = solve_type_functional(m, ell).identified;
      for (const auto& t : m.treatments.labels) {
        if (solve_outcome_functional(m, t, ell).identified) {
          EXPECT_TRUE(type_ok) << name << " mask " << mask;
        }
      }
    }
  }
}

TEST(Identify, KappaWeights) {
  const ModelSpec m = preset_model("late3");
  auto sol = solve_type_functional(m, m.indicator({"complier"}));
  Eigen::VectorXd pz(2);
  pz << 0.5, 0.5;
  Eigen::MatrixXd k = kappa_weights(sol, pz);
  for (int t = 0; t < 2; ++t)
    for (int j = 0; j < 2; ++j) EXPECT_DOUBLE_EQ(k(t, j), 2.0 * sol.at(j, t));
  // Abadie pattern: kappa(1,1) - kappa(1,0) direction.
  EXPECT_GT(k(1, 1), k(1, 0));
  auto zero = solve_type_functional(m, std::vector<double>(3, 0.0));
  EXPECT_TRUE(kappa_weights(zero, pz).isZero());
}

TEST(Identify, KappaExpectationOnEnumeratedPopulation) {
  const ModelSpec m = preset_model("mto7");
  auto sol = solve_type_functional(m, m.indicator({"CC"}));
  Eigen::VectorXd pz(2);
  pz << 0.5, 0.5;
  Eigen::MatrixXd k = kappa_weights(sol, pz);
  Eigen::MatrixXi a = m.assignment_indices();
  double e = 0.0;
  for (int i = 0; i < m.r(); ++i)
    for (int j = 0; j < 2; ++j) e += m.support.masses[i] * pz(j) * k(a(i, j), j);
  EXPECT_NEAR(e, m.support.masses[m.type_index("CC")], 1e-12);
}

TEST(Identify, MomentTargetMatchesIndependentLoop) {
  const ModelSpec m = preset_model("mto7");
  auto sol = solve_type_functional(m, m.indicator({"NN"}));
  BasisSpec basis = BasisSpec::discrete(2, 2);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 3; ++rep) {
    Eigen::VectorXd x(2);
    x << nd(rng), nd(rng);
    Eigen::MatrixXd mt = moment_target(sol, basis, x);
    for (int t = 0; t < m.d(); ++t) {
      Eigen::VectorXd ref = Eigen::VectorXd::Zero(basis.dim());
      for (int j = 0; j < 2; ++j) {
        ref(j * 3) += sol.at(j, t);
        ref(j * 3 + 1) += sol.at(j, t) * x(0);
        ref(j * 3 + 2) += sol.at(j, t) * x(1);
      }
      EXPECT_TRUE((mt.col(t) - ref).isZero(1e-14));
    }
  }
  auto zero = solve_type_functional(m, std::vector<double>(7, 0.0));
  EXPECT_TRUE(moment_target(zero, basis, Eigen::VectorXd::Zero(2)).isZero());
}

TEST(Identify, MomentTargetSingleCell) {
  IdentificationSolution sol;
  sol.kind = FunctionalKind::outcome;
  sol.q = 1;
  sol.d = 1;
  sol.s = Eigen::VectorXd::Ones(1);
  sol.identified = true;
  BasisSpec basis = BasisSpec::discrete(1, 0);
  Eigen::MatrixXd mt = moment_target(sol, basis, Eigen::VectorXd::Zero(0));
  ASSERT_EQ(mt.size(), 1);
  EXPECT_EQ(mt(0, 0), 1.0);
}

TEST(Efficiency, HeadStartPasses) {
  const ModelSpec m = preset_model("headstart5");
  for (bool ok : check_rank_condition(m)) EXPECT_TRUE(ok);
  EXPECT_TRUE(check_nullspace_condition(m));
}

TEST(Efficiency, RankConditionMatchesLuRank) {
  for (const auto& [name, m] : preset_models()) {
    auto ranks = check_rank_condition(m);
    for (int t = 0; t < m.d(); ++t)
      EXPECT_EQ(ranks[t], lu_rank(response_matrix_outcome(m, m.treatments.labels[t])) == m.q()) << name;
  }
  // Golden verdicts for the relocation/mediator model.
  const std::vector<bool> mto = {true, true, true, true};
  EXPECT_EQ(check_rank_condition(preset_model("mto7")), mto);
}

TEST(Efficiency, NeverInducedTreatmentFailsRank) {
  ModelSpec m = preset_model("late3");
  m.treatments.labels.push_back("2");
  auto ranks = check_rank_condition(m);
  EXPECT_FALSE(ranks[2]);
}

namespace {

// Brute force: every kernel vector of Omega must lie in the span of the q
// block-constant vectors.
bool nullspace_oracle(const ModelSpec& m) {
  Eigen::MatrixXd om = response_matrix_types(m);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(om);
  lu.setThreshold(1e-10);
  Eigen::MatrixXd ker = lu.kernel();
  if (lu.rank() == om.cols()) return true;
  const int d = m.d(), q = m.q();
  Eigen::MatrixXd blocks = Eigen::MatrixXd::Zero(d * q, q);
  for (int j = 0; j < q; ++j) blocks.block(j * d, j, d, 1).setOnes();
  for (int k = 0; k < ker.cols(); ++k) {
    Eigen::VectorXd c = blocks.colPivHouseholderQr().solve(ker.col(k));
    if ((blocks * c - ker.col(k)).norm() > 1e-9) return false;
  }
  return true;
}

}  // namespace

TEST(Efficiency, NullspaceAgainstBruteForce) {
  for (const auto& [name, m] : preset_models()) EXPECT_EQ(check_nullspace_condition(m), nullspace_oracle(m)) << name;
  const ModelSpec full = full_binary_model();
  EXPECT_TRUE(nullspace_oracle(full));
  EXPECT_EQ(check_nullspace_condition(full), nullspace_oracle(full));
  const ModelSpec single = detail::make_model("one", {"0", "1"}, {"0", "1"}, {{"co", {"0", "1"}}}, {});
  EXPECT_FALSE(nullspace_oracle(single));
  EXPECT_FALSE(check_nullspace_condition(single));
}

TEST(Report, MtoCdeComponents) {
  const ModelSpec m = preset_model("mto7");
  FunctionalSpec cn;
  cn.id = "y00_cn";
  cn.kind = FunctionalKind::outcome;
  cn.treatment = "00";
  cn.ell = m.indicator({"CN"});
  FunctionalSpec y10 = cn;
  y10.id = "y10_cn";
  y10.treatment = "10";
  auto rep = identification_report(m, {cn, y10});
  ASSERT_EQ(rep.functionals.size(), 2u);
  EXPECT_FALSE(rep.functionals[0].identified);
  EXPECT_TRUE(rep.functionals[1].identified);
  cn.assume = Assumption::eimc;
  auto rep2 = identification_report(m, {cn});
  EXPECT_TRUE(rep2.functionals[0].identified);
  EXPECT_EQ(rep2.functionals[0].route, "mediation_cn");
}

TEST(Report, EmptyListAndFullPanel) {
  const ModelSpec m = preset_model("mto7");
  auto rep = identification_report(m, {});
  EXPECT_TRUE(rep.diagnostics.empty());
  EXPECT_TRUE(rep.functionals.empty());
  EXPECT_TRUE(rep.efficiency_checked);
  std::vector<FunctionalSpec> panel;
  for (const auto& t : m.support.types) {
    FunctionalSpec f;
    f.id = "p_" + t.name;
    f.ell = m.indicator({t.name});
    panel.push_back(f);
  }
  FunctionalSpec one;
  one.id = "one";
  one.ell.assign(7, 1.0);
  panel.push_back(one);
  for (const auto& v : identification_report(m, panel).functionals) EXPECT_TRUE(v.identified) << v.id;
}

TEST(Identify, RuntimeUnderOneSecond) {
  auto t0 = std::chrono::steady_clock::now();
  for (const char* name : {"mto7", "headstart5"}) {
    const ModelSpec m = preset_model(name);
    for (const auto& t : m.support.types) solve_type_functional(m, m.indicator({t.name}));
    check_rank_condition(m);
    check_nullspace_condition(m);
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 1.0);
}
