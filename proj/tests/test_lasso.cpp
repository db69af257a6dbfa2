#include <algorithm>
#include <chrono>
#include <random>

#include <gtest/gtest.h>

#include "poforge/lasso.hpp"
#include "support.hpp"

using namespace poforge;
using poforge::testing::random_problem;

namespace {

double soft(double v, double a) { return v > a ? v - a : (v < -a ? v + a : 0.0); }

// Weighted-orthonormal design: X' diag(w) X = I.
Eigen::MatrixXd orthonormal_design(std::mt19937_64& rng, int n, int p, const Eigen::VectorXd& w) {
  std::normal_distribution<double> nd;
  Eigen::MatrixXd a(n, p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) a(i, j) = nd(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, p);
  return w.cwiseSqrt().cwiseInverse().asDiagonal() * q;
}

// Stationarity check written out from the objective definitions:
// regression grad = -2 X'W(y - Xb), Riesz grad = X'WX g - M'w; the penalty is
// alpha * s_j for both losses.
double kkt_gap(const Eigen::MatrixXd& x, const Eigen::VectorXd& grad, const Eigen::VectorXd& w, const Eigen::VectorXd& b,
               double alpha) {
  double worst = 0.0;
  for (int j = 0; j < x.cols(); ++j) {
    const double s = std::sqrt((w.array() * x.col(j).array().square()).sum() / w.sum());
    const double g = grad(j);
    const double pen = alpha * s;
    double v = b(j) == 0.0 ? std::max(0.0, std::abs(g) - pen) : std::abs(g + (b(j) > 0 ? pen : -pen));
    worst = std::max(worst, v / s);
  }
  return worst;
}

}  // namespace

TEST(SoftThreshold, Definition) {
  EXPECT_EQ(soft_threshold(3.0, 1.0), 2.0);
  EXPECT_EQ(soft_threshold(-0.5, 1.0), 0.0);
  EXPECT_EQ(soft_threshold(0.7, 0.0), 0.7);
  EXPECT_EQ(soft_threshold(-3.0, 1.0), -2.0);
}

TEST(Lasso, AlphaZeroIsWeightedLeastSquares) {
  std::mt19937_64 rng(1);
  auto pr = random_problem(rng, 80, 6);
  LassoFit fit = fit_lasso(pr.x, pr.y, pr.w, 0.0);
  Eigen::MatrixXd sw = pr.w.cwiseSqrt().asDiagonal() * pr.x;
  Eigen::VectorXd ols = sw.colPivHouseholderQr().solve(pr.w.cwiseSqrt().cwiseProduct(pr.y));
  EXPECT_TRUE((fit.coefficients - ols).isZero(1e-10));
}

TEST(Lasso, AlphaZeroRejectedWhenPAtLeastN) {
  std::mt19937_64 rng(2);
  auto pr = random_problem(rng, 5, 5);
  EXPECT_THROW(fit_lasso(pr.x, pr.y, pr.w, 0.0), ValidationError);
  EXPECT_NO_THROW(fit_lasso(pr.x, pr.y, pr.w, 0.1));
}

TEST(Lasso, OrthonormalClosedForm) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 60, p = 8;
    auto pr = random_problem(rng, n, p);
    Eigen::MatrixXd x = orthonormal_design(rng, n, p, pr.w);
    Eigen::VectorXd c = x.transpose() * pr.w.cwiseProduct(pr.y);
    for (double alpha : {0.01, 0.1, 0.5, 2.0}) {
      LassoFit fit = fit_lasso(x, pr.y, pr.w, alpha);
      for (int j = 0; j < p; ++j) EXPECT_NEAR(fit.coefficients(j), soft(c(j), alpha / 2.0), 1e-8);
      Eigen::MatrixXd m(n, p);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) m(i, j) = pr.y(i) * x(i, j);
      Eigen::VectorXd mm = m.transpose() * pr.w;
      LassoFit rz = fit_riesz(x, m, pr.w, alpha);
      for (int j = 0; j < p; ++j) EXPECT_NEAR(rz.coefficients(j), soft(mm(j), alpha), 1e-8);
    }
  }
}

TEST(Lasso, SingleColumnShrinksMonotonically) {
  std::mt19937_64 rng(4);
  auto pr = random_problem(rng, 50, 1);
  double prev = std::numeric_limits<double>::infinity();
  for (double alpha : {0.0, 0.05, 0.1, 0.5, 1.0, 2.0, 5.0}) {
    double b = fit_lasso(pr.x, pr.x.col(0), pr.w, alpha).coefficients(0);
    EXPECT_LE(b, prev + 1e-14);
    EXPECT_GE(b, 0.0);
    prev = b;
  }
}

TEST(Lasso, KktCertificateOnRandomInstances) {
  std::mt19937_64 rng(20261014);
  std::uniform_int_distribution<int> nn(20, 200), pp(2, 50);
  std::uniform_real_distribution<double> frac(0.01, 0.9);
  auto t0 = std::chrono::steady_clock::now();
  for (int rep = 0; rep < 200; ++rep) {
    const int n = nn(rng), p = pp(rng);
    auto pr = random_problem(rng, n, p);
    // Penalty as a fraction of the smallest penalty giving the zero solution.
    Eigen::VectorXd g0 = 2.0 * pr.x.transpose() * pr.w.cwiseProduct(pr.y);
    double amax = 0.0;
    for (int j = 0; j < p; ++j) {
      const double s = std::sqrt((pr.w.array() * pr.x.col(j).array().square()).sum());
      amax = std::max(amax, std::abs(g0(j)) / s);
    }
    const double alpha = frac(rng) * amax;
    LassoFit fit = fit_lasso(pr.x, pr.y, pr.w, alpha);
    ASSERT_TRUE(fit.converged);
    Eigen::VectorXd grad = -2.0 * pr.x.transpose() * pr.w.cwiseProduct(pr.y - pr.x * fit.coefficients);
    EXPECT_LT(kkt_gap(pr.x, grad, pr.w, fit.coefficients, alpha), 1e-6) << "rep " << rep;
    EXPECT_LT(kkt_violation_lasso(pr.x, pr.y, pr.w, fit), 1e-6);

    Eigen::MatrixXd m = pr.x.array().colwise() * pr.y.array();
    LassoFit rz = fit_riesz(pr.x, m, pr.w, alpha / 4.0);
    ASSERT_TRUE(rz.converged);
    Eigen::MatrixXd gram = pr.x.transpose() * pr.w.asDiagonal() * pr.x;
    Eigen::VectorXd rgrad = gram * rz.coefficients - m.transpose() * pr.w;
    EXPECT_LT(kkt_gap(pr.x, rgrad, pr.w, rz.coefficients, alpha / 4.0), 1e-6) << "rep " << rep;
    EXPECT_LT(kkt_violation_riesz(pr.x, m, pr.w, rz), 1e-6);
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 30.0);
}

TEST(Lasso, ObjectiveNonincreasingAcrossSweeps) {
  std::mt19937_64 rng(6);
  auto pr = random_problem(rng, 100, 30);
  LassoOptions opt;
  opt.record_trace = true;
  LassoFit fit = fit_lasso(pr.x, pr.y, pr.w, 0.05, opt);
  ASSERT_GT(fit.trace.size(), 1u);
  for (std::size_t k = 1; k < fit.trace.size(); ++k) EXPECT_LE(fit.trace[k], fit.trace[k - 1] + 1e-12);
  Eigen::MatrixXd m = pr.x.array().colwise() * pr.y.array();
  LassoFit rz = fit_riesz(pr.x, m, pr.w, 0.05, opt);
  for (std::size_t k = 1; k < rz.trace.size(); ++k) EXPECT_LE(rz.trace[k], rz.trace[k - 1] + 1e-12);
}

TEST(Lasso, ScaleEquivariance) {
  std::mt19937_64 rng(7);
  auto pr = random_problem(rng, 70, 10);
  LassoFit a = fit_lasso(pr.x, pr.y, pr.w, 0.1);
  LassoFit b = fit_lasso(pr.x, pr.y, 4.0 * pr.w, 0.4);
  EXPECT_EQ(a.coefficients, b.coefficients);
}

TEST(Riesz, InterceptTargetGivesOne) {
  std::mt19937_64 rng(8);
  auto pr = random_problem(rng, 40, 4);
  pr.x.col(0).setOnes();
  LassoFit fit = fit_riesz(pr.x, pr.x, pr.w, 0.0);
  Eigen::VectorXd fitted = pr.x * fit.coefficients;
  EXPECT_TRUE((fitted - Eigen::VectorXd::Ones(40)).isZero(1e-10));
  EXPECT_NEAR(fit.objective, -0.5, 1e-12);
}

TEST(Riesz, ZeroTargetsGiveZero) {
  std::mt19937_64 rng(9);
  auto pr = random_problem(rng, 40, 4);
  Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(40, 4);
  for (double alpha : {0.0, 0.1, 1.0}) EXPECT_TRUE(fit_riesz(pr.x, zero, pr.w, alpha).coefficients.isZero());
  EXPECT_TRUE(riesz_as_lasso(pr.x, zero, pr.w).isZero());
}

TEST(RieszAsLasso, ReproducesMomentVector) {
  std::mt19937_64 rng(10);
  Eigen::VectorXd w = Eigen::VectorXd::Constant(10, 0.1);
  Eigen::MatrixXd x = orthonormal_design(rng, 10, 2, w);
  Eigen::MatrixXd m(10, 2);
  std::normal_distribution<double> nd;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 2; ++j) m(i, j) = nd(rng);
  Eigen::VectorXd yt = riesz_as_lasso(x, m, w);
  // X'W yt = m-bar, and with X'WX = I the synthetic response is X m-bar.
  Eigen::VectorXd mbar = m.transpose() * w;
  EXPECT_TRUE((x.transpose() * w.cwiseProduct(yt) - mbar).isZero(1e-12));
  EXPECT_TRUE((yt - x * mbar).isZero(1e-12));
}

TEST(RieszAsLasso, RouteEquivalenceSmallInstance) {
  std::mt19937_64 rng(11);
  auto pr = random_problem(rng, 50, 5);
  Eigen::MatrixXd m = pr.x.array().colwise() * pr.y.array();
  LassoFit direct = fit_riesz(pr.x, m, pr.w, 0.1);
  LassoFit route = fit_lasso(pr.x, riesz_as_lasso(pr.x, m, pr.w), pr.w, 0.2);
  EXPECT_TRUE((direct.coefficients - route.coefficients).isZero(1e-6));
}

TEST(RieszAsLasso, RouteEquivalenceAcrossCvGrid) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 20; ++rep) {
    const int n = 60 + 10 * rep, p = 4 + rep % 7;
    auto pr = random_problem(rng, n, p);
    Eigen::MatrixXd m(n, p);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < p; ++j) m(i, j) = pr.x(i, j) * pr.y(i) + 0.3 * nd(rng);
    // Independent synthetic response: a QR solve of the weighted normal equations.
    Eigen::MatrixXd gram = pr.x.transpose() * pr.w.asDiagonal() * pr.x;
    Eigen::VectorXd mbar = m.transpose() * pr.w;
    Eigen::VectorXd yt = pr.x * gram.householderQr().solve(mbar);
    EXPECT_TRUE((yt - riesz_as_lasso(pr.x, m, pr.w)).isZero(1e-9));
    CvSettings cv;
    CvDesign design(pr.x, pr.w, cv);
    QuadraticStats st = detail::riesz_stats(pr.x, m, pr.w);
    const auto grid = penalty_grid(design.alpha_max(LossKind::riesz, st), cv.grid_size, cv.grid_ratio);
    ASSERT_EQ(grid.size(), 50u);
    for (double a : grid) {
      LassoFit direct = fit_riesz(pr.x, m, pr.w, a);
      LassoFit route = fit_lasso(pr.x, yt, pr.w, 2.0 * a);
      EXPECT_LT((direct.coefficients - route.coefficients).cwiseAbs().maxCoeff(), 1e-6) << "rep " << rep << " alpha " << a;
    }
  }
}

TEST(Cv, GridOfLengthOne) {
  std::mt19937_64 rng(13);
  auto pr = random_problem(rng, 60, 5);
  CvSettings cv;
  CvDesign design(pr.x, pr.w, cv);
  CvOutcome out = design.select(LossKind::regression, &pr.y, nullptr, {0.37});
  EXPECT_EQ(out.alpha, 0.37);
}

TEST(Cv, NoiselessResponseSelectsSmallestPenalty) {
  std::mt19937_64 rng(14);
  auto pr = random_problem(rng, 120, 6);
  Eigen::VectorXd y = 2.5 * pr.x.col(1);
  CvSettings cv;
  CvDesign design(pr.x, pr.w, cv);
  CvOutcome out;
  design.fit_regression(y, &out);
  EXPECT_EQ(out.alpha, out.grid.back());
}

TEST(Cv, PureNoiseSelectsLargePenalty) {
  std::mt19937_64 rng(15);
  std::normal_distribution<double> nd;
  int near_top = 0;
  for (int rep = 0; rep < 20; ++rep) {
    auto pr = random_problem(rng, 100, 10, true);
    Eigen::VectorXd y(100);
    for (int i = 0; i < 100; ++i) y(i) = nd(rng);
    CvSettings cv;
    cv.seed = 100 + rep;
    CvDesign design(pr.x, pr.w, cv);
    CvOutcome out;
    LassoFit fit = design.fit_regression(y, &out);
    const auto pos = std::find(out.grid.begin(), out.grid.end(), out.alpha) - out.grid.begin();
    if (pos < 10) ++near_top;
    EXPECT_LT(fit.coefficients.norm(), 0.5);
  }
  EXPECT_GE(near_top, 14);
}

TEST(Cv, TiesGoToLargerPenalty) {
  std::mt19937_64 rng(16);
  auto pr = random_problem(rng, 50, 4);
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(50);
  CvSettings cv;
  CvDesign design(pr.x, pr.w, cv);
  CvOutcome out = design.select(LossKind::regression, &zero, nullptr, {0.1, 1.0, 0.01});
  EXPECT_EQ(out.alpha, 1.0);
}

TEST(Cv, GridAndAlphaMax) {
  auto g = penalty_grid(2.0, 50, 1e-4);
  ASSERT_EQ(g.size(), 50u);
  EXPECT_DOUBLE_EQ(g.front(), 2.0);
  EXPECT_NEAR(g.back(), 2e-4, 1e-16);
  for (std::size_t k = 1; k < g.size(); ++k) EXPECT_LT(g[k], g[k - 1]);
  // At alpha_max the fit is zero, just below it is not.
  std::mt19937_64 rng(17);
  auto pr = random_problem(rng, 80, 6);
  CvSettings cv;
  CvDesign design(pr.x, pr.w, cv);
  const double amax = design.alpha_max(LossKind::regression, detail::regression_stats(pr.x, pr.y, pr.w));
  EXPECT_TRUE(fit_lasso(pr.x, pr.y, pr.w, amax * 1.0000001).coefficients.isZero());
  EXPECT_FALSE(fit_lasso(pr.x, pr.y, pr.w, amax * 0.99).coefficients.isZero());
}

TEST(Cv, FoldAssignmentDeterministic) {
  EXPECT_EQ(random_fold_assignment(37, 5, 99), random_fold_assignment(37, 5, 99));
  EXPECT_NE(random_fold_assignment(37, 5, 99), random_fold_assignment(37, 5, 100));
}

TEST(Cv, LeaveOneOutMatchesExplicitRefits) {
  std::mt19937_64 rng(18);
  auto pr = random_problem(rng, 25, 3);
  CvSettings cv;
  cv.loo = true;
  CvDesign design(pr.x, pr.w, cv);
  const std::vector<double> grid = {0.5, 0.05};
  CvOutcome out = design.select(LossKind::regression, &pr.y, nullptr, grid);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double loss = 0.0;
    for (int i = 0; i < 25; ++i) {
      std::vector<int> keep;
      for (int k = 0; k < 25; ++k)
        if (k != i) keep.push_back(k);
      Eigen::MatrixXd xi(24, 3);
      Eigen::VectorXd yi(24), wi(24);
      for (int a = 0; a < 24; ++a) {
        xi.row(a) = pr.x.row(keep[a]);
        yi(a) = pr.y(keep[a]);
        wi(a) = pr.w(keep[a]);
      }
      wi /= wi.sum();
      LassoOptions tight;
      tight.tol = 1e-12;
      Eigen::VectorXd b = fit_lasso(xi, yi, wi, grid[g], tight).coefficients;
      const double r = pr.y(i) - pr.x.row(i).dot(b);
      loss += pr.w(i) * r * r;
    }
    EXPECT_NEAR(out.loss[g], loss / pr.w.sum(), 1e-6);
  }
}
