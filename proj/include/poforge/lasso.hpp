#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/error.hpp"

// Weighted l1-penalized quadratic fits.
//
// Lasso:  sum_i w_i (y_i - b_i'beta)^2 + alpha * sum_j s_j |beta_j|
// Riesz:  sum_i w_i (0.5 (b_i'gamma)^2 - M_i'gamma) + alpha * sum_j s_j |gamma_j|
//
// s_j = sqrt(sum_i w_i b_ij^2 / sum_i w_i) is the weighted RMS of column j, so
// the penalty acts on standardized coefficients while results are reported on
// the original scale. With weights summing to one both losses are weighted
// means. For a weighted-orthonormal design s_j = 1 and the penalty is alpha*|.|_1.
// Because the Lasso loss carries no 1/2, the Riesz fit at alpha equals the
// Lasso fit on the synthetic response of riesz_as_lasso at 2*alpha.

namespace poforge {

inline constexpr double tol_cd = 1e-8;
inline constexpr double tol_kkt = 1e-6;
inline constexpr int max_cd_sweeps = 10000;

inline double soft_threshold(double v, double a) {
  if (v > a) return v - a;
  if (v < -a) return v + a;
  return 0.0;
}

struct LassoOptions {
  double tol = tol_cd;
  int max_sweeps = max_cd_sweeps;
  bool standardize = true;
  bool record_trace = false;
};

struct LassoFit {
  Eigen::VectorXd coefficients;
  double penalty = 0.0;
  int iterations = 0;
  bool converged = false;
  double objective = 0.0;
  std::vector<double> trace;  // objective after each sweep, when recorded
  Eigen::VectorXd scales;     // column scales s_j used by the penalty
};

enum class LossKind { regression, riesz };

// Sufficient statistics of one weighted sample: G = sum w b b', lin = sum w b y
// (regression) or sum w M (Riesz), yy = sum w y^2, wsum = sum w.
struct QuadraticStats {
  Eigen::MatrixXd gram;
  Eigen::VectorXd lin;
  double yy = 0.0;
  double wsum = 0.0;
};

namespace detail {

inline void check_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw ValidationError(std::string(what) + " contains non-finite entries");
}

inline void check_weights(const Eigen::VectorXd& w, Eigen::Index n) {
  if (w.size() != n) throw DimensionError("weights have length " + std::to_string(w.size()) + ", expected " + std::to_string(n));
  if (!w.allFinite()) throw ValidationError("weights contain non-finite entries");
  if ((w.array() < 0.0).any()) throw ValidationError("weights must be nonnegative");
  if (!(w.sum() > 0.0)) throw ValidationError("weights are all zero");
}

inline Eigen::MatrixXd weighted_gram(const Eigen::MatrixXd& x, const Eigen::VectorXd& w) {
  Eigen::MatrixXd xw = x.array().colwise() * w.array();
  Eigen::MatrixXd g = xw.transpose() * x;
  return 0.5 * (g + g.transpose());
}

inline Eigen::VectorXd column_scales(const Eigen::MatrixXd& gram, double wsum, bool standardize) {
  const Eigen::Index p = gram.rows();
  Eigen::VectorXd s(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    double v = gram(j, j) / wsum;
    if (!standardize) {
      s(j) = v > 0.0 ? 1.0 : 0.0;
    } else {
      s(j) = v > 0.0 ? std::sqrt(v) : 0.0;
    }
  }
  return s;
}

// 0.5 b'Hb - g'b + sum pen_j |b_j|
inline double quad_objective(const Eigen::MatrixXd& h, const Eigen::VectorXd& g, const Eigen::VectorXd& pen,
                             const Eigen::VectorXd& b) {
  return 0.5 * b.dot(h * b) - g.dot(b) + pen.dot(b.cwiseAbs());
}

struct CdState {
  int sweeps = 0;
  bool converged = false;
};

// Cyclic coordinate descent; `beta` is the warm start and the result.
// Columns with zero scale are held at zero.
inline CdState coordinate_descent(const Eigen::MatrixXd& h, const Eigen::VectorXd& g, const Eigen::VectorXd& pen,
                                  const Eigen::VectorXd& scale, Eigen::VectorXd& beta, const LassoOptions& opt,
                                  std::vector<double>* trace) {
  const Eigen::Index p = h.rows();
  for (Eigen::Index j = 0; j < p; ++j)
    if (scale(j) == 0.0) beta(j) = 0.0;
  Eigen::VectorXd hb = h * beta;
  CdState st;
  for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
    double change = 0.0;
    for (Eigen::Index j = 0; j < p; ++j) {
      const double hjj = h(j, j);
      if (scale(j) == 0.0 || !(hjj > 0.0)) continue;
      const double old = beta(j);
      const double z = g(j) - hb(j) + hjj * old;
      const double nw = soft_threshold(z, pen(j)) / hjj;
      if (nw != old) {
        const double delta = nw - old;
        hb.noalias() += delta * h.col(j);
        beta(j) = nw;
        change = std::max(change, std::abs(delta) * scale(j));
      }
    }
    st.sweeps = sweep;
    if (trace) trace->push_back(quad_objective(h, g, pen, beta));
    if (change < opt.tol) {
      st.converged = true;
      break;
    }
  }
  return st;
}

// Unpenalized solve restricted to columns with nonzero scale (minimum norm).
inline Eigen::VectorXd direct_solve(const Eigen::MatrixXd& h, const Eigen::VectorXd& g, const Eigen::VectorXd& scale) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < scale.size(); ++j)
    if (scale(j) > 0.0) keep.push_back(j);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(h.rows());
  if (keep.empty()) return beta;
  const Eigen::Index k = static_cast<Eigen::Index>(keep.size());
  Eigen::MatrixXd hk(k, k);
  Eigen::VectorXd gk(k);
  for (Eigen::Index a = 0; a < k; ++a) {
    gk(a) = g(keep[a]);
    for (Eigen::Index b = 0; b < k; ++b) hk(a, b) = h(keep[a], keep[b]);
  }
  Eigen::VectorXd sol;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(hk);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive() &&
      ldlt.vectorD().minCoeff() > 1e-12 * std::max(1.0, ldlt.vectorD().maxCoeff())) {
    sol = ldlt.solve(gk);
  } else {
    sol = hk.completeOrthogonalDecomposition().solve(gk);
  }
  for (Eigen::Index a = 0; a < k; ++a) beta(keep[a]) = sol(a);
  return beta;
}

// Fits one quadratic problem at penalty alpha in the loss's own convention.
inline LassoFit fit_quadratic(const QuadraticStats& st, LossKind kind, double alpha, const LassoOptions& opt,
                              Eigen::Index n_obs, const Eigen::VectorXd* warm = nullptr) {
  const Eigen::Index p = st.gram.rows();
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ValidationError("penalty must be finite and nonnegative");
  if (alpha == 0.0 && p >= n_obs)
    throw ValidationError("alpha = 0 needs p < n (p=" + std::to_string(p) + ", n=" + std::to_string(n_obs) + ")");
  LassoFit fit;
  fit.penalty = alpha;
  fit.scales = column_scales(st.gram, st.wsum, opt.standardize);
  // Lasso loss = 2 * (0.5 b'Gb - c'b) + yy, so its penalty enters the
  // quadratic form at alpha/2.
  const double lam = kind == LossKind::regression ? 0.5 * alpha : alpha;
  Eigen::VectorXd pen = lam * fit.scales;
  if (alpha == 0.0) {
    fit.coefficients = direct_solve(st.gram, st.lin, fit.scales);
    fit.iterations = 0;
    fit.converged = true;
  } else {
    Eigen::VectorXd beta = warm ? *warm : Eigen::VectorXd::Zero(p);
    CdState cs = coordinate_descent(st.gram, st.lin, pen, fit.scales, beta, opt, opt.record_trace ? &fit.trace : nullptr);
    fit.coefficients = beta;
    fit.iterations = cs.sweeps;
    fit.converged = cs.converged;
  }
  double q = quad_objective(st.gram, st.lin, pen, fit.coefficients);
  if (kind == LossKind::regression) {
    fit.objective = 2.0 * q + st.yy;
    for (auto& v : fit.trace) v = 2.0 * v + st.yy;
  } else {
    fit.objective = q;
  }
  return fit;
}

inline QuadraticStats regression_stats(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
  QuadraticStats st;
  st.gram = weighted_gram(x, w);
  Eigen::VectorXd wy = w.cwiseProduct(y);
  st.lin = x.transpose() * wy;
  st.yy = wy.dot(y);
  st.wsum = w.sum();
  return st;
}

inline QuadraticStats riesz_stats(const Eigen::MatrixXd& x, const Eigen::MatrixXd& targets, const Eigen::VectorXd& w) {
  QuadraticStats st;
  st.gram = weighted_gram(x, w);
  st.lin = targets.transpose() * w;
  st.wsum = w.sum();
  return st;
}

}  // namespace detail

inline LassoFit fit_lasso(const Eigen::MatrixXd& design, const Eigen::VectorXd& response, const Eigen::VectorXd& weights,
                          double alpha, const LassoOptions& opt = {}) {
  if (response.size() != design.rows()) throw DimensionError("response length does not match design rows");
  detail::check_weights(weights, design.rows());
  detail::check_finite(design, "design");
  detail::check_finite(response, "response");
  return detail::fit_quadratic(detail::regression_stats(design, response, weights), LossKind::regression, alpha, opt,
                               design.rows());
}

inline LassoFit fit_riesz(const Eigen::MatrixXd& design, const Eigen::MatrixXd& targets, const Eigen::VectorXd& weights,
                          double alpha, const LassoOptions& opt = {}) {
  if (targets.rows() != design.rows() || targets.cols() != design.cols())
    throw DimensionError("targets must have the shape of the design");
  detail::check_weights(weights, design.rows());
  detail::check_finite(design, "design");
  detail::check_finite(targets, "targets");
  return detail::fit_quadratic(detail::riesz_stats(design, targets, weights), LossKind::riesz, alpha, opt, design.rows());
}

// Synthetic response b_i' G^{-1} m; a Lasso on it reproduces the Riesz fit.
inline Eigen::VectorXd riesz_as_lasso(const Eigen::MatrixXd& design, const Eigen::MatrixXd& targets,
                                      const Eigen::VectorXd& weights) {
  if (targets.rows() != design.rows() || targets.cols() != design.cols())
    throw DimensionError("targets must have the shape of the design");
  if (design.cols() >= design.rows()) throw ValidationError("riesz_as_lasso needs p < n");
  detail::check_weights(weights, design.rows());
  Eigen::MatrixXd g = detail::weighted_gram(design, weights);
  Eigen::VectorXd m = targets.transpose() * weights;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(g);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || !(sv(sv.size() - 1) > 0.0) || sv(0) / sv(sv.size() - 1) > 1e12)
    throw NumericalError("weighted Gram matrix is ill-conditioned; fit the Riesz loss directly");
  Eigen::VectorXd coef = g.ldlt().solve(m);
  return design * coef;
}

// Largest violation of the stationarity conditions, measured on the
// standardized scale (gradient divided by s_j against alpha).
inline double kkt_violation(const Eigen::VectorXd& grad, const LassoFit& fit) {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < grad.size(); ++j) {
    const double s = fit.scales(j);
    if (s == 0.0) continue;
    const double gj = grad(j) / s;
    const double b = fit.coefficients(j);
    double v = b == 0.0 ? std::max(0.0, std::abs(gj) - fit.penalty)
                        : std::abs(gj + fit.penalty * (b > 0.0 ? 1.0 : -1.0));
    worst = std::max(worst, v);
  }
  return worst;
}

inline double kkt_violation_lasso(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                                  const Eigen::VectorXd& weights, const LassoFit& fit) {
  Eigen::VectorXd resid = response - design * fit.coefficients;
  Eigen::VectorXd grad = -2.0 * (design.transpose() * weights.cwiseProduct(resid));
  return kkt_violation(grad, fit);
}

inline double kkt_violation_riesz(const Eigen::MatrixXd& design, const Eigen::MatrixXd& targets,
                                  const Eigen::VectorXd& weights, const LassoFit& fit) {
  Eigen::MatrixXd g = detail::weighted_gram(design, weights);
  Eigen::VectorXd grad = g * fit.coefficients - targets.transpose() * weights;
  return kkt_violation(grad, fit);
}

struct CvSettings {
  int folds = 10;
  bool loo = false;
  int grid_size = 50;
  double grid_ratio = 1e-4;
  std::uint64_t seed = 0x9e3779b97f4a7c15ULL;
  std::optional<double> fixed_alpha;  // skip CV and use this penalty
  LassoOptions lasso;
};

struct CvOutcome {
  double alpha = 0.0;
  std::vector<double> grid;
  std::vector<double> loss;  // out-of-fold weighted mean loss per grid point
};

// Log-spaced grid from alpha_max down to alpha_max * ratio.
inline std::vector<double> penalty_grid(double alpha_max, int size, double ratio) {
  if (size < 1) throw ValidationError("penalty grid needs at least one point");
  if (!(alpha_max > 0.0)) return {1.0};
  std::vector<double> grid(size);
  for (int k = 0; k < size; ++k)
    grid[k] = size == 1 ? alpha_max : alpha_max * std::pow(ratio, static_cast<double>(k) / (size - 1));
  return grid;
}

// Assignment of n rows to K folds: seeded shuffle, then round robin.
inline std::vector<int> random_fold_assignment(int n, int k, std::uint64_t seed) {
  if (k < 1 || k > n) throw ValidationError("fold count " + std::to_string(k) + " invalid for n=" + std::to_string(n));
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  for (int i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(perm[i], perm[pick(rng)]);
  }
  std::vector<int> fold(n);
  for (int pos = 0; pos < n; ++pos) fold[perm[pos]] = pos % k;
  return fold;
}

// Design and weights of one sample, split into CV folds, with per-fold Gram
// matrices cached so that many responses can be cross-validated cheaply.
class CvDesign {
 public:
  CvDesign(Eigen::MatrixXd design, Eigen::VectorXd weights, const CvSettings& settings)
      : x_(std::move(design)), w_(std::move(weights)), settings_(settings) {
    detail::check_weights(w_, x_.rows());
    detail::check_finite(x_, "design");
    const int n = static_cast<int>(x_.rows());
    total_.gram = detail::weighted_gram(x_, w_);
    total_.wsum = w_.sum();
    if (settings_.fixed_alpha) return;
    if (settings_.loo) {
      nfolds_ = n;
      fold_.resize(n);
      std::iota(fold_.begin(), fold_.end(), 0);
    } else {
      nfolds_ = settings_.folds;
      if (nfolds_ < 2) throw ValidationError("cross-validation needs at least 2 folds");
      if (nfolds_ > n) throw ValidationError("more CV folds than observations");
      fold_ = random_fold_assignment(n, nfolds_, settings_.seed);
    }
    rows_.assign(nfolds_, {});
    for (int i = 0; i < n; ++i) rows_[fold_[i]].push_back(i);
    fold_w_.assign(nfolds_, 0.0);
    for (int f = 0; f < nfolds_; ++f) {
      for (int i : rows_[f]) fold_w_[f] += w_(i);
      if (!(fold_w_[f] > 0.0)) throw DataError("CV fold " + std::to_string(f) + " has zero total weight");
      if (!(total_.wsum - fold_w_[f] > 0.0)) throw DataError("CV training set for fold " + std::to_string(f) + " has zero weight");
    }
    if (!settings_.loo) {
      fold_gram_.resize(nfolds_);
      for (int f = 0; f < nfolds_; ++f) fold_gram_[f] = sub_gram(rows_[f]);
    }
  }

  const Eigen::MatrixXd& design() const { return x_; }
  const Eigen::VectorXd& weights() const { return w_; }
  const CvSettings& settings() const { return settings_; }

  LassoFit fit_regression(const Eigen::VectorXd& y, CvOutcome* out = nullptr) const {
    if (y.size() != x_.rows()) throw DimensionError("response length does not match design rows");
    detail::check_finite(y, "response");
    return fit(LossKind::regression, &y, nullptr, out);
  }

  LassoFit fit_riesz(const Eigen::MatrixXd& targets, CvOutcome* out = nullptr) const {
    if (targets.rows() != x_.rows() || targets.cols() != x_.cols())
      throw DimensionError("targets must have the shape of the design");
    detail::check_finite(targets, "targets");
    return fit(LossKind::riesz, nullptr, &targets, out);
  }

  // Out-of-fold selection over an explicit grid (largest penalty wins ties).
  CvOutcome select(LossKind kind, const Eigen::VectorXd* y, const Eigen::MatrixXd* targets,
                   std::vector<double> grid) const {
    if (grid.empty()) throw ValidationError("penalty grid is empty");
    if (nfolds_ < 2) throw ValidationError("cross-validation needs at least 2 folds");
    std::sort(grid.begin(), grid.end(), std::greater<double>());
    CvOutcome out;
    out.grid = grid;
    out.loss.assign(grid.size(), 0.0);
    const QuadraticStats tot = stats_for(kind, y, targets);
    const Eigen::Index p = x_.cols();
    for (int f = 0; f < nfolds_; ++f) {
      QuadraticStats held = fold_stats(f, kind, y, targets);
      QuadraticStats train;
      const double wt = tot.wsum - held.wsum;
      train.gram = (tot.gram - held.gram) / wt;
      train.lin = (tot.lin - held.lin) / wt;
      train.yy = (tot.yy - held.yy) / wt;
      train.wsum = 1.0;
      Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
      const Eigen::Index ntrain = x_.rows() - static_cast<Eigen::Index>(rows_[f].size());
      for (std::size_t g = 0; g < grid.size(); ++g) {
        LassoFit fit = detail::fit_quadratic(train, kind, grid[g], settings_.lasso, ntrain, &beta);
        beta = fit.coefficients;
        double loss;
        if (kind == LossKind::regression) {
          loss = beta.dot(held.gram * beta) - 2.0 * held.lin.dot(beta) + held.yy;
        } else {
          loss = 0.5 * beta.dot(held.gram * beta) - held.lin.dot(beta);
        }
        out.loss[g] += loss / tot.wsum;
      }
    }
    std::size_t best = 0;
    for (std::size_t g = 1; g < grid.size(); ++g)
      if (out.loss[g] < out.loss[best]) best = g;
    out.alpha = grid[best];
    return out;
  }

  double alpha_max(LossKind kind, const QuadraticStats& tot) const {
    Eigen::VectorXd s = detail::column_scales(tot.gram, tot.wsum, settings_.lasso.standardize);
    double a = 0.0;
    for (Eigen::Index j = 0; j < s.size(); ++j) {
      if (s(j) == 0.0) continue;
      double gj = tot.lin(j) / tot.wsum / s(j);
      a = std::max(a, std::abs(gj));
    }
    return kind == LossKind::regression ? 2.0 * a : a;
  }

 private:
  LassoFit fit(LossKind kind, const Eigen::VectorXd* y, const Eigen::MatrixXd* targets, CvOutcome* out) const {
    QuadraticStats tot = stats_for(kind, y, targets);
    double alpha;
    if (settings_.fixed_alpha) {
      alpha = *settings_.fixed_alpha;
      if (out) {
        out->alpha = alpha;
        out->grid = {alpha};
        out->loss.clear();
      }
    } else {
      std::vector<double> grid = penalty_grid(alpha_max(kind, tot), settings_.grid_size, settings_.grid_ratio);
      CvOutcome cv = select(kind, y, targets, grid);
      alpha = cv.alpha;
      if (out) *out = std::move(cv);
    }
    QuadraticStats norm;
    norm.gram = tot.gram / tot.wsum;
    norm.lin = tot.lin / tot.wsum;
    norm.yy = tot.yy / tot.wsum;
    norm.wsum = 1.0;
    LassoFit fit = detail::fit_quadratic(norm, kind, alpha, settings_.lasso, x_.rows());
    return fit;
  }

  Eigen::MatrixXd sub_gram(const std::vector<int>& rows) const {
    const Eigen::Index p = x_.cols();
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(p, p);
    for (int i : rows) g.selfadjointView<Eigen::Lower>().rankUpdate(x_.row(i).transpose(), w_(i));
    return g.selfadjointView<Eigen::Lower>();
  }

  QuadraticStats stats_for(LossKind kind, const Eigen::VectorXd* y, const Eigen::MatrixXd* targets) const {
    QuadraticStats st;
    st.gram = total_.gram;
    st.wsum = total_.wsum;
    if (kind == LossKind::regression) {
      Eigen::VectorXd wy = w_.cwiseProduct(*y);
      st.lin = x_.transpose() * wy;
      st.yy = wy.dot(*y);
    } else {
      st.lin = targets->transpose() * w_;
    }
    return st;
  }

  QuadraticStats fold_stats(int f, LossKind kind, const Eigen::VectorXd* y, const Eigen::MatrixXd* targets) const {
    const Eigen::Index p = x_.cols();
    QuadraticStats st;
    st.lin = Eigen::VectorXd::Zero(p);
    st.wsum = fold_w_[f];
    if (settings_.loo) {
      st.gram = Eigen::MatrixXd::Zero(p, p);
      for (int i : rows_[f]) st.gram.noalias() += w_(i) * x_.row(i).transpose() * x_.row(i);
    } else {
      st.gram = fold_gram_[f];
    }
    for (int i : rows_[f]) {
      if (kind == LossKind::regression) {
        st.lin.noalias() += (w_(i) * (*y)(i)) * x_.row(i).transpose();
        st.yy += w_(i) * (*y)(i) * (*y)(i);
      } else {
        st.lin.noalias() += w_(i) * targets->row(i).transpose();
      }
    }
    return st;
  }

  Eigen::MatrixXd x_;
  Eigen::VectorXd w_;
  CvSettings settings_;
  QuadraticStats total_;
  int nfolds_ = 0;
  std::vector<int> fold_;
  std::vector<std::vector<int>> rows_;
  std::vector<double> fold_w_;
  std::vector<Eigen::MatrixXd> fold_gram_;
};

// Selected penalty for a response (regression) or target matrix (Riesz).
inline CvOutcome cross_validate_penalty(const Eigen::MatrixXd& design, const Eigen::VectorXd* response,
                                        const Eigen::MatrixXd* targets, const Eigen::VectorXd& weights,
                                        const std::vector<double>& grid, const CvSettings& settings) {
  CvSettings s = settings;
  s.fixed_alpha.reset();
  CvDesign cv(design, weights, s);
  return cv.select(response ? LossKind::regression : LossKind::riesz, response, targets, grid);
}

}  // namespace poforge
