#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/error.hpp"
#include "poforge/lasso.hpp"
#include "poforge/model.hpp"

namespace poforge {

// Observations with dense label indices. In continuous-pair mode `z` holds
// the binary component C and `w` the continuous component W.
struct Dataset {
  Eigen::VectorXd y;
  Eigen::VectorXi t;
  Eigen::VectorXi z;
  Eigen::VectorXd w;
  Eigen::MatrixXd x;
  Eigen::VectorXd omega;  // sums to one
  bool weighted = false;  // true when survey weights were supplied

  int n() const { return static_cast<int>(y.size()); }
  int m() const { return static_cast<int>(x.cols()); }
  bool continuous() const { return w.size() > 0; }
};

inline Eigen::VectorXd uniform_weights(int n) { return Eigen::VectorXd::Constant(n, 1.0 / n); }

inline void validate_dataset(const Dataset& data, int d, int q) {
  const int n = data.n();
  if (n < 1) throw DataError("dataset is empty");
  if (data.t.size() != n || data.z.size() != n || data.x.rows() != n || data.omega.size() != n)
    throw DimensionError("dataset columns have inconsistent lengths");
  if (data.continuous() && data.w.size() != n) throw DimensionError("continuous instrument column has the wrong length");
  if (!data.y.allFinite() || !data.x.allFinite() || !data.omega.allFinite() || (data.continuous() && !data.w.allFinite()))
    throw DataError("dataset contains non-finite entries");
  for (int i = 0; i < n; ++i) {
    if (data.t(i) < 0 || data.t(i) >= d) throw DataError("row " + std::to_string(i) + ": treatment index out of range");
    if (data.z(i) < 0 || data.z(i) >= q) throw DataError("row " + std::to_string(i) + ": instrument index out of range");
  }
  if ((data.omega.array() < 0.0).any()) throw DataError("negative survey weight");
  if (std::abs(data.omega.sum() - 1.0) > 1e-9) throw DataError("survey weights must be normalized to sum to one");
}

struct FoldPlan {
  std::vector<int> fold;  // fold of each row
  int K = 1;
  std::uint64_t seed = 0;

  std::vector<std::vector<int>> members() const {
    std::vector<std::vector<int>> out(K);
    for (int i = 0; i < static_cast<int>(fold.size()); ++i) out[fold[i]].push_back(i);
    return out;
  }

  // K = 1: nuisances fit and evaluated on the full sample.
  static FoldPlan no_split(int n) {
    FoldPlan p;
    p.fold.assign(n, 0);
    p.K = 1;
    return p;
  }
};

inline FoldPlan make_folds(int n, int K, std::uint64_t seed) {
  if (K < 2) throw ValidationError("cross-fitting needs K >= 2 (K = 1 is the weighted no-split path)");
  if (K > n) throw ValidationError("K=" + std::to_string(K) + " exceeds n=" + std::to_string(n));
  FoldPlan p;
  p.fold = random_fold_assignment(n, K, seed);
  p.K = K;
  p.seed = seed;
  return p;
}

// Rows b(Z_i, X_i).
inline Eigen::MatrixXd design_matrix(const BasisSpec& basis, const Dataset& data) {
  Eigen::MatrixXd b(data.n(), basis.dim());
  Eigen::VectorXd row(basis.dim());
  for (int i = 0; i < data.n(); ++i) {
    if (basis.mode == InstrumentMode::discrete)
      basis.eval(data.z(i), data.x.row(i), row);
    else
      basis.eval_continuous(data.z(i), data.w(i), data.x.row(i), row);
    b.row(i) = row.transpose();
  }
  return b;
}

// Rows b(z_j, X_i) with the instrument fixed at index j (discrete mode).
inline Eigen::MatrixXd design_at(const BasisSpec& basis, const Dataset& data, int j) {
  Eigen::MatrixXd b(data.n(), basis.dim());
  Eigen::VectorXd row(basis.dim());
  for (int i = 0; i < data.n(); ++i) {
    basis.eval(j, data.x.row(i), row);
    b.row(i) = row.transpose();
  }
  return b;
}

// [1, X] rows used by the mediation scores' covariate fits.
inline Eigen::MatrixXd covariate_design(const Dataset& data) {
  Eigen::MatrixXd f(data.n(), data.m() + 1);
  f.col(0).setOnes();
  if (data.m() > 0) f.rightCols(data.m()) = data.x;
  return f;
}

}  // namespace poforge
