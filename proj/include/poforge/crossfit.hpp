#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/dataset.hpp"
#include "poforge/error.hpp"
#include "poforge/lasso.hpp"
#include "poforge/parallel.hpp"

namespace poforge {

struct NuisanceRecord {
  std::string name;
  int fold = 0;
  double alpha = 0.0;
};

struct EstimateResult {
  std::string id;
  double lambda_hat = 0.0;
  Eigen::VectorXd psi;    // centered influence values
  Eigen::VectorXd v;      // aggregation weights: 1/n, or the survey weights
  double se = 0.0;
  int n = 0;
  int K = 1;
  std::uint64_t fold_seed = 0;
  bool weighted = false;
  std::vector<NuisanceRecord> nuisance;
  std::vector<std::string> warnings;
};

// sqrt(sum v_i^2 psi_i^2): sd(psi)/sqrt(n) for v = 1/n, the survey-weighted
// formula otherwise.
inline double analytic_se(const Eigen::VectorXd& psi, const Eigen::VectorXd& v) {
  if (psi.size() < 2) throw ValidationError("analytic SE needs n >= 2");
  if (v.size() != psi.size()) throw DimensionError("influence values and weights differ in length");
  return std::sqrt((v.array().square() * psi.array().square()).sum());
}

inline double analytic_se(const EstimateResult& r) { return analytic_se(r.psi, r.v); }

// Builds EstimateResult from uncentered per-observation scores.
inline EstimateResult finalize_scores(std::string id, const Eigen::VectorXd& score, const Eigen::VectorXd& v) {
  EstimateResult r;
  r.id = std::move(id);
  r.n = static_cast<int>(score.size());
  r.v = v;
  r.lambda_hat = v.dot(score);
  r.psi = score.array() - r.lambda_hat;
  r.se = r.n >= 2 ? analytic_se(r.psi, r.v) : 0.0;
  return r;
}

// Fold-wise nuisance fitting over one design. Each fold's CV design (Gram
// caches) is built once and shared by every response fitted on it; fitted
// regressions are memoized by key so functionals sharing a regression target
// reuse it.
class CrossFitter {
 public:
  CrossFitter(Eigen::MatrixXd design, Eigen::VectorXd omega, FoldPlan plan, CvSettings cv, int threads = 1)
      : x_(std::move(design)), omega_(std::move(omega)), plan_(std::move(plan)), cv_(std::move(cv)), threads_(threads) {
    if (static_cast<Eigen::Index>(plan_.fold.size()) != x_.rows()) throw DimensionError("fold plan does not match the design");
    members_ = plan_.members();
    train_.resize(plan_.K);
    designs_.resize(plan_.K);
    for (int k = 0; k < plan_.K; ++k) {
      std::vector<int> tr;
      if (plan_.K == 1) {
        tr = members_[0];
      } else {
        for (int i = 0; i < static_cast<int>(plan_.fold.size()); ++i)
          if (plan_.fold[i] != k) tr.push_back(i);
      }
      train_[k] = std::move(tr);
    }
  }

  const Eigen::MatrixXd& design() const { return x_; }
  const FoldPlan& plan() const { return plan_; }
  const std::vector<std::vector<int>>& members() const { return members_; }
  const std::vector<int>& training_rows(int k) const { return train_[k]; }
  int folds() const { return plan_.K; }
  int threads() const { return threads_; }

  struct Fits {
    std::vector<Eigen::VectorXd> coef;  // one per fold
    std::vector<double> alpha;
  };

  // Regression of `response` on the design, fold by fold; memoized by key
  // when the key is nonempty.
  const Fits& regression(const std::string& key, const Eigen::VectorXd& response) {
    if (!key.empty()) {
      auto it = cache_.find(key);
      if (it != cache_.end()) return *it->second;
    }
    auto fits = std::make_shared<Fits>(run([&](int) { return response; }, nullptr));
    if (key.empty()) {
      scratch_ = fits;
      return *scratch_;
    }
    return *(cache_[key] = fits);
  }

  // Regression whose response depends on the fold (e.g. built from fold fits).
  Fits regression_per_fold(const std::function<Eigen::VectorXd(int)>& response) { return run(response, nullptr); }

  Fits riesz(const Eigen::MatrixXd& targets) { return run(nullptr, &targets); }

  // Memoized Riesz fit; the key must determine the targets.
  const Fits& riesz(const std::string& key, const Eigen::MatrixXd& targets) {
    if (key.empty()) {
      riesz_scratch_ = std::make_shared<Fits>(run(nullptr, &targets));
      return *riesz_scratch_;
    }
    auto it = riesz_cache_.find(key);
    if (it != riesz_cache_.end()) return *it->second;
    return *(riesz_cache_[key] = std::make_shared<Fits>(run(nullptr, &targets)));
  }

  // Riesz fit whose targets depend on the fold.
  Fits riesz_per_fold(const std::function<Eigen::MatrixXd(int)>& targets) {
    Fits out;
    out.coef.resize(plan_.K);
    out.alpha.resize(plan_.K);
    for (int k = 0; k < plan_.K; ++k) ensure_design(k);
    parallel_for(plan_.K, threads_, [&](std::size_t kk) {
      const int k = static_cast<int>(kk);
      Eigen::MatrixXd t = subset_rows(targets(k), train_[k]);
      LassoFit f = designs_[k]->fit_riesz(t);
      out.coef[k] = f.coefficients;
      out.alpha[k] = f.penalty;
    });
    return out;
  }

 private:
  template <class M>
  static M subset_rows(const M& src, const std::vector<int>& rows) {
    M out(rows.size(), src.cols());
    for (std::size_t a = 0; a < rows.size(); ++a) out.row(a) = src.row(rows[a]);
    return out;
  }

  void ensure_design(int k) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (designs_[k]) return;
    const auto& tr = train_[k];
    Eigen::MatrixXd xk = subset_rows(x_, tr);
    Eigen::VectorXd wk(tr.size());
    for (std::size_t a = 0; a < tr.size(); ++a) wk(a) = omega_(tr[a]);
    const double s = wk.sum();
    if (!(s > 0.0)) throw DataError("training set of fold " + std::to_string(k) + " has zero total weight");
    wk /= s;
    CvSettings cv = cv_;
    cv.seed = cv_.seed ^ (0x632be59bd9b4e019ULL * static_cast<std::uint64_t>(k + 1));
    designs_[k] = std::make_shared<CvDesign>(std::move(xk), std::move(wk), cv);
  }

  Fits run(const std::function<Eigen::VectorXd(int)>& response, const Eigen::MatrixXd* targets) {
    Fits out;
    out.coef.resize(plan_.K);
    out.alpha.resize(plan_.K);
    for (int k = 0; k < plan_.K; ++k) ensure_design(k);
    parallel_for(plan_.K, threads_, [&](std::size_t kk) {
      const int k = static_cast<int>(kk);
      LassoFit f;
      if (response) {
        Eigen::VectorXd y = response(k);
        Eigen::VectorXd yk(train_[k].size());
        for (std::size_t a = 0; a < train_[k].size(); ++a) yk(a) = y(train_[k][a]);
        f = designs_[k]->fit_regression(yk);
      } else {
        f = designs_[k]->fit_riesz(subset_rows(*targets, train_[k]));
      }
      out.coef[k] = f.coefficients;
      out.alpha[k] = f.penalty;
    });
    return out;
  }

  Eigen::MatrixXd x_;
  Eigen::VectorXd omega_;
  FoldPlan plan_;
  CvSettings cv_;
  int threads_ = 1;
  std::vector<std::vector<int>> members_;
  std::vector<std::vector<int>> train_;
  std::vector<std::shared_ptr<CvDesign>> designs_;
  std::map<std::string, std::shared_ptr<Fits>> cache_;
  std::map<std::string, std::shared_ptr<Fits>> riesz_cache_;
  std::shared_ptr<Fits> scratch_;
  std::shared_ptr<Fits> riesz_scratch_;
  std::mutex mutex_;
};

// One summand of a double-robust score:
//   kappa_i * (R_i - pred_i) + plugin_i
// with pred_i = b_i'beta + pred_offset_i, kappa_i = b_i'gamma + riesz_offset_i
// and plugin_i = M_i'beta + plugin_offset_i. Offsets are the hooks used to
// replace a nuisance by a fixed function.
struct DrTerm {
  std::string name;
  std::string regression_key;
  std::string riesz_key;  // empty: not memoized
  Eigen::VectorXd response;
  Eigen::MatrixXd targets;
  Eigen::VectorXd pred_offset;
  Eigen::VectorXd plugin_offset;
  Eigen::VectorXd riesz_offset;
};

inline EstimateResult dr_estimate(CrossFitter& cf, const std::vector<DrTerm>& terms, const Eigen::VectorXd& omega,
                                  std::string id) {
  const Eigen::MatrixXd& b = cf.design();
  const Eigen::Index n = b.rows();
  Eigen::VectorXd score = Eigen::VectorXd::Zero(n);
  std::vector<NuisanceRecord> records;
  for (const auto& term : terms) {
    if (term.response.size() != n || term.targets.rows() != n || term.targets.cols() != b.cols())
      throw DimensionError("score term '" + term.name + "' does not match the design");
    const CrossFitter::Fits& reg = cf.regression(term.regression_key, term.response);
    const CrossFitter::Fits& rz = cf.riesz(term.riesz_key, term.targets);
    for (int k = 0; k < cf.folds(); ++k) {
      records.push_back({term.name + ":regression", k, reg.alpha[k]});
      records.push_back({term.name + ":riesz", k, rz.alpha[k]});
      for (int i : cf.members()[k]) {
        double pred = b.row(i).dot(reg.coef[k]);
        double kap = b.row(i).dot(rz.coef[k]);
        double plug = term.targets.row(i).dot(reg.coef[k]);
        if (term.pred_offset.size()) pred += term.pred_offset(i);
        if (term.riesz_offset.size()) kap += term.riesz_offset(i);
        if (term.plugin_offset.size()) plug += term.plugin_offset(i);
        score(i) += kap * (term.response(i) - pred) + plug;
      }
    }
  }
  EstimateResult r = finalize_scores(std::move(id), score, omega);
  r.K = cf.folds();
  r.fold_seed = cf.plan().seed;
  r.nuisance = std::move(records);
  return r;
}

}  // namespace poforge
