#pragma once

#include <random>
#include <vector>

#include <Eigen/Dense>

#include "poforge/dataset.hpp"
#include "poforge/simulate.hpp"

namespace poforge::testing {

// Exact finite population of a discrete simulation spec: one row per
// (cell, z, t) with positive mass, weighted by P(x) P(z|x) P(T=t|z,x), and y
// set to E[Y | T=t, Z=z, X=x]. Linear functionals of rho(Y) = Y evaluated on
// this weighted dataset equal their population values.
struct Population {
  Dataset data;
  std::vector<int> cell;  // covariate cell of each row
};

inline Population population_dataset(const DgpSpec& spec) {
  const int d = spec.model.d(), q = spec.model.q(), r = spec.model.r(), m = spec.m();
  Eigen::MatrixXi assign = spec.model.assignment_indices();
  std::vector<double> mass = target_cell_masses(spec);
  std::vector<double> y, w;
  std::vector<int> t, z, cell;
  std::vector<std::vector<double>> x;
  for (std::size_t c = 0; c < spec.cells.size(); ++c) {
    const auto& cl = spec.cells[c];
    for (int j = 0; j < q; ++j) {
      for (int tt = 0; tt < d; ++tt) {
        double p = 0.0, ey = 0.0;
        for (int i = 0; i < r; ++i) {
          if (assign(i, j) != tt) continue;
          p += cl.type_probs[i];
          double mu = 0.0;
          for (const auto& comp : spec.outcomes[c][i][tt]) mu += comp.weight * comp.mean;
          ey += cl.type_probs[i] * mu;
        }
        if (p <= 0.0) continue;
        y.push_back(ey / p);
        w.push_back(mass[c] * cl.pz[j] * p);
        t.push_back(tt);
        z.push_back(j);
        cell.push_back(static_cast<int>(c));
        x.push_back(cl.x);
      }
    }
  }
  Population pop;
  const int n = static_cast<int>(y.size());
  pop.data.y = Eigen::Map<Eigen::VectorXd>(y.data(), n);
  pop.data.t = Eigen::Map<Eigen::VectorXi>(t.data(), n);
  pop.data.z = Eigen::Map<Eigen::VectorXi>(z.data(), n);
  pop.data.omega = Eigen::Map<Eigen::VectorXd>(w.data(), n);
  pop.data.omega /= pop.data.omega.sum();
  pop.data.x.resize(n, m);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < m; ++k) pop.data.x(i, k) = x[i][k];
  pop.data.weighted = true;
  pop.cell = cell;
  return pop;
}

// Random n x p design with iid N(0,1) entries and positive weights summing to one.
struct RandomProblem {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  Eigen::VectorXd w;
};

inline RandomProblem random_problem(std::mt19937_64& rng, int n, int p, bool uniform_weights = false) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.2, 1.8);
  RandomProblem pr;
  pr.x.resize(n, p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) pr.x(i, j) = nd(rng);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  for (int j = 0; j < std::min(p, 3); ++j) beta(j) = 1.0 + j;
  pr.y = pr.x * beta;
  for (int i = 0; i < n; ++i) pr.y(i) += nd(rng);
  pr.w.resize(n);
  for (int i = 0; i < n; ++i) pr.w(i) = uniform_weights ? 1.0 : ud(rng);
  pr.w /= pr.w.sum();
  return pr;
}

}  // namespace poforge::testing
