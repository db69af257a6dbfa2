#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poforge/error.hpp"

namespace poforge {

// Expression tree over named component functionals. Leaves reference a
// component by id; inner nodes are ratio, difference, product or affine.
struct Combination {
  enum class Op { ref, constant, ratio, difference, product, affine };

  Op op = Op::ref;
  std::string ref;                 // Op::ref
  double value = 0.0;              // Op::constant, or the affine intercept
  std::vector<Combination> args;   // children
  std::vector<double> coefs;       // Op::affine, one per child

  static Combination of(std::string id) {
    Combination c;
    c.op = Op::ref;
    c.ref = std::move(id);
    return c;
  }
  static Combination constant_(double v) {
    Combination c;
    c.op = Op::constant;
    c.value = v;
    return c;
  }
  static Combination ratio(Combination num, Combination den) {
    Combination c;
    c.op = Op::ratio;
    c.args = {std::move(num), std::move(den)};
    return c;
  }
  static Combination difference(Combination a, Combination b) {
    Combination c;
    c.op = Op::difference;
    c.args = {std::move(a), std::move(b)};
    return c;
  }
  static Combination product(Combination a, Combination b) {
    Combination c;
    c.op = Op::product;
    c.args = {std::move(a), std::move(b)};
    return c;
  }
  static Combination affine(std::vector<Combination> terms, std::vector<double> coefs, double intercept = 0.0) {
    if (terms.size() != coefs.size()) throw DimensionError("affine combination: terms and coefficients differ in length");
    Combination c;
    c.op = Op::affine;
    c.args = std::move(terms);
    c.coefs = std::move(coefs);
    c.value = intercept;
    return c;
  }

  // Every referenced component id, in first-appearance order.
  std::vector<std::string> references() const {
    std::vector<std::string> out;
    collect(out);
    return out;
  }

 private:
  void collect(std::vector<std::string>& out) const {
    if (op == Op::ref) {
      for (const auto& s : out)
        if (s == ref) return;
      out.push_back(ref);
      return;
    }
    for (const auto& a : args) a.collect(out);
  }
};

// Value and gradient with respect to a fixed list of component ids.
struct DualValue {
  double value = 0.0;
  Eigen::VectorXd grad;
};

// Evaluates F at the given component values. Ratio denominators smaller than
// `min_denominator` in absolute value raise an error naming the denominator.
inline double evaluate(const Combination& f, const std::function<double(const std::string&)>& lookup,
                       double min_denominator = 0.0) {
  using Op = Combination::Op;
  switch (f.op) {
    case Op::ref:
      return lookup(f.ref);
    case Op::constant:
      return f.value;
    case Op::ratio: {
      double num = evaluate(f.args[0], lookup, min_denominator);
      double den = evaluate(f.args[1], lookup, min_denominator);
      if (!(std::abs(den) >= min_denominator) || den == 0.0) {
        std::string name = f.args[1].op == Op::ref ? f.args[1].ref : std::string("composite denominator");
        throw NumericalError("ratio denominator '" + name + "' is " + std::to_string(den) +
                             ", below the minimum " + std::to_string(min_denominator));
      }
      return num / den;
    }
    case Op::difference:
      return evaluate(f.args[0], lookup, min_denominator) - evaluate(f.args[1], lookup, min_denominator);
    case Op::product:
      return evaluate(f.args[0], lookup, min_denominator) * evaluate(f.args[1], lookup, min_denominator);
    case Op::affine: {
      double s = f.value;
      for (std::size_t i = 0; i < f.args.size(); ++i) s += f.coefs[i] * evaluate(f.args[i], lookup, min_denominator);
      return s;
    }
  }
  return 0.0;
}

// Forward-mode evaluation; `index` maps each referenced id to a gradient slot.
inline DualValue evaluate_dual(const Combination& f, const std::map<std::string, int>& index,
                               const Eigen::VectorXd& values, double min_denominator = 0.0) {
  using Op = Combination::Op;
  const Eigen::Index g = values.size();
  DualValue out;
  out.grad = Eigen::VectorXd::Zero(g);
  switch (f.op) {
    case Op::ref: {
      auto it = index.find(f.ref);
      if (it == index.end()) throw ValidationError("combination references unknown component '" + f.ref + "'");
      out.value = values(it->second);
      out.grad(it->second) = 1.0;
      return out;
    }
    case Op::constant:
      out.value = f.value;
      return out;
    case Op::ratio: {
      DualValue a = evaluate_dual(f.args[0], index, values, min_denominator);
      DualValue b = evaluate_dual(f.args[1], index, values, min_denominator);
      if (!(std::abs(b.value) >= min_denominator) || b.value == 0.0) {
        std::string name = f.args[1].op == Op::ref ? f.args[1].ref : std::string("composite denominator");
        throw NumericalError("ratio denominator '" + name + "' is " + std::to_string(b.value) +
                             ", below the minimum " + std::to_string(min_denominator));
      }
      out.value = a.value / b.value;
      out.grad = a.grad / b.value - (a.value / (b.value * b.value)) * b.grad;
      return out;
    }
    case Op::difference: {
      DualValue a = evaluate_dual(f.args[0], index, values, min_denominator);
      DualValue b = evaluate_dual(f.args[1], index, values, min_denominator);
      out.value = a.value - b.value;
      out.grad = a.grad - b.grad;
      return out;
    }
    case Op::product: {
      DualValue a = evaluate_dual(f.args[0], index, values, min_denominator);
      DualValue b = evaluate_dual(f.args[1], index, values, min_denominator);
      out.value = a.value * b.value;
      out.grad = a.grad * b.value + b.grad * a.value;
      return out;
    }
    case Op::affine: {
      out.value = f.value;
      for (std::size_t i = 0; i < f.args.size(); ++i) {
        DualValue a = evaluate_dual(f.args[i], index, values, min_denominator);
        out.value += f.coefs[i] * a.value;
        out.grad += f.coefs[i] * a.grad;
      }
      return out;
    }
  }
  return out;
}

}  // namespace poforge
