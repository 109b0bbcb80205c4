#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "priorecon/ad/graph.hpp"

namespace priorecon::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// Relative error with a floor on the denominator so that near-zero gradients
// are compared absolutely.
inline double rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central differences of `f` w.r.t. the given leaf values.
inline GradCheckResult check_input_gradients(
    const std::function<ad::Var(ad::Graph &, const std::vector<ad::Var> &)> &f, std::vector<ad::Shape> shapes,
    std::vector<std::vector<double>> values, double h = 1e-6, double floor = 1e-6) {
  std::vector<std::vector<double>> analytic;
  {
    ad::Graph g;
    std::vector<ad::Var> vars;
    for (std::size_t i = 0; i < values.size(); ++i) vars.push_back(g.variable(shapes[i], values[i]));
    auto out = f(g, vars);
    g.backward(out);
    for (auto &v : vars) {
      auto gr = g.grad(v);
      analytic.emplace_back(gr.begin(), gr.end());
      if (analytic.back().empty()) analytic.back().assign(v.size(), 0.0);
    }
  }
  auto eval = [&](const std::vector<std::vector<double>> &vals) {
    ad::Graph g;
    std::vector<ad::Var> vars;
    for (std::size_t i = 0; i < vals.size(); ++i) vars.push_back(g.constant(shapes[i], vals[i]));
    return f(g, vars).item();
  };
  GradCheckResult res;
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t j = 0; j < values[i].size(); ++j) {
      auto plus = values, minus = values;
      plus[i][j] += h;
      minus[i][j] -= h;
      const double num = (eval(plus) - eval(minus)) / (2.0 * h);
      res.max_rel_error = std::max(res.max_rel_error, rel_error(analytic[i][j], num, floor));
      res.max_abs_error = std::max(res.max_abs_error, std::abs(analytic[i][j] - num));
      ++res.checked;
    }
  return res;
}

// Central differences of a scalar loss w.r.t. every parameter entry.
inline GradCheckResult check_parameter_gradients(ad::ParameterSet &params,
                                                 const std::function<ad::Var(ad::Graph &)> &loss, double h = 3e-6,
                                                 double floor = 1e-6, std::size_t stride = 1) {
  std::vector<std::vector<double>> analytic;
  {
    ad::Graph g;
    auto out = loss(g);
    g.backward(out);
    for (auto &p : params.items()) {
      auto gr = g.param_grad(p);
      analytic.emplace_back(gr.begin(), gr.end());
      if (analytic.back().empty()) analytic.back().assign(p.value.size(), 0.0);
    }
  }
  GradCheckResult res;
  std::size_t pi = 0;
  std::size_t counter = 0;
  for (auto &p : params.items()) {
    for (std::size_t j = 0; j < p.value.size(); ++j, ++counter) {
      if (counter % stride != 0) continue;
      const double orig = p.value[j];
      auto at = [&](double offset) {
        p.value[j] = orig + offset;
        ad::Graph g;
        return loss(g).item();
      };
      // Fourth-order central stencil.
      const double num = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      p.value[j] = orig;
      const double e = rel_error(analytic[pi][j], num, floor);
      if (e > res.max_rel_error) {
        res.max_rel_error = e;
        res.worst_analytic = analytic[pi][j];
        res.worst_numeric = num;
      }
      res.max_abs_error = std::max(res.max_abs_error, std::abs(analytic[pi][j] - num));
      ++res.checked;
    }
    ++pi;
  }
  return res;
}

} // namespace priorecon::testing
