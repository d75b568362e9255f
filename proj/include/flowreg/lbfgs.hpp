#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <vector>

#include "flowreg/grid.hpp"

// Limited-memory BFGS with a strong-Wolfe line search. The objective is a
// callback f(x, grad) -> value that always fills the gradient; every line
// search trial uses one callback evaluation. Accepted iterations strictly
// decrease the objective, so the reported trace is non-increasing; when the
// line search cannot satisfy the Wolfe conditions within its evaluation
// budget, the optimizer falls back to a short steepest-descent step and
// resets the curvature memory.

namespace flowreg {

struct LbfgsConfig {
  int memory = 10;
  double c1 = 1e-4;  // sufficient-decrease constant
  double c2 = 0.9;   // curvature constant
  int max_line_search_evals = 20;
  double fallback_step = 1e-3;
  int fallback_halvings = 5;
  double grad_tolerance = 1e-10;  // stop when the gradient inf-norm drops below
};

struct LbfgsReport {
  std::vector<double> trace;  // objective at start plus after each accepted iteration
  int evaluations = 0;
  int fallbacks = 0;
  bool converged = false;  // gradient tolerance reached or no further decrease possible
};

using LbfgsObjective = std::function<double(const double*, double*)>;

inline LbfgsReport lbfgs_minimize(const LbfgsObjective& fg, std::vector<double>& x,
                                  int max_iters, const LbfgsConfig& cfg = {}) {
  const std::size_t n = x.size();
  LbfgsReport rep;
  std::vector<double> g(n), x_new(n), g_new(n), d(n);
  std::deque<std::pair<std::vector<double>, std::vector<double>>> mem;  // (s, y)

  auto eval = [&](const double* xv, double* gv) {
    ++rep.evaluations;
    const double f = fg(xv, gv);
    require(std::isfinite(f), "lbfgs: non-finite objective value");
    return f;
  };

  double f = eval(x.data(), g.data());
  rep.trace.push_back(f);

  auto inf_norm = [&](const std::vector<double>& v) {
    double m = 0.0;
    for (const double t : v) m = std::max(m, std::fabs(t));
    return m;
  };

  for (int iter = 0; iter < max_iters; ++iter) {
    if (inf_norm(g) <= cfg.grad_tolerance) {
      rep.converged = true;
      break;
    }

    // Two-loop recursion: d = -H g.
    d = g;
    std::vector<double> alpha_mem(mem.size());
    for (std::size_t k = mem.size(); k-- > 0;) {
      const auto& [s, y] = mem[k];
      double sy = 0.0, sd = 0.0;
      for (std::size_t i = 0; i < n; ++i) sy += s[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) sd += s[i] * d[i];
      const double a = sd / sy;
      alpha_mem[k] = a;
      for (std::size_t i = 0; i < n; ++i) d[i] -= a * y[i];
    }
    if (!mem.empty()) {
      const auto& [s, y] = mem.back();
      double sy = 0.0, yy = 0.0;
      for (std::size_t i = 0; i < n; ++i) sy += s[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) yy += y[i] * y[i];
      const double gamma = sy / yy;
      for (std::size_t i = 0; i < n; ++i) d[i] *= gamma;
    }
    for (std::size_t k = 0; k < mem.size(); ++k) {
      const auto& [s, y] = mem[k];
      double sy = 0.0, yd = 0.0;
      for (std::size_t i = 0; i < n; ++i) sy += s[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) yd += y[i] * d[i];
      const double beta = yd / sy;
      for (std::size_t i = 0; i < n; ++i) d[i] += (alpha_mem[k] - beta) * s[i];
    }
    for (std::size_t i = 0; i < n; ++i) d[i] = -d[i];

    double dg = 0.0;
    for (std::size_t i = 0; i < n; ++i) dg += d[i] * g[i];
    if (!(dg < 0.0)) {  // not a descent direction; drop the memory
      mem.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
      dg = 0.0;
      for (std::size_t i = 0; i < n; ++i) dg += d[i] * g[i];
      if (!(dg < 0.0)) {
        rep.converged = true;  // gradient is numerically zero
        break;
      }
    }

    // Strong-Wolfe line search (bracket, then bisection zoom). Trials share
    // one evaluation budget.
    const double f0 = f;
    const double dphi0 = dg;
    const std::vector<double> g_prev = g;
    double alpha = (iter == 0 || mem.empty())
                       ? std::min(1.0, 1.0 / std::max(1.0, inf_norm(g)))
                       : 1.0;
    int evals_left = cfg.max_line_search_evals;
    bool found = false;
    double best_alpha = 0.0, best_f = f0;  // best Armijo-satisfying trial seen
    bool have_best = false;
    std::vector<double> best_x, best_g;

    auto phi = [&](double a, double& dphi) {
      for (std::size_t i = 0; i < n; ++i) x_new[i] = x[i] + a * d[i];
      const double fv = eval(x_new.data(), g_new.data());
      dphi = 0.0;
      for (std::size_t i = 0; i < n; ++i) dphi += g_new[i] * d[i];
      --evals_left;
      if (fv <= f0 + cfg.c1 * a * dphi0 && (!have_best || fv < best_f)) {
        have_best = true;
        best_alpha = a;
        best_f = fv;
        best_x = x_new;
        best_g = g_new;
      }
      return fv;
    };

    double lo = 0.0, hi = 0.0;         // zoom bracket
    double f_lo = f0;                  // value at lo
    double alpha_prev = 0.0, f_prev = f0;
    bool bracketed = false;
    while (evals_left > 0) {
      double dphi;
      const double fv = phi(alpha, dphi);
      if (fv > f0 + cfg.c1 * alpha * dphi0 || (alpha_prev > 0.0 && fv >= f_prev)) {
        lo = alpha_prev;
        f_lo = f_prev;
        hi = alpha;
        bracketed = true;
        break;
      }
      if (std::fabs(dphi) <= -cfg.c2 * dphi0) {
        found = true;
        f = fv;
        x.swap(x_new);
        break;
      }
      if (dphi >= 0.0) {
        lo = alpha;
        f_lo = fv;
        hi = alpha_prev;
        bracketed = true;
        break;
      }
      alpha_prev = alpha;
      f_prev = fv;
      alpha *= 2.0;
    }
    if (bracketed && !found) {
      while (evals_left > 0) {
        const double mid = 0.5 * (lo + hi);
        double dphi;
        const double fv = phi(mid, dphi);
        if (fv > f0 + cfg.c1 * mid * dphi0 || fv >= f_lo) {
          hi = mid;
        } else {
          if (std::fabs(dphi) <= -cfg.c2 * dphi0) {
            found = true;
            alpha = mid;
            f = fv;
            x.swap(x_new);
            break;
          }
          if (dphi * (hi - lo) >= 0.0) hi = lo;
          lo = mid;
          f_lo = fv;
        }
        if (hi == lo) break;
      }
    }

    if (found) {
      g.swap(g_new);
    } else if (have_best) {
      // Budget exhausted but a sufficient-decrease point exists: take it.
      f = best_f;
      x = best_x;
      g = best_g;
      alpha = best_alpha;
      found = true;
    }

    if (!found) {
      // Steepest-descent fallback with a fixed small step (displacement
      // capped at fallback_step per component), halved until the objective
      // decreases. Curvature memory is no longer trustworthy.
      ++rep.fallbacks;
      mem.clear();
      double step = cfg.fallback_step / std::max(1.0, inf_norm(g));
      bool improved = false;
      for (int h = 0; h <= cfg.fallback_halvings; ++h) {
        for (std::size_t i = 0; i < n; ++i) x_new[i] = x[i] - step * g[i];
        const double fv = eval(x_new.data(), g_new.data());
        if (fv < f) {
          f = fv;
          x.swap(x_new);
          g.swap(g_new);
          improved = true;
          break;
        }
        step *= 0.5;
      }
      if (!improved) {
        rep.converged = true;  // no descent achievable at this precision
        break;
      }
      rep.trace.push_back(f);
      continue;  // fresh memory, next iteration builds from steepest descent
    }

    // Curvature pair from the accepted step; skipped when it cannot keep the
    // inverse-Hessian approximation positive definite.
    std::vector<double> s(n), y(n);
    double sy = 0.0, ss = 0.0, yy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = alpha * d[i];
      y[i] = g[i] - g_prev[i];
      sy += s[i] * y[i];
      ss += s[i] * s[i];
      yy += y[i] * y[i];
    }
    if (sy > 1e-10 * std::sqrt(ss) * std::sqrt(yy)) {
      mem.emplace_back(std::move(s), std::move(y));
      if (static_cast<int>(mem.size()) > cfg.memory) mem.pop_front();
    }
    rep.trace.push_back(f);
  }

  return rep;
}

}  // namespace flowreg
