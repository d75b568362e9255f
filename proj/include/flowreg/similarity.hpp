#pragma once

#include <algorithm>

#include "flowreg/grid.hpp"

namespace flowreg {

// Local NCC window geometry. A window spans `window` samples per axis taken
// every `dilation` voxels, so its footprint is (window-1)*dilation+1 voxels
// wide. Placements start at index 0 and advance by `stride`; placements whose
// footprint exceeds the domain are dropped.
struct LnccConfig {
  int window = 2;
  int stride = 1;
  int dilation = 1;

  void validate() const {
    require(window >= 2, "LnccConfig: window must be >= 2");
    require(stride >= 1, "LnccConfig: stride must be >= 1");
    require(dilation >= 1, "LnccConfig: dilation must be >= 1");
  }
  int footprint() const { return (window - 1) * dilation + 1; }
};

struct MkLnccTerm {
  double weight = 1.0;
  LnccConfig cfg;
};

// Multi-kernel local NCC: a convex combination of LNCC terms at different
// window sizes.
struct MkLnccConfig {
  std::vector<MkLnccTerm> terms;

  void validate() const {
    require(!terms.empty(), "MkLnccConfig: needs at least one term");
    double sum = 0.0;
    for (const auto& t : terms) {
      require(t.weight >= 0.0, "MkLnccConfig: weights must be nonnegative");
      t.cfg.validate();
      sum += t.weight;
    }
    require(std::abs(sum - 1.0) <= 1e-9, "MkLnccConfig: weights must sum to 1");
  }
};

inline constexpr double kLnccEps = 1e-10;

// Weight applied to the (1 - similarity) matching terms when they enter a
// registration objective: 1/sigma^2 for an assumed intensity noise level
// sigma = 0.1 on [0,1]-normalized images. The regularization weights and the
// fixed-step affine descent are balanced against this scale.
inline constexpr double match_weight = 100.0;

namespace detail {

template <int D, class Fn>
inline void for_each_window(const GridSpec<D>& g, const LnccConfig& cfg, Fn&& fn) {
  const int fp = cfg.footprint();
  for (int a = 0; a < D; ++a) {
    if (fp > g.dims[a]) return;  // no placement fits; caller checks emptiness
  }
  std::array<int, D> start{};
  while (true) {
    fn(start);
    int a = 0;
    for (; a < D; ++a) {
      start[a] += cfg.stride;
      if (start[a] + fp - 1 < g.dims[a]) break;
      start[a] = 0;
    }
    if (a == D) return;
  }
}

template <int D>
inline std::int64_t window_count(const GridSpec<D>& g, const LnccConfig& cfg) {
  std::int64_t n = 0;
  for_each_window<D>(g, cfg, [&](const std::array<int, D>&) { ++n; });
  return n;
}

// Five running sums over one window; the centered quantities are formed
// afterwards. Values are O(1) and windows small, so the single-pass
// formulation is well conditioned here.
template <int D>
struct WindowSums {
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  int n = 0;
};

template <int D, class FnSample>
inline void window_samples(const GridSpec<D>& g, const LnccConfig& cfg,
                           const std::array<int, D>& start, FnSample&& fn) {
  const auto st = g.strides();
  std::int64_t base = 0;
  for (int a = 0; a < D; ++a) base += static_cast<std::int64_t>(start[a]) * st[a];
  std::array<int, D> t{};
  while (true) {
    std::int64_t idx = base;
    for (int a = 0; a < D; ++a)
      idx += static_cast<std::int64_t>(t[a]) * cfg.dilation * st[a];
    fn(idx);
    int a = 0;
    for (; a < D; ++a) {
      if (++t[a] < cfg.window) break;
      t[a] = 0;
    }
    if (a == D) return;
  }
}

template <int D>
inline WindowSums<D> window_sums(const GridSpec<D>& g, const LnccConfig& cfg,
                                 const std::array<int, D>& start, const double* x,
                                 const double* y) {
  WindowSums<D> s;
  window_samples<D>(g, cfg, start, [&](std::int64_t idx) {
    const double xv = x[idx];
    const double yv = y[idx];
    s.sx += xv;
    s.sy += yv;
    s.sxx += xv * xv;
    s.syy += yv * yv;
    s.sxy += xv * yv;
    ++s.n;
  });
  return s;
}

struct WindowNcc {
  double u, p, q, denom, ncc;
  bool guarded;  // variance product fell below the floor
};

template <int D>
inline WindowNcc window_ncc(const WindowSums<D>& s) {
  const double n = static_cast<double>(s.n);
  const double u = s.sxy - s.sx * s.sy / n;
  const double p = s.sxx - s.sx * s.sx / n;
  const double q = s.syy - s.sy * s.sy / n;
  const double pq = p * q;
  const bool guarded = !(pq > kLnccEps);
  const double denom = std::sqrt(guarded ? kLnccEps : pq);
  return {u, p, q, denom, u / denom, guarded};
}

template <int D>
inline double lncc_value(const GridSpec<D>& g, const LnccConfig& cfg, const double* x,
                         const double* y) {
  double acc = 0.0;
  std::int64_t count = 0;
  for_each_window<D>(g, cfg, [&](const std::array<int, D>& start) {
    const auto s = window_sums<D>(g, cfg, start, x, y);
    acc += window_ncc<D>(s).ncc;
    ++count;
  });
  require(count > 0, "lncc: no valid window placement for this config/grid");
  return acc / static_cast<double>(count);
}

// Canonical term order: the value is independent of term-list permutation,
// including in the last floating-point bit.
inline std::vector<std::size_t> canonical_term_order(const MkLnccConfig& cfg) {
  std::vector<std::size_t> order(cfg.terms.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ta = cfg.terms[a];
    const auto& tb = cfg.terms[b];
    if (ta.cfg.window != tb.cfg.window) return ta.cfg.window < tb.cfg.window;
    if (ta.cfg.stride != tb.cfg.stride) return ta.cfg.stride < tb.cfg.stride;
    if (ta.cfg.dilation != tb.cfg.dilation) return ta.cfg.dilation < tb.cfg.dilation;
    return ta.weight < tb.weight;
  });
  return order;
}

template <int D>
inline double mk_lncc_value(const GridSpec<D>& g, const MkLnccConfig& cfg, const double* x,
                            const double* y) {
  cfg.validate();
  double acc = 0.0;
  for (std::size_t k : canonical_term_order(cfg)) {
    const auto& t = cfg.terms[k];
    acc += t.weight * lncc_value<D>(g, t.cfg, x, y);
  }
  return acc;
}

}  // namespace detail

// Global Pearson correlation; defined as 0 when either input is constant.
template <int D>
inline double ncc(const ScalarImage<D>& x, const ScalarImage<D>& y) {
  require(x.grid == y.grid, "ncc: images must share a grid");
  const std::size_t n = x.v.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x.v[i];
    my += y.v[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double u = 0, p = 0, q = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x.v[i] - mx;
    const double dy = y.v[i] - my;
    u += dx * dy;
    p += dx * dx;
    q += dy * dy;
  }
  if (p <= 0.0 || q <= 0.0) return 0.0;
  return u / std::sqrt(p * q);
}

// Mean over window placements of the per-window NCC. Windows where the
// variance product underflows the floor contribute their guarded value
// (exactly 0 for a constant window, since the numerator vanishes).
template <int D>
inline double lncc(const ScalarImage<D>& x, const ScalarImage<D>& y, const LnccConfig& cfg) {
  require(x.grid == y.grid, "lncc: images must share a grid");
  cfg.validate();
  return detail::lncc_value<D>(x.grid, cfg, x.v.data(), y.v.data());
}

template <int D>
inline double mk_lncc(const ScalarImage<D>& x, const ScalarImage<D>& y,
                      const MkLnccConfig& cfg) {
  require(x.grid == y.grid, "mk_lncc: images must share a grid");
  return detail::mk_lncc_value<D>(x.grid, cfg, x.v.data(), y.v.data());
}

template <int D>
inline double mse(const ScalarImage<D>& x, const ScalarImage<D>& y) {
  require(x.grid == y.grid, "mse: images must share a grid");
  const std::size_t n = x.v.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x.v[i] - y.v[i];
    acc += d * d;
  }
  return acc / static_cast<double>(n);
}

namespace detail {

// Accumulates coeff * d lncc(x,y)/dx into gx (and symmetrically into gy when
// given). The guard max(eps, p*q) uses the one-sided derivative: zero on the
// floored branch.
template <int D>
inline void lncc_backward(const GridSpec<D>& g, const LnccConfig& cfg, const double* x,
                          const double* y, double coeff, double* gx, double* gy) {
  const std::int64_t count = window_count<D>(g, cfg);
  require(count > 0, "lncc: no valid window placement for this config/grid");
  const double scale = coeff / static_cast<double>(count);
  for_each_window<D>(g, cfg, [&](const std::array<int, D>& start) {
    const auto s = window_sums<D>(g, cfg, start, x, y);
    const auto w = window_ncc<D>(s);
    const double n = static_cast<double>(s.n);
    const double mx = s.sx / n;
    const double my = s.sy / n;
    const double inv_denom = 1.0 / w.denom;
    // d ncc/d g contribution vanishes when the floor is active.
    const double gu = w.guarded ? 0.0 : w.ncc / (w.p * w.q);
    window_samples<D>(g, cfg, start, [&](std::int64_t idx) {
      const double dx = x[idx] - mx;
      const double dy = y[idx] - my;
      if (gx) gx[idx] += scale * (dy * inv_denom - gu * w.q * dx);
      if (gy) gy[idx] += scale * (dx * inv_denom - gu * w.p * dy);
    });
  });
}

template <int D>
inline void mk_lncc_backward(const GridSpec<D>& g, const MkLnccConfig& cfg, const double* x,
                             const double* y, double coeff, double* gx, double* gy) {
  for (const auto& t : cfg.terms)
    lncc_backward<D>(g, t.cfg, x, y, coeff * t.weight, gx, gy);
}

}  // namespace detail

}  // namespace flowreg
