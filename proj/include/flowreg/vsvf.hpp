#pragma once

#include "flowreg/autodiff.hpp"
#include "flowreg/interp.hpp"
#include "flowreg/similarity.hpp"
#include "flowreg/smoothing.hpp"

// Stationary-velocity-field registration model. A momentum field m0 is
// smoothed into a velocity v0 = K m0, and the inverse map is obtained by
// integrating the advection equation d(phi)/dt + D(phi) v = 0 for unit time.

namespace flowreg {

template <int D>
struct VsvfConfig {
  int n_time_steps = 10;
  MultiGaussianKernel kernel = default_multi_gaussian();
  double lambda_vr = 10.0;
  double lambda_vs = 1e-4;
  // Optional similarity override; empty terms mean "derive from the grid"
  // (two-window config at the finest scale, one-window config below).
  MkLnccConfig similarity{};
  double lowres_factor = 0.5;
  int n_steps = 1;  // sequential refinement passes T

  // Multi-scale optimizer settings.
  std::vector<double> scales{0.25, 0.5, 1.0};
  std::vector<int> iterations{60, 60, 60};

  void validate() const {
    require(n_time_steps >= 1, "VsvfConfig: n_time_steps must be >= 1");
    kernel.validate();
    require(lambda_vr > 0.0, "VsvfConfig: lambda_vr must be positive");
    require(lambda_vs >= 0.0, "VsvfConfig: lambda_vs must be nonnegative");
    require(lowres_factor > 0.0 && lowres_factor <= 1.0,
            "VsvfConfig: lowres_factor must be in (0,1]");
    require(n_steps >= 1, "VsvfConfig: n_steps must be >= 1");
    require(!scales.empty() && scales.size() == iterations.size(),
            "VsvfConfig: scales/iterations must be nonempty and equal length");
    for (std::size_t i = 0; i < scales.size(); ++i) {
      require(scales[i] > 0.0 && scales[i] <= 1.0, "VsvfConfig: scales must be in (0,1]");
      if (i > 0)
        require(scales[i] > scales[i - 1], "VsvfConfig: scales must be strictly increasing");
      require(iterations[i] >= 0, "VsvfConfig: iteration counts must be nonnegative");
    }
    require(scales.back() == 1.0, "VsvfConfig: last scale must be 1.0");
    if (!similarity.terms.empty()) similarity.validate();
  }
};

template <int D>
struct VsvfResult {
  std::vector<VectorField<D>> momenta_st, momenta_ts;  // one per refinement step
  TransformMap<D> map_st, map_ts;                      // full-resolution final maps
  ScalarImage<D> warped;                               // source resampled through map_st
  std::vector<std::vector<double>> traces;             // accepted-iteration losses per stage
  double similarity_st = 0.0, similarity_ts = 0.0;     // final mk-LNCC values
};

// Similarity configuration tied to a grid: window sizes are fractions of the
// smallest dimension S (S/2, and S/4 for the extra finest-scale term), stride
// S/4, dilation 2. Dilation degrades to 1 and the window shrinks if the
// dilated footprint cannot fit the volume.
inline MkLnccConfig make_scale_sim(int min_dim, bool finest, int stride_div = 4,
                                   int dilation = 2) {
  require(min_dim >= 2, "make_scale_sim: smallest dimension must be >= 2");
  const int stride = std::max(1, min_dim / stride_div);
  auto fit = [&](int w) {
    int d = dilation;
    while (d > 1 && (w - 1) * d + 1 > min_dim) --d;
    if (w > min_dim) w = min_dim;
    LnccConfig c;
    c.window = w;
    c.stride = stride;
    c.dilation = d;
    return c;
  };
  MkLnccConfig cfg;
  if (finest) {
    cfg.terms.push_back({0.3, fit(std::max(2, min_dim / 4))});
    cfg.terms.push_back({0.7, fit(std::max(2, min_dim / 2))});
  } else {
    cfg.terms.push_back({1.0, fit(std::max(2, min_dim / 2))});
  }
  cfg.validate();
  return cfg;
}

template <int D>
inline MkLnccConfig make_scale_sim(const GridSpec<D>& g, bool finest) {
  int min_dim = g.dims[0];
  for (int a = 1; a < D; ++a) min_dim = std::min(min_dim, g.dims[a]);
  return make_scale_sim(min_dim, finest);
}

namespace detail {

template <int D>
inline MkLnccConfig effective_sim(const MkLnccConfig& override_cfg, const GridSpec<D>& g,
                                  bool finest) {
  if (!override_cfg.terms.empty()) return override_cfg;
  return make_scale_sim(g, finest);
}

// Squared deviation from the identity map, summed over interior voxels
// (margin dropped on each side of every axis). A plain discrete 2-norm:
// the consistency weight is balanced against the per-voxel sum.
template <int D>
inline double sq_dev_identity(const TransformMap<D>& m, int margin) {
  const auto& g = m.grid;
  for (int a = 0; a < D; ++a)
    require(g.dims[a] > 2 * margin, "sq_dev_identity: margin leaves no interior");
  std::array<double, D> h{};
  for (int a = 0; a < D; ++a) h[a] = g.spacing(a);
  double acc = 0.0;
  for_each_voxel(g, [&](const std::array<int, D>& c, std::int64_t i) {
    for (int a = 0; a < D; ++a)
      if (c[a] < margin || c[a] >= g.dims[a] - margin) return;
    for (int a = 0; a < D; ++a) {
      const double d = m.ch(a)[i] - c[a] * h[a];
      acc += d * d;
    }
  });
  return acc;
}

}  // namespace detail

// Integrates d(phi)/dt = -D(phi) v from t=0 to t=1 with n_steps classical RK4
// substeps. The velocity is stationary. Central differences interior,
// one-sided at the boundary.
template <int D>
inline TransformMap<D> advect_map(const TransformMap<D>& phi0, const VectorField<D>& v,
                                  int n_steps) {
  require(n_steps >= 1, "advect_map: n_steps must be >= 1");
  require(phi0.grid == v.grid, "advect_map: map and velocity must share a grid");
  const auto& g = phi0.grid;
  const std::size_t n = static_cast<std::size_t>(g.voxels());
  const std::size_t nd = n * D;
  const double dt = 1.0 / n_steps;

  TransformMap<D> phi = phi0;
  std::vector<double> k1(nd), k2(nd), k3(nd), k4(nd), x(nd), tmp(n);
  const double* V = v.v.data();
  for (int s = 0; s < n_steps; ++s) {
    double* P = phi.v.data();
    ad::rk4::stage_forward<D>(g, P, V, k1.data(), tmp.data());
    for (std::size_t i = 0; i < nd; ++i) x[i] = P[i] + 0.5 * dt * k1[i];
    ad::rk4::stage_forward<D>(g, x.data(), V, k2.data(), tmp.data());
    for (std::size_t i = 0; i < nd; ++i) x[i] = P[i] + 0.5 * dt * k2[i];
    ad::rk4::stage_forward<D>(g, x.data(), V, k3.data(), tmp.data());
    for (std::size_t i = 0; i < nd; ++i) x[i] = P[i] + dt * k3[i];
    ad::rk4::stage_forward<D>(g, x.data(), V, k4.data(), tmp.data());
    for (std::size_t i = 0; i < nd; ++i)
      P[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    for (std::size_t i = 0; i < nd; ++i)
      require(std::isfinite(P[i]), "advect_map: non-finite value (unstable step size)");
  }
  return phi;
}

// Momentum -> (velocity, map): v0 = K m0, then unit-time advection from the
// initial map. Zero momentum returns the initial map unchanged.
template <int D>
inline std::pair<VectorField<D>, TransformMap<D>> vsvf_unit(const VectorField<D>& m0,
                                                            const TransformMap<D>& init_map,
                                                            const VsvfConfig<D>& cfg) {
  cfg.validate();
  require(m0.grid == init_map.grid, "vsvf_unit: momentum and map must share a grid");
  VectorField<D> v0 = smooth(m0, cfg.kernel);
  TransformMap<D> phi = advect_map(init_map, v0, cfg.n_time_steps);
  return {std::move(v0), std::move(phi)};
}

// Symmetric registration loss. Each direction contributes
// match_weight * (1 - mk_lncc(warp(image, map), other)) + lambda_vr * <m0, v0>,
// and the inverse-consistency term penalizes both composition orders, each
// evaluated on its own grid, averaged so the total is invariant to swapping
// the roles of source and target.
template <int D>
inline double vsvf_loss(const ScalarImage<D>& i0, const ScalarImage<D>& i1,
                        const TransformMap<D>& map_st, const TransformMap<D>& map_ts,
                        const VectorField<D>& m_st, const VectorField<D>& m_ts,
                        const VectorField<D>& v_st, const VectorField<D>& v_ts,
                        const VsvfConfig<D>& cfg) {
  cfg.validate();
  require(i1.grid == map_st.grid, "vsvf_loss: source->target map must live on the target grid");
  require(i0.grid == map_ts.grid, "vsvf_loss: target->source map must live on the source grid");
  const MkLnccConfig sim_st = detail::effective_sim(cfg.similarity, map_st.grid, true);
  const MkLnccConfig sim_ts = detail::effective_sim(cfg.similarity, map_ts.grid, true);

  const ScalarImage<D> w_st = warp(i0, map_st);
  const ScalarImage<D> w_ts = warp(i1, map_ts);
  const double l_st =
      match_weight * (1.0 - mk_lncc(w_st, i1, sim_st)) + cfg.lambda_vr * reg_inner(m_st, v_st);
  const double l_ts =
      match_weight * (1.0 - mk_lncc(w_ts, i0, sim_ts)) + cfg.lambda_vr * reg_inner(m_ts, v_ts);

  const TransformMap<D> comp_t = compose(map_ts, map_st);  // on the target grid
  const TransformMap<D> comp_s = compose(map_st, map_ts);  // on the source grid
  const double sym = 0.5 * cfg.lambda_vs *
                     (detail::sq_dev_identity(comp_t, 1) + detail::sq_dev_identity(comp_s, 1));
  return (l_st + l_ts) + sym;
}

}  // namespace flowreg
