#pragma once

#include "flowreg/grid.hpp"
#include "flowreg/smoothing.hpp"

namespace flowreg {

namespace detail {

// Shared interpolation setup. Coordinates are converted to voxel units,
// snapped to the lattice when within 1e-9 voxels (so sampling a map at its
// own lattice reproduces stored values bitwise), then clamped to the domain.
// clamped[a] marks axes where the position-derivative is defined as zero:
// outside the domain and, by documented subgradient choice, exactly on the
// boundary planes.
template <int D>
struct InterpPoint {
  std::int64_t base = 0;
  std::array<double, D> f{};
  std::array<bool, D> zero_grad{};
  std::array<double, D> inv_h{};
  std::array<std::int64_t, D> stride{};
};

template <int D>
inline InterpPoint<D> interp_prep(const GridSpec<D>& g, const std::array<double, D>& p) {
  InterpPoint<D> ip;
  const auto st = g.strides();
  for (int a = 0; a < D; ++a) {
    const int n = g.dims[a];
    const double h = g.spacing(a);
    double u = p[a] / h;
    const double r = std::nearbyint(u);
    if (std::abs(u - r) < 1e-9) u = r;
    bool zg = false;
    if (u <= 0.0) {
      if (u < 0.0) u = 0.0;
      zg = true;
    } else if (u >= static_cast<double>(n - 1)) {
      if (u > static_cast<double>(n - 1)) u = static_cast<double>(n - 1);
      zg = true;
    } else if (!(u > 0.0)) {
      // NaN coordinate (corrupt input): clamp deterministically instead of
      // feeding an unspecified int conversion into the index arithmetic.
      u = 0.0;
      zg = true;
    }
    int i0 = static_cast<int>(u);
    if (i0 > n - 2) i0 = n - 2;
    ip.base += static_cast<std::int64_t>(i0) * st[a];
    ip.f[a] = u - static_cast<double>(i0);
    ip.zero_grad[a] = zg;
    ip.inv_h[a] = 1.0 / h;
    ip.stride[a] = st[a];
  }
  return ip;
}

template <int D>
inline double interp_gather(const InterpPoint<D>& ip, const double* ch) {
  double acc = 0.0;
  for (int m = 0; m < (1 << D); ++m) {
    double w = 1.0;
    std::int64_t idx = ip.base;
    for (int a = 0; a < D; ++a) {
      if (m & (1 << a)) {
        w *= ip.f[a];
        idx += ip.stride[a];
      } else {
        w *= 1.0 - ip.f[a];
      }
    }
    acc += w * ch[idx];
  }
  return acc;
}

// Value plus derivative of the sampled value w.r.t. the normalized position.
template <int D>
inline double interp_gather_grad(const InterpPoint<D>& ip, const double* ch,
                                 std::array<double, D>& dval_dp) {
  double acc = 0.0;
  for (int a = 0; a < D; ++a) dval_dp[a] = 0.0;
  for (int m = 0; m < (1 << D); ++m) {
    double w = 1.0;
    std::int64_t idx = ip.base;
    for (int a = 0; a < D; ++a) {
      if (m & (1 << a)) {
        w *= ip.f[a];
        idx += ip.stride[a];
      } else {
        w *= 1.0 - ip.f[a];
      }
    }
    const double val = ch[idx];
    acc += w * val;
    for (int a = 0; a < D; ++a) {
      double dw = (m & (1 << a)) ? 1.0 : -1.0;
      for (int b = 0; b < D; ++b) {
        if (b == a) continue;
        dw *= (m & (1 << b)) ? ip.f[b] : 1.0 - ip.f[b];
      }
      dval_dp[a] += dw * val;
    }
  }
  for (int a = 0; a < D; ++a)
    dval_dp[a] = ip.zero_grad[a] ? 0.0 : dval_dp[a] * ip.inv_h[a];
  return acc;
}

// Adjoint of interp_gather w.r.t. the sampled channel: scatter-add.
template <int D>
inline void interp_scatter(const InterpPoint<D>& ip, double w_in, double* ch_adj) {
  for (int m = 0; m < (1 << D); ++m) {
    double w = w_in;
    std::int64_t idx = ip.base;
    for (int a = 0; a < D; ++a) {
      if (m & (1 << a)) {
        w *= ip.f[a];
        idx += ip.stride[a];
      } else {
        w *= 1.0 - ip.f[a];
      }
    }
    ch_adj[idx] += w;
  }
}

template <int D>
inline std::array<double, D> map_point(const TransformMap<D>& m, std::int64_t i) {
  std::array<double, D> p{};
  for (int a = 0; a < D; ++a) p[a] = m.ch(a)[i];
  return p;
}

}  // namespace detail

// Clamped multilinear sample of a scalar image at a normalized coordinate.
template <int D>
inline double sample(const ScalarImage<D>& img, const std::array<double, D>& p) {
  const auto ip = detail::interp_prep<D>(img.grid, p);
  return detail::interp_gather<D>(ip, img.v.data());
}

// out(x) = img(map(x)), defined on the map's grid.
template <int D>
inline ScalarImage<D> warp(const ScalarImage<D>& img, const TransformMap<D>& map) {
  ScalarImage<D> out(map.grid);
  const std::int64_t n = map.grid.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto ip = detail::interp_prep<D>(img.grid, detail::map_point(map, i));
    out.v[static_cast<std::size_t>(i)] = detail::interp_gather<D>(ip, img.v.data());
  }
  return out;
}

// Nearest-neighbour label warp; ties round half away from zero.
template <int D>
inline LabelImage<D> warp_labels(const LabelImage<D>& labels, const TransformMap<D>& map) {
  LabelImage<D> out(map.grid);
  const auto st = labels.grid.strides();
  const std::int64_t n = map.grid.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t idx = 0;
    for (int a = 0; a < D; ++a) {
      const double u = map.ch(a)[i] / labels.grid.spacing(a);
      long k = std::lround(u);
      if (k < 0) k = 0;
      if (k > labels.grid.dims[a] - 1) k = labels.grid.dims[a] - 1;
      idx += static_cast<std::int64_t>(k) * st[a];
    }
    out.v[static_cast<std::size_t>(i)] = labels.v[static_cast<std::size_t>(idx)];
  }
  return out;
}

// (outer o inner)(x) = outer(inner(x)); the result lives on inner's grid.
template <int D>
inline TransformMap<D> compose(const TransformMap<D>& outer, const TransformMap<D>& inner) {
  TransformMap<D> out(inner.grid);
  const std::int64_t n = inner.grid.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto ip = detail::interp_prep<D>(outer.grid, detail::map_point(inner, i));
    for (int c = 0; c < D; ++c)
      out.ch(c)[i] = detail::interp_gather<D>(ip, outer.ch(c));
  }
  return out;
}

namespace detail {

template <int D>
inline void resample_channels(const GridSpec<D>& src_grid, const double* const* src,
                              const GridSpec<D>& dst_grid, double* const* dst, int nch) {
  std::array<double, D> h{};
  for (int a = 0; a < D; ++a) h[a] = dst_grid.spacing(a);
  for_each_voxel(dst_grid, [&](const std::array<int, D>& c, std::int64_t i) {
    std::array<double, D> p{};
    for (int a = 0; a < D; ++a) p[a] = c[a] * h[a];
    const auto ip = interp_prep<D>(src_grid, p);
    for (int k = 0; k < nch; ++k) dst[k][i] = interp_gather<D>(ip, src[k]);
  });
}

}  // namespace detail

// Map resampling: the new grid covers the same normalized extent; values are
// absolute coordinates so no rescaling is applied. Resampling onto the same
// grid reproduces the input (lattice snap), so it short-circuits to a copy.
template <int D>
inline TransformMap<D> resample_map(const TransformMap<D>& map, const GridSpec<D>& new_grid) {
  if (map.grid == new_grid) return map;
  TransformMap<D> out(new_grid);
  const double* src[D];
  double* dst[D];
  for (int c = 0; c < D; ++c) {
    src[c] = map.ch(c);
    dst[c] = out.ch(c);
  }
  detail::resample_channels<D>(map.grid, src, new_grid, dst, D);
  return out;
}

template <int D>
inline VectorField<D> resample_field(const VectorField<D>& f, const GridSpec<D>& new_grid) {
  VectorField<D> out(new_grid);
  const double* src[D];
  double* dst[D];
  for (int c = 0; c < D; ++c) {
    src[c] = f.ch(c);
    dst[c] = out.ch(c);
  }
  detail::resample_channels<D>(f.grid, src, new_grid, dst, D);
  return out;
}

template <int D>
inline ScalarImage<D> resample_image(const ScalarImage<D>& img, const GridSpec<D>& new_grid) {
  ScalarImage<D> out(new_grid);
  const double* src[1] = {img.v.data()};
  double* dst[1] = {out.v.data()};
  detail::resample_channels<D>(img.grid, src, new_grid, dst, 1);
  return out;
}

// Anti-aliased downsampling: Gaussian pre-smoothing with
// sigma = 0.4*(1/factor - 1) voxels per axis, then multilinear decimation
// onto the rescaled grid. factor == 1 returns the image unchanged.
template <int D>
inline ScalarImage<D> downsample_image(const ScalarImage<D>& img, double factor) {
  require(factor > 0.0 && factor <= 1.0, "downsample_image: factor must be in (0,1]");
  if (factor == 1.0) return img;
  const double sv = 0.4 * (1.0 / factor - 1.0);
  ScalarImage<D> blurred(img.grid);
  std::array<double, D> sigma{};
  for (int a = 0; a < D; ++a) sigma[a] = sv;
  detail::gaussian_blur_channel<D>(img.grid, img.v.data(), sigma, blurred.v.data());
  return resample_image(blurred, img.grid.scaled(factor));
}

}  // namespace flowreg
