#pragma once

#include "flowreg/grid.hpp"

namespace flowreg {

// Finite-difference derivative along one axis: central differences in the
// interior, one-sided at the two boundary planes. Operates on a single
// channel laid out per GridSpec::strides.
template <int D>
inline void axis_derivative(const GridSpec<D>& g, const double* in, int axis,
                            double* out) {
  const auto st = g.strides();
  const std::int64_t s = st[axis];
  const int n = g.dims[axis];
  const double h = g.spacing(axis);
  const double inv2h = 1.0 / (2.0 * h);
  const double invh = 1.0 / h;
  for_each_voxel(g, [&](const std::array<int, D>& c, std::int64_t i) {
    const int k = c[axis];
    if (k == 0) {
      out[i] = (in[i + s] - in[i]) * invh;
    } else if (k == n - 1) {
      out[i] = (in[i] - in[i - s]) * invh;
    } else {
      out[i] = (in[i + s] - in[i - s]) * inv2h;
    }
  });
}

// Transpose of axis_derivative as a linear operator: out += A^T * in.
// Implemented by scattering each row's taps, which keeps the two definitions
// in lockstep by construction.
template <int D>
inline void axis_derivative_transpose_accum(const GridSpec<D>& g, const double* in,
                                            int axis, double* out) {
  const auto st = g.strides();
  const std::int64_t s = st[axis];
  const int n = g.dims[axis];
  const double h = g.spacing(axis);
  const double inv2h = 1.0 / (2.0 * h);
  const double invh = 1.0 / h;
  for_each_voxel(g, [&](const std::array<int, D>& c, std::int64_t i) {
    const int k = c[axis];
    const double y = in[i];
    if (k == 0) {
      out[i + s] += y * invh;
      out[i] -= y * invh;
    } else if (k == n - 1) {
      out[i] += y * invh;
      out[i - s] -= y * invh;
    } else {
      out[i + s] += y * inv2h;
      out[i - s] -= y * inv2h;
    }
  });
}

namespace detail {

template <int D>
inline double det(const std::array<std::array<double, D>, D>& m) {
  if constexpr (D == 2) {
    return m[0][0] * m[1][1] - m[0][1] * m[1][0];
  } else {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  }
}

}  // namespace detail

// Pointwise determinant of the map's spatial Jacobian. Positive everywhere on
// orientation-preserving maps; negative entries flag folds.
template <int D>
inline ScalarImage<D> jacobian_determinant(const TransformMap<D>& map) {
  for (int a = 0; a < D; ++a)
    require(map.grid.dims[a] >= 3, "jacobian_determinant: grid too small (need >=3 per axis)");
  const GridSpec<D>& g = map.grid;
  std::vector<std::vector<double>> deriv(static_cast<std::size_t>(D) * D);
  for (int c = 0; c < D; ++c)
    for (int a = 0; a < D; ++a) {
      auto& buf = deriv[static_cast<std::size_t>(c) * D + a];
      buf.resize(static_cast<std::size_t>(g.voxels()));
      axis_derivative(g, map.ch(c), a, buf.data());
    }
  ScalarImage<D> out(g);
  const std::int64_t n = g.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    std::array<std::array<double, D>, D> J{};
    for (int c = 0; c < D; ++c)
      for (int a = 0; a < D; ++a) J[c][a] = deriv[static_cast<std::size_t>(c) * D + a][i];
    out.v[static_cast<std::size_t>(i)] = detail::det<D>(J);
  }
  return out;
}

}  // namespace flowreg
