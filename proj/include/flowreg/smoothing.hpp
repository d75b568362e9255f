#pragma once

#include <cmath>

#include "flowreg/grid.hpp"

namespace flowreg {

// Sum-of-Gaussians smoother acting in normalized coordinates. Weights are a
// convex combination so smoothing a constant returns the constant.
struct MultiGaussianKernel {
  std::vector<double> sigmas;   // normalized units
  std::vector<double> weights;  // nonnegative, sum to 1

  void validate() const {
    require(!sigmas.empty() && sigmas.size() == weights.size(),
            "MultiGaussianKernel: sigma/weight lists must be nonempty and equal length");
    double sum = 0.0;
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
      require(sigmas[i] > 0.0, "MultiGaussianKernel: sigmas must be positive");
      require(weights[i] >= 0.0, "MultiGaussianKernel: weights must be nonnegative");
      sum += weights[i];
    }
    require(std::abs(sum - 1.0) <= 1e-9, "MultiGaussianKernel: weights must sum to 1");
  }
};

inline MultiGaussianKernel default_multi_gaussian() {
  return MultiGaussianKernel{{0.05, 0.10, 0.15, 0.20, 0.25},
                             {0.067, 0.133, 0.200, 0.267, 0.333}};
}

namespace detail {

// Half-sample symmetric fold: ...3 2 1 0 | 0 1 2 3 | 3 2 1 0... This is the
// one reflection convention under which a symmetric kernel yields an exactly
// symmetric (self-adjoint) convolution matrix.
inline int reflect_index(int i, int n) {
  const int p = 2 * n;
  int m = i % p;
  if (m < 0) m += p;
  return m < n ? m : p - 1 - m;
}

// 1D taps for a Gaussian of sigma_vox voxels, truncated at 4*sigma and
// renormalized so the taps sum to exactly 1.
inline std::vector<double> gaussian_taps(double sigma_vox) {
  const int r = std::max(1, static_cast<int>(std::floor(4.0 * sigma_vox)));
  std::vector<double> taps(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int t = -r; t <= r; ++t) {
    const double x = static_cast<double>(t) / sigma_vox;
    const double w = std::exp(-0.5 * x * x);
    taps[static_cast<std::size_t>(t + r)] = w;
    sum += w;
  }
  for (double& w : taps) w /= sum;
  return taps;
}

// Separable pass along one axis with reflect boundary, out = conv(in).
// Lines are gathered into a contiguous scratch buffer so the inner loop is a
// plain dot product regardless of axis stride.
template <int D>
inline void convolve_axis_reflect(const GridSpec<D>& g, const double* in, int axis,
                                  const std::vector<double>& taps, double* out) {
  const int n = g.dims[axis];
  const int r = (static_cast<int>(taps.size()) - 1) / 2;
  const auto st = g.strides();
  const std::int64_t stride = st[axis];

  // Extended line: [r reflected | n samples | r reflected].
  std::vector<double> line(static_cast<std::size_t>(n + 2 * r));

  // Iterate over all lines: voxels with coordinate 0 along `axis`.
  std::int64_t nlines = 1;
  for (int a = 0; a < D; ++a)
    if (a != axis) nlines *= g.dims[a];

  std::array<int, D> c{};
  for (std::int64_t l = 0; l < nlines; ++l) {
    std::int64_t base = 0;
    for (int a = 0; a < D; ++a) base += static_cast<std::int64_t>(c[a]) * st[a];

    for (int k = 0; k < n; ++k) line[static_cast<std::size_t>(r + k)] = in[base + k * stride];
    for (int k = 0; k < r; ++k) {
      line[static_cast<std::size_t>(r - 1 - k)] =
          in[base + reflect_index(-1 - k, n) * stride];
      line[static_cast<std::size_t>(r + n + k)] =
          in[base + reflect_index(n + k, n) * stride];
    }

    for (int k = 0; k < n; ++k) {
      const double* src = line.data() + k;
      double acc = 0.0;
      for (std::size_t t = 0; t < taps.size(); ++t) acc += taps[t] * src[t];
      out[base + k * stride] = acc;
    }

    // Advance to the next line (odometer over the non-axis dims).
    for (int a = 0; a < D; ++a) {
      if (a == axis) continue;
      if (++c[a] < g.dims[a]) break;
      c[a] = 0;
    }
  }
}

// Full separable Gaussian on one channel, sigma given per axis in voxels.
// sigma <= 0 on an axis skips that pass.
template <int D>
inline void gaussian_blur_channel(const GridSpec<D>& g, const double* in,
                                  const std::array<double, D>& sigma_vox, double* out) {
  const std::size_t n = static_cast<std::size_t>(g.voxels());
  std::vector<double> tmp(n);
  const double* src = in;
  double* dst = out;
  bool any = false;
  for (int a = 0; a < D; ++a) {
    if (sigma_vox[a] <= 0.0) continue;
    const auto taps = gaussian_taps(sigma_vox[a]);
    convolve_axis_reflect<D>(g, src, a, taps, dst);
    src = dst;
    dst = (dst == out) ? tmp.data() : out;
    any = true;
  }
  if (!any) {
    for (std::size_t i = 0; i < n; ++i) out[i] = in[i];
  } else if (src != out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = src[i];
  }
}

// One channel through the full multi-Gaussian kernel: out = sum_i w_i G_i(in).
// `work` must hold at least voxels doubles.
template <int D>
inline void multi_gaussian_channel(const GridSpec<D>& g, const double* in,
                                   const MultiGaussianKernel& kernel, double* out,
                                   double* work) {
  const std::size_t n = static_cast<std::size_t>(g.voxels());
  double* blur = work;
  for (std::size_t i = 0; i < n; ++i) out[i] = 0.0;
  for (std::size_t k = 0; k < kernel.sigmas.size(); ++k) {
    std::array<double, D> sv{};
    for (int a = 0; a < D; ++a) sv[a] = kernel.sigmas[k] / g.spacing(a);
    gaussian_blur_channel<D>(g, in, sv, blur);
    const double w = kernel.weights[k];
    for (std::size_t i = 0; i < n; ++i) out[i] += w * blur[i];
  }
}

}  // namespace detail

// v = K m with K = sum_i w_i G(sigma_i), each Gaussian applied separably with
// reflect boundary. Sigmas are normalized units; the per-axis voxel sigma is
// sigma / spacing(axis). The operator is exactly self-adjoint, so the same
// routine implements both K and its adjoint.
template <int D>
inline VectorField<D> smooth(const VectorField<D>& m, const MultiGaussianKernel& kernel) {
  kernel.validate();
  const GridSpec<D>& g = m.grid;
  VectorField<D> out(g);
  std::vector<double> work(static_cast<std::size_t>(g.voxels()));
  for (int c = 0; c < D; ++c)
    detail::multi_gaussian_channel<D>(g, m.ch(c), kernel, out.ch(c), work.data());
  return out;
}

// <m, v> approximated as a normalized-space integral: the pointwise dot
// product summed over voxels and scaled by the voxel volume, so values are
// comparable across resolutions.
template <int D>
inline double reg_inner(const VectorField<D>& m, const VectorField<D>& v) {
  require(m.grid == v.grid, "reg_inner: fields must share a grid");
  const std::size_t n = static_cast<std::size_t>(m.grid.voxels());
  double acc = 0.0;
  for (int c = 0; c < D; ++c) {
    const double* a = m.ch(c);
    const double* b = v.ch(c);
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  }
  return acc * m.grid.voxel_volume();
}

}  // namespace flowreg
