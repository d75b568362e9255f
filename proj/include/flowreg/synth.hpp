#pragma once

#include "flowreg/affine.hpp"
#include "flowreg/grid.hpp"
#include "flowreg/interp.hpp"
#include "flowreg/metrics.hpp"
#include "flowreg/smoothing.hpp"
#include "flowreg/vsvf.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace flowreg {

// Scalar draws layered over mt19937_64 so the exact sequence is reproducible
// across platforms; the standard distributions make no such promise.
struct Rng {
  std::mt19937_64 eng;

  explicit Rng(std::uint64_t seed) : eng(seed) {}

  // [0, 1)
  double uniform() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller, one value per call.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
};

template <int D>
struct SynthSpec {
  std::array<int, D> dims{};
  double rotation_max_deg = 10.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double translation_max = 0.05;
  // Cap on max |v| in normalized units. Up to 0.2 the 10-step integration
  // stays comfortably diffeomorphic; the rejection loop backs off further
  // if a draw still folds.
  double momentum_amplitude = 0.15;
  double velocity_sigma = 0.08;  // smoothing width of the velocity draw, normalized
  double noise_sigma = 0.02;     // additive Gaussian noise, applied after warping
  int n_time_steps = 10;
  std::uint64_t seed = 1;

  void validate() const {
    for (int a = 0; a < D; ++a) require(dims[a] >= 8, "synth: dims must be >= 8");
    require(rotation_max_deg >= 0.0 && rotation_max_deg <= 45.0, "synth: rotation range");
    require(scale_min > 0.0 && scale_min <= scale_max, "synth: scale range");
    require(translation_max >= 0.0 && translation_max <= 0.2, "synth: translation range");
    require(momentum_amplitude >= 0.0 && momentum_amplitude <= 0.2,
            "synth: momentum amplitude must stay in [0, 0.2]");
    require(velocity_sigma > 0.0, "synth: velocity sigma must be positive");
    require(noise_sigma >= 0.0, "synth: noise sigma must be nonnegative");
    require(n_time_steps >= 1, "synth: need at least one time step");
  }
};

template <int D>
struct SynthPair {
  ScalarImage<D> i0, i1;
  LabelImage<D> labels0, labels1;
  AffineParams<D> gamma;  // the affine factor of the generating map
  TransformMap<D> map;    // full generating map: warp(clean i0, map) == clean i1
};

namespace detail {

// Nested-ellipsoid template geometry: {outer, middle, inner} x {center, semi-axes}.
template <int D>
struct TemplateShape;

template <>
struct TemplateShape<2> {
  static constexpr double center[3][2] = {{0.50, 0.50}, {0.52, 0.49}, {0.47, 0.52}};
  static constexpr double semi[3][2] = {{0.36, 0.31}, {0.26, 0.22}, {0.15, 0.12}};
};

template <>
struct TemplateShape<3> {
  static constexpr double center[3][3] = {{0.50, 0.50, 0.50}, {0.52, 0.49, 0.51}, {0.47, 0.52, 0.50}};
  static constexpr double semi[3][3] = {{0.34, 0.30, 0.27}, {0.28, 0.24, 0.21}, {0.16, 0.13, 0.11}};
};

// Scaled radial coordinate: negative inside the ellipsoid, zero on it.
template <int D>
inline double ellipse_r(const std::array<double, D>& x, const double* c, const double* s) {
  double q = 0.0;
  for (int a = 0; a < D; ++a) {
    const double t = (x[a] - c[a]) / s[a];
    q += t * t;
  }
  return std::sqrt(q) - 1.0;
}

inline double smoothstep01(double t) {
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  return t * t * (3.0 - 2.0 * t);
}

// 1 deep inside (r << 0), 0 outside, smooth over the band |r| < w.
inline double occupancy(double r, double w) { return 1.0 - smoothstep01((r + w) / (2.0 * w)); }

// Smooth low-frequency texture so correlation windows inside each region
// carry signal; zero mean-ish, bounded by 0.09.
template <int D>
inline double texture(const std::array<double, D>& x) {
  constexpr double tau = 2.0 * std::numbers::pi;
  double p1 = 0.9, p2 = 2.1;
  const double f1[3] = {3.0, 1.7, 2.3};
  const double f2[3] = {1.3, 3.1, -2.2};
  for (int a = 0; a < D; ++a) {
    p1 += tau * f1[a] * x[a];
    p2 += tau * f2[a] * x[a];
  }
  return 0.05 * std::cos(p1) + 0.04 * std::cos(p2);
}

// Renders the clean template and its two labeled shells (labels 1 and 2,
// each a few voxels thick at desk-scale grids).
template <int D>
inline void render_template(const GridSpec<D>& g, ScalarImage<D>& image, LabelImage<D>& labels) {
  using Shape = TemplateShape<D>;
  image = ScalarImage<D>(g, 0.0);
  labels = LabelImage<D>(g, 0);

  double hmax = 0.0;
  for (int a = 0; a < D; ++a) hmax = std::max(hmax, g.spacing(a));
  const double edge = 1.5 * hmax;  // transition half-width, normalized

  for_each_voxel(g, [&](const std::array<int, D>& c, std::int64_t i) {
    std::array<double, D> x;
    for (int a = 0; a < D; ++a) x[a] = static_cast<double>(c[a]) * g.spacing(a);

    double r[3], o[3];
    for (int k = 0; k < 3; ++k) {
      r[k] = ellipse_r<D>(x, Shape::center[k], Shape::semi[k]);
      double smin = Shape::semi[k][0];
      for (int a = 1; a < D; ++a) smin = std::min(smin, Shape::semi[k][a]);
      o[k] = occupancy(r[k], edge / smin);
    }

    double val = 0.05 + 0.30 * o[0] + 0.35 * o[1] + 0.25 * o[2];
    val += texture<D>(x) * o[0];
    image.at(i) = val;

    // Label 1: shell inside the middle ellipsoid; label 2: shell inside the
    // inner one. Crisp thresholds; the inner shell wins where they meet.
    if (r[2] >= -0.55 && r[2] < 0.0)
      labels.v[static_cast<std::size_t>(i)] = 2;
    else if (r[1] >= -0.32 && r[1] < 0.0 && r[2] >= 0.0)
      labels.v[static_cast<std::size_t>(i)] = 1;
  });
}

// Rotation * diag(scale) about the grid center plus translation. Degenerates
// to the exact identity when all ranges are zero.
template <int D>
inline AffineParams<D> draw_affine(const GridSpec<D>& g, const SynthSpec<D>& spec, Rng& rng) {
  constexpr double deg = std::numbers::pi / 180.0;
  std::array<double, D == 3 ? 3 : 1> ang;
  for (auto& a : ang) a = rng.uniform(-spec.rotation_max_deg, spec.rotation_max_deg) * deg;
  std::array<double, D> scale, trans;
  for (int a = 0; a < D; ++a) scale[a] = rng.uniform(spec.scale_min, spec.scale_max);
  for (int a = 0; a < D; ++a) trans[a] = rng.uniform(-spec.translation_max, spec.translation_max);

  std::array<std::array<double, D>, D> R{};
  if constexpr (D == 2) {
    const double cs = std::cos(ang[0]), sn = std::sin(ang[0]);
    R = {{{cs, -sn}, {sn, cs}}};
  } else {
    const double c0 = std::cos(ang[0]), s0 = std::sin(ang[0]);
    const double c1 = std::cos(ang[1]), s1 = std::sin(ang[1]);
    const double c2 = std::cos(ang[2]), s2 = std::sin(ang[2]);
    // Rz(a2) * Ry(a1) * Rx(a0)
    R = {{{c2 * c1, c2 * s1 * s0 - s2 * c0, c2 * s1 * c0 + s2 * s0},
          {s2 * c1, s2 * s1 * s0 + c2 * c0, s2 * s1 * c0 - c2 * s0},
          {-s1, c1 * s0, c1 * c0}}};
  }

  AffineParams<D> p = AffineParams<D>::identity();
  for (int r = 0; r < D; ++r)
    for (int a = 0; a < D; ++a) p.A[r][a] = R[r][a] * scale[a];

  std::array<double, D> center;
  for (int a = 0; a < D; ++a) center[a] = 0.5 * g.extent[a];
  const auto ac = p.apply(center);
  for (int a = 0; a < D; ++a) p.b[a] = center[a] - ac[a] + trans[a];
  return p;
}

// Smoothed normal noise rescaled so the largest vector norm is exactly 1;
// callers multiply by the amplitude they want. Zero only if the draw is
// degenerate (never happens in practice).
template <int D>
inline VectorField<D> unit_velocity_draw(const GridSpec<D>& g, double sigma_norm, Rng& rng) {
  VectorField<D> raw(g, 0.0), v(g, 0.0);
  for (auto& val : raw.v) val = rng.normal();
  std::array<double, D> sv;
  for (int a = 0; a < D; ++a) sv[a] = sigma_norm / g.spacing(a);
  for (int c = 0; c < D; ++c) gaussian_blur_channel<D>(g, raw.ch(c), sv, v.ch(c));

  const std::int64_t n = g.voxels();
  double mx = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double q = 0.0;
    for (int c = 0; c < D; ++c) q += v.ch(c)[i] * v.ch(c)[i];
    mx = std::max(mx, q);
  }
  if (mx > 0.0) {
    const double s = 1.0 / std::sqrt(mx);
    for (auto& val : v.v) val *= s;
  }
  return v;
}

// The generating map factors as gamma about the flowed identity: values of
// psi pass pointwise through the affine.
template <int D>
inline TransformMap<D> apply_affine_to_values(const AffineParams<D>& p, const TransformMap<D>& psi) {
  TransformMap<D> out(psi.grid, 0.0);
  const std::int64_t n = psi.grid.voxels();
  std::array<double, D> x;
  for (std::int64_t i = 0; i < n; ++i) {
    for (int a = 0; a < D; ++a) x[a] = psi.ch(a)[i];
    const auto y = p.apply(x);
    for (int a = 0; a < D; ++a) out.ch(a)[i] = y[a];
  }
  return out;
}

}  // namespace detail

// Builds a source/target pair with known ground truth. The generating map is
// gamma applied to the values of a flowed identity map, which is exactly the
// family the registration pipeline searches over. Intensity noise is drawn
// independently for the two images, after warping.
template <int D>
SynthPair<D> make_pair(const SynthSpec<D>& spec) {
  spec.validate();
  const GridSpec<D> g = GridSpec<D>::normalized(spec.dims);

  SynthPair<D> out;
  ScalarImage<D> clean;
  detail::render_template(g, clean, out.labels0);

  Rng rng(spec.seed);
  out.gamma = detail::draw_affine(g, spec, rng);

  // One noise draw; the fold-rejection loop only rescales it, so a given
  // seed always explores the same velocity direction.
  TransformMap<D> psi = identity_map(g);
  if (spec.momentum_amplitude > 0.0) {
    const VectorField<D> unit = detail::unit_velocity_draw(g, spec.velocity_sigma, rng);
    double amp = spec.momentum_amplitude;
    bool ok = false;
    for (int attempt = 0; attempt < 10; ++attempt) {
      VectorField<D> v = unit;
      for (auto& val : v.v) val *= amp;
      psi = advect_map(identity_map(g), v, spec.n_time_steps);

      TransformMap<D> trial = detail::apply_affine_to_values(out.gamma, psi);
      if (count_folds(trial).count == 0) {
        out.map = std::move(trial);
        ok = true;
        break;
      }
      amp *= 0.5;
    }
    require(ok, "make_pair: generated map still folds after 10 amplitude halvings");
  } else {
    out.map = detail::apply_affine_to_values(out.gamma, psi);
  }

  out.i1 = warp(clean, out.map);
  out.labels1 = warp_labels(out.labels0, out.map);
  out.i0 = std::move(clean);

  if (spec.noise_sigma > 0.0) {
    for (auto& v : out.i0.v) v += spec.noise_sigma * rng.normal();
    for (auto& v : out.i1.v) v += spec.noise_sigma * rng.normal();
  }
  return out;
}

}  // namespace flowreg
