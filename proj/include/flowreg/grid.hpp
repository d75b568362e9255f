#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowreg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// Regular sampling grid in normalized coordinates: the longest axis of a
// primary grid spans [0,1] and spacing is isotropic; grids derived by
// rescaling keep the parent's extent exactly, so coordinates are comparable
// across resolutions.
template <int D>
struct GridSpec {
  static_assert(D == 2 || D == 3, "2D and 3D grids only");

  std::array<int, D> dims{};
  std::array<double, D> extent{};

  static GridSpec normalized(const std::array<int, D>& dims) {
    int longest = 0;
    for (int a = 0; a < D; ++a) {
      require(dims[a] >= 2, "GridSpec: every axis needs at least 2 voxels");
      longest = std::max(longest, dims[a]);
    }
    GridSpec g;
    g.dims = dims;
    const double h = 1.0 / static_cast<double>(longest - 1);
    for (int a = 0; a < D; ++a) g.extent[a] = h * static_cast<double>(dims[a] - 1);
    return g;
  }

  double spacing(int axis) const {
    return extent[axis] / static_cast<double>(dims[axis] - 1);
  }

  std::int64_t voxels() const {
    std::int64_t n = 1;
    for (int a = 0; a < D; ++a) n *= dims[a];
    return n;
  }

  double voxel_volume() const {
    double w = 1.0;
    for (int a = 0; a < D; ++a) w *= spacing(a);
    return w;
  }

  // Same normalized extent, voxel counts rescaled (at least 2 per axis).
  GridSpec scaled(double factor) const {
    require(factor > 0.0, "GridSpec::scaled: factor must be positive");
    GridSpec g;
    for (int a = 0; a < D; ++a) {
      g.dims[a] = std::max<int>(2, static_cast<int>(std::llround(dims[a] * factor)));
      g.extent[a] = extent[a];
    }
    return g;
  }

  // Strides for flat indexing, axis 0 fastest-varying.
  std::array<std::int64_t, D> strides() const {
    std::array<std::int64_t, D> s{};
    std::int64_t acc = 1;
    for (int a = 0; a < D; ++a) {
      s[a] = acc;
      acc *= dims[a];
    }
    return s;
  }

  friend bool operator==(const GridSpec& a, const GridSpec& b) {
    for (int i = 0; i < D; ++i) {
      if (a.dims[i] != b.dims[i]) return false;
      if (std::abs(a.extent[i] - b.extent[i]) > 1e-12) return false;
    }
    return true;
  }
  friend bool operator!=(const GridSpec& a, const GridSpec& b) { return !(a == b); }
};

// Odometer walk over all voxels: calls fn(coord, flat_index) in flat order.
template <int D, class Fn>
inline void for_each_voxel(const GridSpec<D>& g, Fn&& fn) {
  std::array<int, D> c{};
  const std::int64_t n = g.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    fn(c, i);
    for (int a = 0; a < D; ++a) {
      if (++c[a] < g.dims[a]) break;
      c[a] = 0;
    }
  }
}

template <int D>
struct ScalarImage {
  GridSpec<D> grid;
  std::vector<double> v;

  ScalarImage() = default;
  explicit ScalarImage(const GridSpec<D>& g, double fill = 0.0)
      : grid(g), v(static_cast<std::size_t>(g.voxels()), fill) {}

  double& at(std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
  double at(std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }
};

// D-channel field, channel-major storage: value of channel c at flat voxel i
// lives at v[c*voxels + i].
template <int D>
struct VectorField {
  GridSpec<D> grid;
  std::vector<double> v;

  VectorField() = default;
  explicit VectorField(const GridSpec<D>& g, double fill = 0.0)
      : grid(g), v(static_cast<std::size_t>(g.voxels()) * D, fill) {}

  double* ch(int c) { return v.data() + static_cast<std::size_t>(c) * grid.voxels(); }
  const double* ch(int c) const {
    return v.data() + static_cast<std::size_t>(c) * grid.voxels();
  }
};

// Transformation map: channel c at voxel x holds the normalized target
// coordinate the voxel maps to (absolute coordinates, not displacements).
template <int D>
struct TransformMap {
  GridSpec<D> grid;
  std::vector<double> v;

  TransformMap() = default;
  explicit TransformMap(const GridSpec<D>& g, double fill = 0.0)
      : grid(g), v(static_cast<std::size_t>(g.voxels()) * D, fill) {}

  double* ch(int c) { return v.data() + static_cast<std::size_t>(c) * grid.voxels(); }
  const double* ch(int c) const {
    return v.data() + static_cast<std::size_t>(c) * grid.voxels();
  }
};

template <int D>
struct LabelImage {
  GridSpec<D> grid;
  std::vector<std::uint16_t> v;

  LabelImage() = default;
  explicit LabelImage(const GridSpec<D>& g, std::uint16_t fill = 0)
      : grid(g), v(static_cast<std::size_t>(g.voxels()), fill) {}
};

template <int D>
inline TransformMap<D> identity_map(const GridSpec<D>& g) {
  TransformMap<D> m(g);
  std::array<double, D> h{};
  for (int a = 0; a < D; ++a) h[a] = g.spacing(a);
  for_each_voxel(g, [&](const std::array<int, D>& c, std::int64_t i) {
    for (int a = 0; a < D; ++a) m.ch(a)[i] = c[a] * h[a];
  });
  return m;
}

template <int D>
inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace flowreg
