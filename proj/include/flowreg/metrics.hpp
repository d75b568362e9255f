#pragma once

#include "flowreg/grid.hpp"
#include "flowreg/interp.hpp"
#include "flowreg/stencil.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

namespace flowreg {

struct DiceResult {
  std::map<std::uint16_t, double> per_label;
  double mean = 0.0;
};

// Dice overlap per label and averaged over the declared label set.
// Label 0 is background and is scored only if explicitly declared; every
// nonzero voxel value must appear in `labels`. A label absent from both
// images contributes Dice 1 (perfect agreement on absence).
template <int D>
DiceResult dice(const LabelImage<D>& a, const LabelImage<D>& b,
                const std::vector<std::uint16_t>& labels) {
  require(a.grid == b.grid, "dice: label images must share a grid");
  require(!labels.empty(), "dice: empty label set");

  std::map<std::uint16_t, std::array<std::int64_t, 3>> tally;  // {|A|, |B|, |A cap B|}
  for (std::uint16_t l : labels) tally[l] = {0, 0, 0};

  const std::int64_t n = a.grid.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    const std::uint16_t la = a.v[static_cast<std::size_t>(i)], lb = b.v[static_cast<std::size_t>(i)];
    auto ia = tally.find(la);
    require(la == 0 || ia != tally.end(), "dice: image contains an undeclared label");
    auto ib = tally.find(lb);
    require(lb == 0 || ib != tally.end(), "dice: image contains an undeclared label");
    if (ia != tally.end()) ++ia->second[0];
    if (ib != tally.end()) ++ib->second[1];
    if (la == lb && ia != tally.end()) ++ia->second[2];
  }

  DiceResult out;
  double sum = 0.0;
  for (const auto& [label, t] : tally) {
    const std::int64_t denom = t[0] + t[1];
    const double d = denom == 0 ? 1.0 : 2.0 * static_cast<double>(t[2]) / static_cast<double>(denom);
    out.per_label[label] = d;
    sum += d;
  }
  out.mean = sum / static_cast<double>(tally.size());
  return out;
}

struct FoldReport {
  std::int64_t count = 0;
  double mean_abs_det = 0.0;  // over folded voxels only; 0 when count == 0
};

// Counts voxels where the map's Jacobian determinant goes negative.
template <int D>
FoldReport count_folds(const TransformMap<D>& map) {
  const ScalarImage<D> det = jacobian_determinant(map);
  FoldReport r;
  double acc = 0.0;
  for (double d : det.v)
    if (d < 0.0) {
      ++r.count;
      acc += -d;
    }
  if (r.count > 0) r.mean_abs_det = acc / static_cast<double>(r.count);
  return r;
}

// Interior margin for the symmetry measure: 10 voxels at a 192-wide axis,
// scaled proportionally for smaller grids, never less than 1.
inline int symmetry_margin(int dim) {
  const int m = static_cast<int>(std::llround(10.0 * static_cast<double>(dim) / 192.0));
  return m < 1 ? 1 : m;
}

// ln of the mean squared deviation from identity of map_st(map_ts(x)) over
// the interior (per-axis margin above), floored at 1e-12 so perfect
// inverse-consistency yields a finite value instead of -inf.
template <int D>
double symmetry_metric(const TransformMap<D>& map_st, const TransformMap<D>& map_ts) {
  require(map_st.grid == map_ts.grid, "symmetry_metric: maps must share a grid");
  const GridSpec<D>& g = map_st.grid;

  std::array<int, D> margin;
  for (int a = 0; a < D; ++a) {
    margin[a] = symmetry_margin(g.dims[a]);
    require(g.dims[a] > 2 * margin[a], "symmetry_metric: empty interior");
  }

  const TransformMap<D> comp = compose(map_st, map_ts);
  const auto h = [&](int a) { return g.spacing(a); };

  double sum = 0.0;
  std::int64_t count = 0;
  for_each_voxel(g, [&](const std::array<int, D>& c, std::int64_t i) {
    for (int a = 0; a < D; ++a)
      if (c[a] < margin[a] || c[a] >= g.dims[a] - margin[a]) return;
    double dev = 0.0;
    for (int a = 0; a < D; ++a) {
      const double d = comp.ch(a)[i] - static_cast<double>(c[a]) * h(a);
      dev += d * d;
    }
    sum += dev;
    ++count;
  });
  require(count > 0, "symmetry_metric: empty interior");
  const double mean_sq = sum / static_cast<double>(count);
  return std::log(mean_sq < 1e-12 ? 1e-12 : mean_sq);
}

// Everything a registration run reports. Timing fields are filled by the
// pipeline driver; metric fields by the functions above.
struct MetricsReport {
  std::map<std::uint16_t, double> dice_per_label;
  double dice_mean = 0.0;
  std::int64_t folds = 0;
  double folds_mean_abs_det = 0.0;
  double symmetry = 0.0;
  double seconds_affine = 0.0;
  double seconds_vsvf = 0.0;
};

}  // namespace flowreg
