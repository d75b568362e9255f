#pragma once

#include "flowreg/grid.hpp"
#include "flowreg/interp.hpp"
#include "flowreg/similarity.hpp"

namespace flowreg {

template <int D>
struct AffineParams {
  std::array<std::array<double, D>, D> A{};
  std::array<double, D> b{};

  static AffineParams identity() {
    AffineParams p;
    for (int i = 0; i < D; ++i)
      for (int j = 0; j < D; ++j) p.A[i][j] = (i == j) ? 1.0 : 0.0;
    return p;
  }

  std::array<double, D> apply(const std::array<double, D>& x) const {
    std::array<double, D> y{};
    for (int i = 0; i < D; ++i) {
      double acc = b[i];
      for (int j = 0; j < D; ++j) acc += A[i][j] * x[j];
      y[i] = acc;
    }
    return y;
  }

  static constexpr int packed_size() { return D * D + D; }

  std::vector<double> pack() const {
    std::vector<double> p(packed_size());
    int k = 0;
    for (int i = 0; i < D; ++i)
      for (int j = 0; j < D; ++j) p[k++] = A[i][j];
    for (int i = 0; i < D; ++i) p[k++] = b[i];
    return p;
  }

  static AffineParams unpack(const std::vector<double>& p) {
    require(static_cast<int>(p.size()) == packed_size(), "AffineParams: bad packed size");
    AffineParams out;
    int k = 0;
    for (int i = 0; i < D; ++i)
      for (int j = 0; j < D; ++j) out.A[i][j] = p[k++];
    for (int i = 0; i < D; ++i) out.b[i] = p[k++];
    return out;
  }
};

template <int D>
inline double affine_det(const AffineParams<D>& g) {
  if constexpr (D == 2) {
    return g.A[0][0] * g.A[1][1] - g.A[0][1] * g.A[1][0];
  } else {
    const auto& A = g.A;
    return A[0][0] * (A[1][1] * A[2][2] - A[1][2] * A[2][1]) -
           A[0][1] * (A[1][0] * A[2][2] - A[1][2] * A[2][0]) +
           A[0][2] * (A[1][0] * A[2][1] - A[1][1] * A[2][0]);
  }
}

template <int D>
inline AffineParams<D> affine_inverse(const AffineParams<D>& g) {
  const double det = affine_det(g);
  require(std::abs(det) > 1e-14, "affine_inverse: singular matrix");
  AffineParams<D> inv;
  if constexpr (D == 2) {
    inv.A[0][0] = g.A[1][1] / det;
    inv.A[0][1] = -g.A[0][1] / det;
    inv.A[1][0] = -g.A[1][0] / det;
    inv.A[1][1] = g.A[0][0] / det;
  } else {
    const auto& A = g.A;
    inv.A[0][0] = (A[1][1] * A[2][2] - A[1][2] * A[2][1]) / det;
    inv.A[0][1] = (A[0][2] * A[2][1] - A[0][1] * A[2][2]) / det;
    inv.A[0][2] = (A[0][1] * A[1][2] - A[0][2] * A[1][1]) / det;
    inv.A[1][0] = (A[1][2] * A[2][0] - A[1][0] * A[2][2]) / det;
    inv.A[1][1] = (A[0][0] * A[2][2] - A[0][2] * A[2][0]) / det;
    inv.A[1][2] = (A[0][2] * A[1][0] - A[0][0] * A[1][2]) / det;
    inv.A[2][0] = (A[1][0] * A[2][1] - A[1][1] * A[2][0]) / det;
    inv.A[2][1] = (A[0][1] * A[2][0] - A[0][0] * A[2][1]) / det;
    inv.A[2][2] = (A[0][0] * A[1][1] - A[0][1] * A[1][0]) / det;
  }
  for (int i = 0; i < D; ++i) {
    double acc = 0.0;
    for (int j = 0; j < D; ++j) acc += inv.A[i][j] * g.b[j];
    inv.b[i] = -acc;
  }
  return inv;
}

// Incremental composition: applying `increment` after `accumulated`.
// A <- A_inc * A_acc, b <- A_inc * b_acc + b_inc.
template <int D>
inline AffineParams<D> affine_compose_step(const AffineParams<D>& increment,
                                           const AffineParams<D>& accumulated) {
  AffineParams<D> out;
  for (int i = 0; i < D; ++i) {
    for (int j = 0; j < D; ++j) {
      double acc = 0.0;
      for (int k = 0; k < D; ++k) acc += increment.A[i][k] * accumulated.A[k][j];
      out.A[i][j] = acc;
    }
    double acc = increment.b[i];
    for (int k = 0; k < D; ++k) acc += increment.A[i][k] * accumulated.b[k];
    out.b[i] = acc;
  }
  return out;
}

template <int D>
inline TransformMap<D> affine_to_map(const AffineParams<D>& g, const GridSpec<D>& grid) {
  TransformMap<D> m(grid);
  std::array<double, D> h{};
  for (int a = 0; a < D; ++a) h[a] = grid.spacing(a);
  for_each_voxel(grid, [&](const std::array<int, D>& c, std::int64_t i) {
    std::array<double, D> x{};
    for (int a = 0; a < D; ++a) x[a] = c[a] * h[a];
    const auto y = g.apply(x);
    for (int a = 0; a < D; ++a) m.ch(a)[i] = y[a];
  });
  return m;
}

template <int D>
inline std::array<double, D> domain_center(const GridSpec<D>& g) {
  std::array<double, D> c{};
  for (int a = 0; a < D; ++a) c[a] = 0.5 * g.extent[a];
  return c;
}

// The optimizer's parameterization is centered: x' = A (x - c) + c + b with c
// the domain center. Centering decorrelates the matrix and translation
// directions, which plain descent needs; the two forms describe the same
// transform family. These convert between the centered and the plain
// x' = A x + b convention.
template <int D>
inline AffineParams<D> centered_to_plain(const AffineParams<D>& p, const std::array<double, D>& c) {
  AffineParams<D> out;
  out.A = p.A;
  for (int i = 0; i < D; ++i) {
    double ac = 0.0;
    for (int j = 0; j < D; ++j) ac += p.A[i][j] * c[j];
    out.b[i] = p.b[i] + c[i] - ac;
  }
  return out;
}

template <int D>
inline AffineParams<D> plain_to_centered(const AffineParams<D>& p, const std::array<double, D>& c) {
  AffineParams<D> out;
  out.A = p.A;
  for (int i = 0; i < D; ++i) {
    double ac = 0.0;
    for (int j = 0; j < D; ++j) ac += p.A[i][j] * c[j];
    out.b[i] = p.b[i] + ac - c[i];
  }
  return out;
}

// lambda_ar * (||A - I||_F^2 + ||b||^2): penalizes deviation from identity.
template <int D>
inline double affine_reg_loss(const AffineParams<D>& g, double lambda_ar) {
  double acc = 0.0;
  for (int i = 0; i < D; ++i) {
    for (int j = 0; j < D; ++j) {
      const double d = g.A[i][j] - (i == j ? 1.0 : 0.0);
      acc += d * d;
    }
    acc += g.b[i] * g.b[i];
  }
  return lambda_ar * acc;
}

template <int D>
inline void affine_reg_loss_grad(const AffineParams<D>& g, double lambda_ar, double coeff,
                                 AffineParams<D>& grad) {
  for (int i = 0; i < D; ++i) {
    for (int j = 0; j < D; ++j) {
      const double d = g.A[i][j] - (i == j ? 1.0 : 0.0);
      grad.A[i][j] += coeff * lambda_ar * 2.0 * d;
    }
    grad.b[i] += coeff * lambda_ar * 2.0 * g.b[i];
  }
}

// lambda_as * (||A_ts A - I||_F^2 + ||A_ts b + b_ts||^2): drives the two
// directions toward being mutual inverses.
template <int D>
inline double affine_sym_loss(const AffineParams<D>& g, const AffineParams<D>& g_ts,
                              double lambda_as) {
  double acc = 0.0;
  for (int i = 0; i < D; ++i) {
    for (int j = 0; j < D; ++j) {
      double m = (i == j) ? -1.0 : 0.0;
      for (int k = 0; k < D; ++k) m += g_ts.A[i][k] * g.A[k][j];
      acc += m * m;
    }
    double w = g_ts.b[i];
    for (int k = 0; k < D; ++k) w += g_ts.A[i][k] * g.b[k];
    acc += w * w;
  }
  return lambda_as * acc;
}

template <int D>
inline void affine_sym_loss_grad(const AffineParams<D>& g, const AffineParams<D>& g_ts,
                                 double lambda_as, double coeff, AffineParams<D>& grad,
                                 AffineParams<D>& grad_ts) {
  std::array<std::array<double, D>, D> M{};
  std::array<double, D> w{};
  for (int i = 0; i < D; ++i) {
    for (int j = 0; j < D; ++j) {
      double m = (i == j) ? -1.0 : 0.0;
      for (int k = 0; k < D; ++k) m += g_ts.A[i][k] * g.A[k][j];
      M[i][j] = m;
    }
    double acc = g_ts.b[i];
    for (int k = 0; k < D; ++k) acc += g_ts.A[i][k] * g.b[k];
    w[i] = acc;
  }
  const double c = 2.0 * lambda_as * coeff;
  // dL/dA = 2 lambda A_ts^T M ; dL/dA_ts = 2 lambda (M A^T + w b^T)
  // dL/db = 2 lambda A_ts^T w ; dL/db_ts = 2 lambda w
  for (int i = 0; i < D; ++i) {
    for (int j = 0; j < D; ++j) {
      double ga = 0.0, gt = 0.0;
      for (int k = 0; k < D; ++k) {
        ga += g_ts.A[k][i] * M[k][j];
        gt += M[i][k] * g.A[j][k];
      }
      grad.A[i][j] += c * ga;
      grad_ts.A[i][j] += c * (gt + w[i] * g.b[j]);
    }
    double gb = 0.0;
    for (int k = 0; k < D; ++k) gb += g_ts.A[k][i] * w[k];
    grad.b[i] += c * gb;
    grad_ts.b[i] += c * w[i];
  }
}

// Regularization schedule: strong pull toward identity early in the
// optimization that decays exponentially with the iteration counter.
inline double lambda_ar_schedule(int iteration, double c_ar = 10.0, double k_ar = 4.0) {
  return c_ar * k_ar / (k_ar + std::exp(static_cast<double>(iteration) / k_ar));
}

template <int D>
struct AffineLossConfig {
  MkLnccConfig sim;
  double lambda_ar = 0.0;
  double lambda_as = 10.0;
};

// Symmetric affine objective: both registration directions plus the
// inverse-consistency coupling.
template <int D>
inline double affine_total_loss(const ScalarImage<D>& i0, const ScalarImage<D>& i1,
                                const AffineParams<D>& g, const AffineParams<D>& g_ts,
                                const AffineLossConfig<D>& cfg) {
  require(i0.grid == i1.grid, "affine_total_loss: images must share a grid");
  const auto warped_st = warp(i0, affine_to_map(g, i1.grid));
  const auto warped_ts = warp(i1, affine_to_map(g_ts, i0.grid));
  double loss =
      match_weight * (1.0 - mk_lncc(warped_st, i1, cfg.sim)) + affine_reg_loss(g, cfg.lambda_ar);
  loss +=
      match_weight * (1.0 - mk_lncc(warped_ts, i0, cfg.sim)) + affine_reg_loss(g_ts, cfg.lambda_ar);
  loss += affine_sym_loss(g, g_ts, cfg.lambda_as);
  return loss;
}

struct AffineOptConfig {
  std::vector<double> scales{0.25, 0.5, 1.0};
  std::vector<int> iterations{200, 200, 50};
  double learning_rate = 1e-4;
  double c_ar = 10.0;
  double k_ar = 4.0;
  double lambda_as = 10.0;
  // Optional similarity override. Empty terms mean "derive from each scale's
  // grid": the finest scale gets the two-window config, coarser scales the
  // single-window config (see make_scale_sim).
  MkLnccConfig similarity{};

  void validate() const {
    require(!scales.empty() && scales.size() == iterations.size(),
            "AffineOptConfig: scales/iterations must be nonempty and equal length");
    for (std::size_t i = 0; i < scales.size(); ++i) {
      require(scales[i] > 0.0 && scales[i] <= 1.0, "AffineOptConfig: scales must be in (0,1]");
      if (i > 0)
        require(scales[i] > scales[i - 1], "AffineOptConfig: scales must be strictly increasing");
      require(iterations[i] >= 0, "AffineOptConfig: iteration counts must be nonnegative");
    }
    require(scales.back() == 1.0, "AffineOptConfig: last scale must be 1.0");
    require(learning_rate > 0.0, "AffineOptConfig: learning rate must be positive");
    if (!similarity.terms.empty()) similarity.validate();
  }
};

}  // namespace flowreg
