#pragma once

#include <functional>
#include <memory>

#include "flowreg/affine.hpp"
#include "flowreg/interp.hpp"
#include "flowreg/similarity.hpp"
#include "flowreg/smoothing.hpp"
#include "flowreg/stencil.hpp"

// Reverse-mode differentiation over a recorded program of field-level
// primitives. Recording runs the forward pass eagerly; replay() re-executes
// the same node sequence against the current leaf values (bitwise
// reproducible), and backward() runs the hand-written adjoints in reverse
// order. Every loop is single-threaded with a fixed traversal order, so
// gradient evaluations are deterministic down to the last bit.

namespace flowreg {
namespace ad {

struct FieldId {
  int i = -1;
};
struct ScalarId {
  int i = -1;
};
struct ParamId {
  int i = -1;
};

template <int D>
class Tape {
 public:
  struct FieldSlot {
    GridSpec<D> grid;
    int channels = 1;
    std::vector<double> val, adj;
    bool needs_grad = false;

    double* ch(int c) { return val.data() + static_cast<std::size_t>(c) * grid.voxels(); }
    const double* ch(int c) const {
      return val.data() + static_cast<std::size_t>(c) * grid.voxels();
    }
    double* adj_ch(int c) { return adj.data() + static_cast<std::size_t>(c) * grid.voxels(); }
  };
  struct ScalarSlot {
    double val = 0.0, adj = 0.0;
    bool needs_grad = false;
  };
  struct ParamSlot {
    std::vector<double> val, adj;
    bool needs_grad = false;
  };

  FieldId new_field(const GridSpec<D>& g, int channels, bool needs_grad) {
    FieldSlot s;
    s.grid = g;
    s.channels = channels;
    s.val.assign(static_cast<std::size_t>(g.voxels()) * channels, 0.0);
    // Adjoint storage only where gradients flow; constants stay lean.
    s.adj.assign(needs_grad ? s.val.size() : 0, 0.0);
    s.needs_grad = needs_grad;
    fields_.push_back(std::move(s));
    return FieldId{static_cast<int>(fields_.size()) - 1};
  }

  ScalarId new_scalar(double v, bool needs_grad) {
    scalars_.push_back(ScalarSlot{v, 0.0, needs_grad});
    return ScalarId{static_cast<int>(scalars_.size()) - 1};
  }

  ParamId new_param(int n, bool needs_grad) {
    ParamSlot s;
    s.val.assign(static_cast<std::size_t>(n), 0.0);
    s.adj.assign(static_cast<std::size_t>(n), 0.0);
    s.needs_grad = needs_grad;
    params_.push_back(std::move(s));
    return ParamId{static_cast<int>(params_.size()) - 1};
  }

  FieldSlot& f(FieldId id) { return fields_[static_cast<std::size_t>(id.i)]; }
  ScalarSlot& s(ScalarId id) { return scalars_[static_cast<std::size_t>(id.i)]; }
  ParamSlot& p(ParamId id) { return params_[static_cast<std::size_t>(id.i)]; }

  // Registers a node and runs its forward pass once (eager recording).
  void record(std::function<void(Tape&)> fwd, std::function<void(Tape&)> bwd) {
    fwd(*this);
    nodes_.push_back(Node{std::move(fwd), std::move(bwd)});
  }

  // Re-executes the recorded program against current leaf values.
  void replay() {
    for (auto& n : nodes_) n.fwd(*this);
  }

  // Seeds d(loss)/d(loss) = 1 and propagates adjoints to every slot that
  // needs them. Adjoint buffers are cleared first.
  void backward(ScalarId loss) {
    for (auto& fs : fields_) std::fill(fs.adj.begin(), fs.adj.end(), 0.0);
    for (auto& ss : scalars_) ss.adj = 0.0;
    for (auto& ps : params_) std::fill(ps.adj.begin(), ps.adj.end(), 0.0);
    s(loss).adj = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->bwd(*this);
  }

  std::size_t node_count() const { return nodes_.size(); }

  // Reusable temporary buffers shared by all nodes. A buffer is valid only
  // within a single fwd or bwd call (nodes never run concurrently), so each
  // call may freely claim indices 0..7 as long as it does not alias two live
  // uses onto one index.
  double* scratch(int which, std::size_t n) {
    if (scratch_.size() <= static_cast<std::size_t>(which))
      scratch_.resize(static_cast<std::size_t>(which) + 1);
    auto& buf = scratch_[static_cast<std::size_t>(which)];
    if (buf.size() < n) buf.resize(n);
    return buf.data();
  }

 private:
  struct Node {
    std::function<void(Tape&)> fwd, bwd;
  };
  std::vector<FieldSlot> fields_;
  std::vector<ScalarSlot> scalars_;
  std::vector<ParamSlot> params_;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> scratch_;
};

// ---- leaf constructors ----

template <int D>
inline FieldId field_input(Tape<D>& t, const GridSpec<D>& g, int channels, bool needs_grad) {
  return t.new_field(g, channels, needs_grad);
}

template <int D>
inline FieldId image_const(Tape<D>& t, const ScalarImage<D>& img) {
  FieldId id = t.new_field(img.grid, 1, false);
  t.f(id).val = img.v;
  return id;
}

template <int D>
inline FieldId map_const(Tape<D>& t, const TransformMap<D>& m) {
  FieldId id = t.new_field(m.grid, D, false);
  t.f(id).val = m.v;
  return id;
}

// ---- primitive nodes ----

// Map generated from packed affine parameters ([A row-major | b]) in the
// centered convention: x' = A (x - center) + center + b.
template <int D>
inline FieldId affine_map_node(Tape<D>& t, ParamId gamma, const GridSpec<D>& grid,
                               const std::array<double, D>& center) {
  FieldId out = t.new_field(grid, D, t.p(gamma).needs_grad);
  auto fwd = [gamma, out, grid, center](Tape<D>& tp) {
    const auto g = AffineParams<D>::unpack(tp.p(gamma).val);
    auto& os = tp.f(out);
    std::array<double, D> h{};
    for (int a = 0; a < D; ++a) h[a] = grid.spacing(a);
    for_each_voxel(grid, [&](const std::array<int, D>& c, std::int64_t i) {
      std::array<double, D> x{};
      for (int a = 0; a < D; ++a) x[a] = c[a] * h[a] - center[a];
      const auto y = g.apply(x);
      for (int a = 0; a < D; ++a) os.ch(a)[i] = y[a] + center[a];
    });
  };
  auto bwd = [gamma, out, grid, center](Tape<D>& tp) {
    if (!tp.p(gamma).needs_grad) return;
    auto& os = tp.f(out);
    auto& gs = tp.p(gamma);
    std::array<double, D> h{};
    for (int a = 0; a < D; ++a) h[a] = grid.spacing(a);
    for_each_voxel(grid, [&](const std::array<int, D>& c, std::int64_t i) {
      for (int r = 0; r < D; ++r) {
        const double ad = os.adj_ch(r)[i];
        if (ad == 0.0) continue;
        for (int a = 0; a < D; ++a)
          gs.adj[static_cast<std::size_t>(r) * D + a] += ad * (c[a] * h[a] - center[a]);
        gs.adj[static_cast<std::size_t>(D) * D + r] += ad;
      }
    });
  };
  t.record(std::move(fwd), std::move(bwd));
  return out;
}

// out(x) = image(map(x)) on the map's grid.
template <int D>
inline FieldId warp_node(Tape<D>& t, FieldId image, FieldId map) {
  require(t.f(image).channels == 1, "warp_node: image must be single-channel");
  require(t.f(map).channels == D, "warp_node: map must have D channels");
  const GridSpec<D> out_grid = t.f(map).grid;
  FieldId out = t.new_field(out_grid, 1, t.f(image).needs_grad || t.f(map).needs_grad);
  auto fwd = [image, map, out](Tape<D>& tp) {
    auto& is = tp.f(image);
    auto& ms = tp.f(map);
    auto& os = tp.f(out);
    const std::int64_t n = ms.grid.voxels();
    for (std::int64_t i = 0; i < n; ++i) {
      std::array<double, D> p{};
      for (int a = 0; a < D; ++a) p[a] = ms.ch(a)[i];
      const auto ip = detail::interp_prep<D>(is.grid, p);
      os.val[static_cast<std::size_t>(i)] = detail::interp_gather<D>(ip, is.ch(0));
    }
  };
  auto bwd = [image, map, out](Tape<D>& tp) {
    auto& is = tp.f(image);
    auto& ms = tp.f(map);
    auto& os = tp.f(out);
    const bool gi = is.needs_grad;
    const bool gm = ms.needs_grad;
    if (!gi && !gm) return;
    const std::int64_t n = ms.grid.voxels();
    for (std::int64_t i = 0; i < n; ++i) {
      const double ad = os.adj[static_cast<std::size_t>(i)];
      if (ad == 0.0) continue;
      std::array<double, D> p{};
      for (int a = 0; a < D; ++a) p[a] = ms.ch(a)[i];
      const auto ip = detail::interp_prep<D>(is.grid, p);
      if (gi) detail::interp_scatter<D>(ip, ad, is.adj_ch(0));
      if (gm) {
        std::array<double, D> dp{};
        detail::interp_gather_grad<D>(ip, is.ch(0), dp);
        for (int a = 0; a < D; ++a) ms.adj_ch(a)[i] += ad * dp[a];
      }
    }
  };
  t.record(std::move(fwd), std::move(bwd));
  return out;
}

// (outer o inner)(x) = outer(inner(x)) on inner's grid.
template <int D>
inline FieldId compose_node(Tape<D>& t, FieldId outer, FieldId inner) {
  require(t.f(outer).channels == D && t.f(inner).channels == D,
          "compose_node: both maps must have D channels");
  const GridSpec<D> out_grid = t.f(inner).grid;
  FieldId out = t.new_field(out_grid, D, t.f(outer).needs_grad || t.f(inner).needs_grad);
  auto fwd = [outer, inner, out](Tape<D>& tp) {
    auto& os = tp.f(outer);
    auto& is = tp.f(inner);
    auto& rs = tp.f(out);
    const std::int64_t n = is.grid.voxels();
    for (std::int64_t i = 0; i < n; ++i) {
      std::array<double, D> p{};
      for (int a = 0; a < D; ++a) p[a] = is.ch(a)[i];
      const auto ip = detail::interp_prep<D>(os.grid, p);
      for (int c = 0; c < D; ++c)
        rs.ch(c)[i] = detail::interp_gather<D>(ip, os.ch(c));
    }
  };
  auto bwd = [outer, inner, out](Tape<D>& tp) {
    auto& os = tp.f(outer);
    auto& is = tp.f(inner);
    auto& rs = tp.f(out);
    const bool go = os.needs_grad;
    const bool gi = is.needs_grad;
    if (!go && !gi) return;
    const std::int64_t n = is.grid.voxels();
    for (std::int64_t i = 0; i < n; ++i) {
      std::array<double, D> p{};
      for (int a = 0; a < D; ++a) p[a] = is.ch(a)[i];
      const auto ip = detail::interp_prep<D>(os.grid, p);
      for (int c = 0; c < D; ++c) {
        const double ad = rs.adj_ch(c)[i];
        if (ad == 0.0) continue;
        if (go) detail::interp_scatter<D>(ip, ad, os.adj_ch(c));
        if (gi) {
          std::array<double, D> dp{};
          detail::interp_gather_grad<D>(ip, os.ch(c), dp);
          for (int a = 0; a < D; ++a) is.adj_ch(a)[i] += ad * dp[a];
        }
      }
    }
  };
  t.record(std::move(fwd), std::move(bwd));
  return out;
}

// Multilinear resampling onto a new grid covering the same extent. The sample
// positions are the new grid's lattice (constants), so this node is linear in
// its input and the adjoint is a pure scatter.
template <int D>
inline FieldId resample_node(Tape<D>& t, FieldId in, const GridSpec<D>& new_grid) {
  const int nch = t.f(in).channels;
  FieldId out = t.new_field(new_grid, nch, t.f(in).needs_grad);
  auto fwd = [in, out, new_grid, nch](Tape<D>& tp) {
    auto& is = tp.f(in);
    auto& os = tp.f(out);
    std::array<double, D> h{};
    for (int a = 0; a < D; ++a) h[a] = new_grid.spacing(a);
    for_each_voxel(new_grid, [&](const std::array<int, D>& c, std::int64_t i) {
      std::array<double, D> p{};
      for (int a = 0; a < D; ++a) p[a] = c[a] * h[a];
      const auto ip = detail::interp_prep<D>(is.grid, p);
      for (int k = 0; k < nch; ++k) os.ch(k)[i] = detail::interp_gather<D>(ip, is.ch(k));
    });
  };
  auto bwd = [in, out, new_grid, nch](Tape<D>& tp) {
    auto& is = tp.f(in);
    if (!is.needs_grad) return;
    auto& os = tp.f(out);
    std::array<double, D> h{};
    for (int a = 0; a < D; ++a) h[a] = new_grid.spacing(a);
    for_each_voxel(new_grid, [&](const std::array<int, D>& c, std::int64_t i) {
      std::array<double, D> p{};
      for (int a = 0; a < D; ++a) p[a] = c[a] * h[a];
      const auto ip = detail::interp_prep<D>(is.grid, p);
      for (int k = 0; k < nch; ++k) {
        const double ad = os.adj_ch(k)[i];
        if (ad != 0.0) detail::interp_scatter<D>(ip, ad, is.adj_ch(k));
      }
    });
  };
  t.record(std::move(fwd), std::move(bwd));
  return out;
}

// Multi-Gaussian smoothing. The operator is exactly self-adjoint (symmetric
// taps, half-sample reflection), so the backward pass applies the same kernel
// to the adjoint field.
template <int D>
inline FieldId smooth_node(Tape<D>& t, FieldId in, const MultiGaussianKernel& kernel) {
  kernel.validate();
  const GridSpec<D> g = t.f(in).grid;
  const int nch = t.f(in).channels;
  FieldId out = t.new_field(g, nch, t.f(in).needs_grad);
  auto work = std::make_shared<std::vector<double>>(static_cast<std::size_t>(g.voxels()));
  auto tmp = std::make_shared<std::vector<double>>(static_cast<std::size_t>(g.voxels()));
  auto fwd = [in, out, kernel, g, nch, work](Tape<D>& tp) {
    auto& is = tp.f(in);
    auto& os = tp.f(out);
    for (int c = 0; c < nch; ++c)
      detail::multi_gaussian_channel<D>(g, is.ch(c), kernel, os.ch(c), work->data());
  };
  auto bwd = [in, out, kernel, g, nch, work, tmp](Tape<D>& tp) {
    auto& is = tp.f(in);
    if (!is.needs_grad) return;
    auto& os = tp.f(out);
    const std::size_t n = static_cast<std::size_t>(g.voxels());
    for (int c = 0; c < nch; ++c) {
      detail::multi_gaussian_channel<D>(g, os.adj.data() + static_cast<std::size_t>(c) * n,
                                        kernel, tmp->data(), work->data());
      double* dst = is.adj_ch(c);
      for (std::size_t i = 0; i < n; ++i) dst[i] += (*tmp)[i];
    }
  };
  t.record(std::move(fwd), std::move(bwd));
  return out;
}

namespace rk4 {

// k_c = -sum_a (d phi_c / d x_a) * v_a, the advection right-hand side.
template <int D>
inline void stage_forward(const GridSpec<D>& g, const double* phi, const double* vel,
                          double* k, double* tmp) {
  const std::size_t n = static_cast<std::size_t>(g.voxels());
  for (int c = 0; c < D; ++c) {
    double* kc = k + static_cast<std::size_t>(c) * n;
    for (std::size_t i = 0; i < n; ++i) kc[i] = 0.0;
    for (int a = 0; a < D; ++a) {
      axis_derivative<D>(g, phi + static_cast<std::size_t>(c) * n, a, tmp);
      const double* va = vel + static_cast<std::size_t>(a) * n;
      for (std::size_t i = 0; i < n; ++i) kc[i] -= tmp[i] * va[i];
    }
  }
}

// Adjoint of stage_forward, bilinear in (phi, vel):
//   phibar_c -= D_a^T (kbar_c . v_a)   summed over axes
//   vbar_a   -= kbar_c . (D_a phi_c)    summed over channels
template <int D>
inline void stage_backward(const GridSpec<D>& g, const double* phi, const double* vel,
                           const double* kbar, double* phibar, double* vbar, double* tmp,
                           double* tmp2) {
  const std::size_t n = static_cast<std::size_t>(g.voxels());
  for (int c = 0; c < D; ++c) {
    const double* kc = kbar + static_cast<std::size_t>(c) * n;
    for (int a = 0; a < D; ++a) {
      const double* va = vel + static_cast<std::size_t>(a) * n;
      if (vbar) {
        axis_derivative<D>(g, phi + static_cast<std::size_t>(c) * n, a, tmp);
        double* vb = vbar + static_cast<std::size_t>(a) * n;
        for (std::size_t i = 0; i < n; ++i) vb[i] -= kc[i] * tmp[i];
      }
      if (phibar) {
        for (std::size_t i = 0; i < n; ++i) tmp2[i] = -kc[i] * va[i];
        axis_derivative_transpose_accum<D>(g, tmp2, a,
                                           phibar + static_cast<std::size_t>(c) * n);
      }
    }
  }
}

}  // namespace rk4

// One classical RK4 step of the advection ODE d(phi)/dt = -D(phi) v with a
// stationary velocity. Only the step output is stored; the backward pass
// recomputes the stage values k1..k3 from the node's inputs, trading a few
// derivative passes for a 4x smaller tape.
template <int D>
inline FieldId rk4_step_node(Tape<D>& t, FieldId phi, FieldId vel, double dt) {
  const GridSpec<D> g = t.f(phi).grid;
  require(t.f(vel).grid == g, "rk4_step_node: phi and velocity must share a grid");
  const std::size_t n = static_cast<std::size_t>(g.voxels());
  const std::size_t nd = n * D;
  FieldId out = t.new_field(g, D, t.f(phi).needs_grad || t.f(vel).needs_grad);

  auto fwd = [=](Tape<D>& tp) {
    auto& ps = tp.f(phi);
    auto& vs = tp.f(vel);
    auto& os = tp.f(out);
    double* K1 = tp.scratch(0, nd);
    double* K2 = tp.scratch(1, nd);
    double* K3 = tp.scratch(2, nd);
    double* X = tp.scratch(3, nd);
    double* tmp = tp.scratch(6, n);
    const double* P = ps.val.data();
    const double* V = vs.val.data();
    rk4::stage_forward<D>(g, P, V, K1, tmp);
    for (std::size_t i = 0; i < nd; ++i) X[i] = P[i] + 0.5 * dt * K1[i];
    rk4::stage_forward<D>(g, X, V, K2, tmp);
    for (std::size_t i = 0; i < nd; ++i) X[i] = P[i] + 0.5 * dt * K2[i];
    rk4::stage_forward<D>(g, X, V, K3, tmp);
    for (std::size_t i = 0; i < nd; ++i) X[i] = P[i] + dt * K3[i];
    double* K4 = os.val.data();  // reuse output storage for the last stage
    rk4::stage_forward<D>(g, X, V, K4, tmp);
    for (std::size_t i = 0; i < nd; ++i)
      os.val[i] = P[i] + dt / 6.0 * (K1[i] + 2.0 * K2[i] + 2.0 * K3[i] + K4[i]);
    for (std::size_t i = 0; i < nd; ++i)
      require(std::isfinite(os.val[i]),
              "advect: non-finite intermediate value (unstable step size)");
  };

  auto bwd = [=](Tape<D>& tp) {
    auto& ps = tp.f(phi);
    auto& vs = tp.f(vel);
    auto& os = tp.f(out);
    const bool gp = ps.needs_grad;
    const bool gv = vs.needs_grad;
    if (!gp && !gv) return;
    const double* P = ps.val.data();
    const double* V = vs.val.data();
    const double* ybar = os.adj.data();
    double* pbar = gp ? ps.adj.data() : nullptr;
    double* vbar = gv ? vs.adj.data() : nullptr;
    double* K1 = tp.scratch(0, nd);
    double* K2 = tp.scratch(1, nd);
    double* K3 = tp.scratch(2, nd);
    double* X = tp.scratch(3, nd);
    double* KB = tp.scratch(4, nd);
    double* XB = tp.scratch(5, nd);
    double* tmp = tp.scratch(6, n);
    double* tmp2 = tp.scratch(7, n);

    // Recompute the stage values this step produced in its forward pass.
    rk4::stage_forward<D>(g, P, V, K1, tmp);
    for (std::size_t i = 0; i < nd; ++i) X[i] = P[i] + 0.5 * dt * K1[i];
    rk4::stage_forward<D>(g, X, V, K2, tmp);
    for (std::size_t i = 0; i < nd; ++i) X[i] = P[i] + 0.5 * dt * K2[i];
    rk4::stage_forward<D>(g, X, V, K3, tmp);

    // stage 4 at x4 = phi + dt k3
    for (std::size_t i = 0; i < nd; ++i) X[i] = P[i] + dt * K3[i];
    for (std::size_t i = 0; i < nd; ++i) KB[i] = (dt / 6.0) * ybar[i];
    std::fill(XB, XB + nd, 0.0);
    rk4::stage_backward<D>(g, X, V, KB, XB, vbar, tmp, tmp2);
    if (pbar)
      for (std::size_t i = 0; i < nd; ++i) pbar[i] += XB[i];
    // k3bar = dt/3 ybar + dt x4bar ; stage 3 at x3 = phi + dt/2 k2
    for (std::size_t i = 0; i < nd; ++i) KB[i] = (dt / 3.0) * ybar[i] + dt * XB[i];
    for (std::size_t i = 0; i < nd; ++i) X[i] = P[i] + 0.5 * dt * K2[i];
    std::fill(XB, XB + nd, 0.0);
    rk4::stage_backward<D>(g, X, V, KB, XB, vbar, tmp, tmp2);
    if (pbar)
      for (std::size_t i = 0; i < nd; ++i) pbar[i] += XB[i];
    // k2bar = dt/3 ybar + dt/2 x3bar ; stage 2 at x2 = phi + dt/2 k1
    for (std::size_t i = 0; i < nd; ++i) KB[i] = (dt / 3.0) * ybar[i] + 0.5 * dt * XB[i];
    for (std::size_t i = 0; i < nd; ++i) X[i] = P[i] + 0.5 * dt * K1[i];
    std::fill(XB, XB + nd, 0.0);
    rk4::stage_backward<D>(g, X, V, KB, XB, vbar, tmp, tmp2);
    if (pbar)
      for (std::size_t i = 0; i < nd; ++i) pbar[i] += XB[i];
    // k1bar = dt/6 ybar + dt/2 x2bar ; stage 1 at phi itself
    for (std::size_t i = 0; i < nd; ++i) KB[i] = (dt / 6.0) * ybar[i] + 0.5 * dt * XB[i];
    std::fill(XB, XB + nd, 0.0);
    rk4::stage_backward<D>(g, P, V, KB, XB, vbar, tmp, tmp2);
    if (pbar) {
      for (std::size_t i = 0; i < nd; ++i) pbar[i] += XB[i] + ybar[i];
    }
  };

  t.record(std::move(fwd), std::move(bwd));
  return out;
}

template <int D>
inline ScalarId mk_lncc_node(Tape<D>& t, FieldId x, FieldId y, const MkLnccConfig& cfg) {
  cfg.validate();
  require(t.f(x).grid == t.f(y).grid, "mk_lncc_node: grids must match");
  const GridSpec<D> g = t.f(x).grid;
  ScalarId out = t.new_scalar(0.0, t.f(x).needs_grad || t.f(y).needs_grad);
  auto fwd = [x, y, out, cfg, g](Tape<D>& tp) {
    tp.s(out).val =
        detail::mk_lncc_value<D>(g, cfg, tp.f(x).val.data(), tp.f(y).val.data());
  };
  auto bwd = [x, y, out, cfg, g](Tape<D>& tp) {
    const double ad = tp.s(out).adj;
    if (ad == 0.0) return;
    auto& xs = tp.f(x);
    auto& ys = tp.f(y);
    if (!xs.needs_grad && !ys.needs_grad) return;
    detail::mk_lncc_backward<D>(g, cfg, xs.val.data(), ys.val.data(), ad,
                                xs.needs_grad ? xs.adj.data() : nullptr,
                                ys.needs_grad ? ys.adj.data() : nullptr);
  };
  t.record(std::move(fwd), std::move(bwd));
  return out;
}

// Voxel-volume-weighted inner product of two D-channel fields.
template <int D>
inline ScalarId reg_inner_node(Tape<D>& t, FieldId m, FieldId v) {
  require(t.f(m).grid == t.f(v).grid, "reg_inner_node: grids must match");
  const GridSpec<D> g = t.f(m).grid;
  ScalarId out = t.new_scalar(0.0, t.f(m).needs_grad || t.f(v).needs_grad);
  const double volw = g.voxel_volume();
  auto fwd = [m, v, out, volw](Tape<D>& tp) {
    auto& ms = tp.f(m);
    auto& vs = tp.f(v);
    double acc = 0.0;
    for (std::size_t i = 0; i < ms.val.size(); ++i) acc += ms.val[i] * vs.val[i];
    tp.s(out).val = acc * volw;
  };
  auto bwd = [m, v, out, volw](Tape<D>& tp) {
    const double ad = tp.s(out).adj * volw;
    if (ad == 0.0) return;
    auto& ms = tp.f(m);
    auto& vs = tp.f(v);
    if (ms.needs_grad)
      for (std::size_t i = 0; i < ms.val.size(); ++i) ms.adj[i] += ad * vs.val[i];
    if (vs.needs_grad)
      for (std::size_t i = 0; i < vs.val.size(); ++i) vs.adj[i] += ad * ms.val[i];
  };
  t.record(std::move(fwd), std::move(bwd));
  return out;
}

// Squared deviation from the identity map summed over the interior (margin
// voxels dropped on each side). Mirrors detail::sq_dev_identity.
template <int D>
inline ScalarId sq_dev_identity_node(Tape<D>& t, FieldId map, int margin) {
  const GridSpec<D> g = t.f(map).grid;
  for (int a = 0; a < D; ++a)
    require(g.dims[a] > 2 * margin, "sq_dev_identity_node: margin leaves no interior");
  ScalarId out = t.new_scalar(0.0, t.f(map).needs_grad);
  auto fwd = [map, out, g, margin](Tape<D>& tp) {
    auto& ms = tp.f(map);
    std::array<double, D> h{};
    for (int a = 0; a < D; ++a) h[a] = g.spacing(a);
    double acc = 0.0;
    for_each_voxel(g, [&](const std::array<int, D>& c, std::int64_t i) {
      for (int a = 0; a < D; ++a)
        if (c[a] < margin || c[a] >= g.dims[a] - margin) return;
      for (int a = 0; a < D; ++a) {
        const double d = ms.ch(a)[i] - c[a] * h[a];
        acc += d * d;
      }
    });
    tp.s(out).val = acc;
  };
  auto bwd = [map, out, g, margin](Tape<D>& tp) {
    auto& ms = tp.f(map);
    if (!ms.needs_grad) return;
    const double ad = tp.s(out).adj * 2.0;
    if (ad == 0.0) return;
    std::array<double, D> h{};
    for (int a = 0; a < D; ++a) h[a] = g.spacing(a);
    for_each_voxel(g, [&](const std::array<int, D>& c, std::int64_t i) {
      for (int a = 0; a < D; ++a)
        if (c[a] < margin || c[a] >= g.dims[a] - margin) return;
      for (int a = 0; a < D; ++a)
        ms.adj_ch(a)[i] += ad * (ms.ch(a)[i] - c[a] * h[a]);
    });
  };
  t.record(std::move(fwd), std::move(bwd));
  return out;
}

// lambda * (||A - I||_F^2 + ||b||^2) with the coefficient supplied as a
// scalar slot so schedules can change it between replays.
template <int D>
inline ScalarId affine_reg_node(Tape<D>& t, ParamId gamma, ScalarId lambda) {
  ScalarId out = t.new_scalar(0.0, t.p(gamma).needs_grad);
  auto fwd = [gamma, lambda, out](Tape<D>& tp) {
    tp.s(out).val =
        affine_reg_loss(AffineParams<D>::unpack(tp.p(gamma).val), tp.s(lambda).val);
  };
  auto bwd = [gamma, lambda, out](Tape<D>& tp) {
    auto& gs = tp.p(gamma);
    if (!gs.needs_grad) return;
    const double ad = tp.s(out).adj;
    if (ad == 0.0) return;
    AffineParams<D> grad{};
    affine_reg_loss_grad(AffineParams<D>::unpack(gs.val), tp.s(lambda).val, ad, grad);
    const auto packed = grad.pack();
    for (std::size_t i = 0; i < packed.size(); ++i) gs.adj[i] += packed[i];
  };
  t.record(std::move(fwd), std::move(bwd));
  return out;
}

template <int D>
inline ScalarId affine_sym_node(Tape<D>& t, ParamId g_st, ParamId g_ts, double lambda_as) {
  ScalarId out = t.new_scalar(0.0, t.p(g_st).needs_grad || t.p(g_ts).needs_grad);
  auto fwd = [g_st, g_ts, out, lambda_as](Tape<D>& tp) {
    tp.s(out).val = affine_sym_loss(AffineParams<D>::unpack(tp.p(g_st).val),
                                    AffineParams<D>::unpack(tp.p(g_ts).val), lambda_as);
  };
  auto bwd = [g_st, g_ts, out, lambda_as](Tape<D>& tp) {
    const double ad = tp.s(out).adj;
    if (ad == 0.0) return;
    auto& ss = tp.p(g_st);
    auto& ts = tp.p(g_ts);
    AffineParams<D> gs{}, gt{};
    affine_sym_loss_grad(AffineParams<D>::unpack(ss.val), AffineParams<D>::unpack(ts.val),
                         lambda_as, ad, gs, gt);
    if (ss.needs_grad) {
      const auto p = gs.pack();
      for (std::size_t i = 0; i < p.size(); ++i) ss.adj[i] += p[i];
    }
    if (ts.needs_grad) {
      const auto p = gt.pack();
      for (std::size_t i = 0; i < p.size(); ++i) ts.adj[i] += p[i];
    }
  };
  t.record(std::move(fwd), std::move(bwd));
  return out;
}

// ---- scalar arithmetic ----

template <int D>
inline ScalarId s_add(Tape<D>& t, ScalarId a, ScalarId b) {
  ScalarId out = t.new_scalar(0.0, t.s(a).needs_grad || t.s(b).needs_grad);
  t.record([a, b, out](Tape<D>& tp) { tp.s(out).val = tp.s(a).val + tp.s(b).val; },
           [a, b, out](Tape<D>& tp) {
             const double ad = tp.s(out).adj;
             if (tp.s(a).needs_grad) tp.s(a).adj += ad;
             if (tp.s(b).needs_grad) tp.s(b).adj += ad;
           });
  return out;
}

template <int D>
inline ScalarId s_scale(Tape<D>& t, ScalarId a, double c) {
  ScalarId out = t.new_scalar(0.0, t.s(a).needs_grad);
  t.record([a, out, c](Tape<D>& tp) { tp.s(out).val = c * tp.s(a).val; },
           [a, out, c](Tape<D>& tp) {
             if (tp.s(a).needs_grad) tp.s(a).adj += c * tp.s(out).adj;
           });
  return out;
}

template <int D>
inline ScalarId s_one_minus(Tape<D>& t, ScalarId a) {
  ScalarId out = t.new_scalar(0.0, t.s(a).needs_grad);
  t.record([a, out](Tape<D>& tp) { tp.s(out).val = 1.0 - tp.s(a).val; },
           [a, out](Tape<D>& tp) {
             if (tp.s(a).needs_grad) tp.s(a).adj -= tp.s(out).adj;
           });
  return out;
}

}  // namespace ad
}  // namespace flowreg
