#pragma once

#include "flowreg/lbfgs.hpp"
#include "flowreg/programs.hpp"

// Multi-scale optimizers: gradient descent over affine parameters, L-BFGS
// over momentum fields, and sequential vSVF refinement. Scales run coarse to
// fine, warm-starting from the previous scale's solution.

namespace flowreg {

template <int D>
struct AffineOptResult {
  AffineParams<D> params_st, params_ts;
  std::vector<std::vector<double>> traces;  // per-scale loss per iteration
  double final_sim_st = 0.0, final_sim_ts = 0.0;
};

// Joint gradient descent on the symmetric affine objective. One outer
// iteration is one gradient step; the regularization weight follows
// lambda_ar_schedule over the global iteration counter across scales.
// Descent runs in the centered parameterization (AffineLossProgram's
// convention); the returned parameters are plain x' = A x + b. Downsampling
// preserves the extent, so the center is the same at every scale.
template <int D>
inline AffineOptResult<D> optimize_affine_multiscale(const ScalarImage<D>& i0,
                                                     const ScalarImage<D>& i1,
                                                     const AffineOptConfig& cfg) {
  cfg.validate();
  require(i0.grid == i1.grid, "optimize_affine_multiscale: images must share a grid");

  AffineOptResult<D> out;
  AffineParams<D> st = AffineParams<D>::identity();
  AffineParams<D> ts = AffineParams<D>::identity();
  int outer = 0;

  for (std::size_t k = 0; k < cfg.scales.size(); ++k) {
    const bool finest = (k + 1 == cfg.scales.size());
    const ScalarImage<D> i0k = downsample_image(i0, cfg.scales[k]);
    const ScalarImage<D> i1k = downsample_image(i1, cfg.scales[k]);
    const MkLnccConfig sim = cfg.similarity.terms.empty()
                                 ? make_scale_sim(i0k.grid, finest)
                                 : cfg.similarity;
    AffineLossProgram<D> prog(i0k, i1k, sim, cfg.lambda_as);

    std::vector<double> trace;
    trace.reserve(static_cast<std::size_t>(cfg.iterations[k]) + 1);
    for (int it = 0; it < cfg.iterations[k]; ++it) {
      const double lam = lambda_ar_schedule(outer, cfg.c_ar, cfg.k_ar);
      const auto e = prog.eval(st, ts, lam);
      require(std::isfinite(e.loss), "optimize_affine_multiscale: non-finite loss at scale " +
                                         std::to_string(cfg.scales[k]) + ", iteration " +
                                         std::to_string(it));
      trace.push_back(e.loss);
      for (int r = 0; r < D; ++r) {
        for (int c = 0; c < D; ++c) st.A[r][c] -= cfg.learning_rate * e.grad_st.A[r][c];
        st.b[r] -= cfg.learning_rate * e.grad_st.b[r];
        for (int c = 0; c < D; ++c) ts.A[r][c] -= cfg.learning_rate * e.grad_ts.A[r][c];
        ts.b[r] -= cfg.learning_rate * e.grad_ts.b[r];
      }
      require(std::fabs(affine_det(st)) > 1e-12 && std::fabs(affine_det(ts)) > 1e-12,
              "optimize_affine_multiscale: singular transform");
      ++outer;
    }
    // Loss at the scale's final parameters, so the trace covers every state.
    const double lam_end = lambda_ar_schedule(outer, cfg.c_ar, cfg.k_ar);
    trace.push_back(prog.value(st, ts, lam_end));
    out.final_sim_st = prog.last_sim_st();
    out.final_sim_ts = prog.last_sim_ts();
    out.traces.push_back(std::move(trace));
  }

  out.params_st = centered_to_plain<D>(st, domain_center(i1.grid));
  out.params_ts = centered_to_plain<D>(ts, domain_center(i0.grid));
  return out;
}

namespace detail {

// One multi-scale (or single-scale) L-BFGS pass over the momentum pair.
// Returns the per-scale traces and fills the final momenta, full-resolution
// maps, warped source, and similarity values from the last accepted state.
template <int D>
inline std::vector<std::vector<double>> vsvf_solve_scales(
    const ScalarImage<D>& i0, const ScalarImage<D>& i1, const TransformMap<D>& init_map_st,
    const TransformMap<D>& init_map_ts, const VsvfConfig<D>& cfg, VectorField<D>& m_st,
    VectorField<D>& m_ts, TransformMap<D>& map_st, TransformMap<D>& map_ts,
    ScalarImage<D>& warped, double& sim_st, double& sim_ts) {
  require(init_map_st.grid == i1.grid,
          "optimize_vsvf_multiscale: source->target map must live on the target grid");
  require(init_map_ts.grid == i0.grid,
          "optimize_vsvf_multiscale: target->source map must live on the source grid");

  std::vector<std::vector<double>> traces;
  bool have_momentum = false;

  for (std::size_t k = 0; k < cfg.scales.size(); ++k) {
    const bool finest = (k + 1 == cfg.scales.size());
    const ScalarImage<D> i0k = downsample_image(i0, cfg.scales[k]);
    const ScalarImage<D> i1k = downsample_image(i1, cfg.scales[k]);
    const GridSpec<D> low_st = i1k.grid.scaled(cfg.lowres_factor);
    const GridSpec<D> low_ts = i0k.grid.scaled(cfg.lowres_factor);
    const TransformMap<D> init_st = resample_map(init_map_st, low_st);
    const TransformMap<D> init_ts = resample_map(init_map_ts, low_ts);

    if (!have_momentum) {
      m_st = VectorField<D>(low_st);
      m_ts = VectorField<D>(low_ts);
      have_momentum = true;
    } else {
      m_st = resample_field(m_st, low_st);
      m_ts = resample_field(m_ts, low_ts);
    }

    VsvfLossProgram<D> prog(i0k, i1k, init_st, init_ts, cfg, finest);
    std::vector<double> x(prog.n_params());
    std::copy(m_st.v.begin(), m_st.v.end(), x.begin());
    std::copy(m_ts.v.begin(), m_ts.v.end(), x.begin() + m_st.v.size());

    LbfgsConfig lcfg;
    auto report = lbfgs_minimize(
        [&prog](const double* xv, double* gv) { return prog.eval_flat(xv, gv); }, x,
        cfg.iterations[k], lcfg);
    traces.push_back(std::move(report.trace));

    std::copy(x.begin(), x.begin() + m_st.v.size(), m_st.v.begin());
    std::copy(x.begin() + m_st.v.size(), x.end(), m_ts.v.begin());

    // The tape may hold a rejected line-search trial; restore the accepted
    // state before reading maps and similarities off the program.
    prog.eval_flat(x.data(), nullptr);
    if (finest) {
      map_st = prog.map_st();
      map_ts = prog.map_ts();
      warped = prog.warped_st();
      sim_st = prog.last_sim_st();
      sim_ts = prog.last_sim_ts();
    }
  }
  return traces;
}

}  // namespace detail

// Joint L-BFGS optimization of the momentum pair over scales coarse to fine,
// starting from the supplied (affine) maps. Momentum starts at zero on the
// coarsest scale and is upsampled between scales; the initial maps enter
// every scale at that scale's low resolution, so the integrated map already
// composes the affine and deformable parts.
template <int D>
inline VsvfResult<D> optimize_vsvf_multiscale(const ScalarImage<D>& i0, const ScalarImage<D>& i1,
                                              const TransformMap<D>& affine_map_st,
                                              const TransformMap<D>& affine_map_ts,
                                              const VsvfConfig<D>& cfg) {
  cfg.validate();
  VsvfResult<D> out;
  VectorField<D> m_st, m_ts;
  out.traces = detail::vsvf_solve_scales(i0, i1, affine_map_st, affine_map_ts, cfg, m_st, m_ts,
                                         out.map_st, out.map_ts, out.warped, out.similarity_st,
                                         out.similarity_ts);
  out.momenta_st.push_back(std::move(m_st));
  out.momenta_ts.push_back(std::move(m_ts));
  return out;
}

// T sequential vSVF solves at the input resolution. Each pass starts from the
// previous pass's final maps with freshly zeroed momentum, so later passes
// refine what earlier passes left over. Traces accumulate across passes.
template <int D>
inline VsvfResult<D> multi_step_vsvf(const ScalarImage<D>& i0, const ScalarImage<D>& i1,
                                     const TransformMap<D>& init_map_st,
                                     const TransformMap<D>& init_map_ts,
                                     const VsvfConfig<D>& cfg) {
  cfg.validate();
  VsvfConfig<D> step_cfg = cfg;
  step_cfg.scales = {1.0};
  step_cfg.iterations = {cfg.iterations.back()};

  VsvfResult<D> out;
  TransformMap<D> cur_st = init_map_st;
  TransformMap<D> cur_ts = init_map_ts;
  for (int step = 0; step < cfg.n_steps; ++step) {
    VectorField<D> m_st, m_ts;
    TransformMap<D> map_st, map_ts;
    ScalarImage<D> warped;
    double sim_st = 0.0, sim_ts = 0.0;
    auto traces = detail::vsvf_solve_scales(i0, i1, cur_st, cur_ts, step_cfg, m_st, m_ts, map_st,
                                            map_ts, warped, sim_st, sim_ts);
    for (auto& t : traces) out.traces.push_back(std::move(t));
    out.momenta_st.push_back(std::move(m_st));
    out.momenta_ts.push_back(std::move(m_ts));
    cur_st = std::move(map_st);
    cur_ts = std::move(map_ts);
    out.warped = std::move(warped);
    out.similarity_st = sim_st;
    out.similarity_ts = sim_ts;
  }
  out.map_st = std::move(cur_st);
  out.map_ts = std::move(cur_ts);
  return out;
}

}  // namespace flowreg
