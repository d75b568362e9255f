#pragma once

#include "flowreg/affine.hpp"
#include "flowreg/autodiff.hpp"
#include "flowreg/vsvf.hpp"

// Recorded loss programs. Each program builds its computation graph once; an
// evaluation writes new leaf values, replays the forward pass, and (when
// gradients are requested) runs the adjoint sweep. Replays are deterministic:
// identical leaves reproduce values and gradients bitwise.

namespace flowreg {

// Symmetric affine objective:
//   (1 - sim(I0 o Phi_st, I1))/sigma^2 + lam_ar*(|A-I|^2 + |b|^2)  per direction
// + lam_as * inverse-consistency penalty on the parameter pair.
// lam_ar is a leaf so its schedule can change between evaluations.
// Parameters use the centered convention x' = A (x - c) + c + b about the
// domain center (see centered_to_plain); the inverse-consistency and
// deviation-from-identity penalties keep their algebraic form there.
template <int D>
class AffineLossProgram {
 public:
  AffineLossProgram(const ScalarImage<D>& i0, const ScalarImage<D>& i1,
                    const MkLnccConfig& sim, double lambda_as) {
    sim.validate();
    p_st_ = tape_.new_param(AffineParams<D>::packed_size(), true);
    p_ts_ = tape_.new_param(AffineParams<D>::packed_size(), true);
    lam_ar_ = tape_.new_scalar(0.0, false);
    const ad::FieldId img0 = ad::image_const(tape_, i0);
    const ad::FieldId img1 = ad::image_const(tape_, i1);

    const ad::FieldId map_st =
        ad::affine_map_node<D>(tape_, p_st_, i1.grid, domain_center(i1.grid));
    warped_st_ = ad::warp_node(tape_, img0, map_st);
    sim_st_ = ad::mk_lncc_node(tape_, warped_st_, img1, sim);
    const ad::ScalarId l_st =
        ad::s_add(tape_, ad::s_scale(tape_, ad::s_one_minus(tape_, sim_st_), match_weight),
                  ad::affine_reg_node(tape_, p_st_, lam_ar_));

    const ad::FieldId map_ts =
        ad::affine_map_node<D>(tape_, p_ts_, i0.grid, domain_center(i0.grid));
    warped_ts_ = ad::warp_node(tape_, img1, map_ts);
    sim_ts_ = ad::mk_lncc_node(tape_, warped_ts_, img0, sim);
    const ad::ScalarId l_ts =
        ad::s_add(tape_, ad::s_scale(tape_, ad::s_one_minus(tape_, sim_ts_), match_weight),
                  ad::affine_reg_node(tape_, p_ts_, lam_ar_));

    loss_ = ad::s_add(tape_, ad::s_add(tape_, l_st, l_ts),
                      ad::affine_sym_node(tape_, p_st_, p_ts_, lambda_as));
  }

  struct Eval {
    double loss = 0.0;
    AffineParams<D> grad_st, grad_ts;
    double sim_st = 0.0, sim_ts = 0.0;
  };

  Eval eval(const AffineParams<D>& g_st, const AffineParams<D>& g_ts, double lambda_ar) {
    set_leaves(g_st, g_ts, lambda_ar);
    tape_.replay();
    tape_.backward(loss_);
    Eval e;
    e.loss = tape_.s(loss_).val;
    e.grad_st = AffineParams<D>::unpack(tape_.p(p_st_).adj);
    e.grad_ts = AffineParams<D>::unpack(tape_.p(p_ts_).adj);
    e.sim_st = tape_.s(sim_st_).val;
    e.sim_ts = tape_.s(sim_ts_).val;
    for (const double v : tape_.p(p_st_).adj)
      require(std::isfinite(v), "grad_affine: non-finite adjoint");
    for (const double v : tape_.p(p_ts_).adj)
      require(std::isfinite(v), "grad_affine: non-finite adjoint");
    return e;
  }

  double value(const AffineParams<D>& g_st, const AffineParams<D>& g_ts, double lambda_ar) {
    set_leaves(g_st, g_ts, lambda_ar);
    tape_.replay();
    return tape_.s(loss_).val;
  }

  double last_sim_st() { return tape_.s(sim_st_).val; }
  double last_sim_ts() { return tape_.s(sim_ts_).val; }

 private:
  void set_leaves(const AffineParams<D>& g_st, const AffineParams<D>& g_ts, double lambda_ar) {
    tape_.p(p_st_).val = g_st.pack();
    tape_.p(p_ts_).val = g_ts.pack();
    tape_.s(lam_ar_).val = lambda_ar;
  }

  ad::Tape<D> tape_;
  ad::ParamId p_st_{}, p_ts_{};
  ad::ScalarId lam_ar_{}, sim_st_{}, sim_ts_{}, loss_{};
  ad::FieldId warped_st_{}, warped_ts_{};
};

// Symmetric vSVF objective over a momentum pair. The momenta live on the
// low-resolution grids of the two initial maps; the integrated maps are
// upsampled to the image grids before similarity and the inverse-consistency
// penalty. The graph mirrors vsvf_loss() term for term.
template <int D>
class VsvfLossProgram {
 public:
  VsvfLossProgram(const ScalarImage<D>& i0, const ScalarImage<D>& i1,
                  const TransformMap<D>& init_st, const TransformMap<D>& init_ts,
                  const VsvfConfig<D>& cfg, bool finest_scale)
      : lowres_st_(init_st.grid), lowres_ts_(init_ts.grid), lambda_vs_(cfg.lambda_vs) {
    cfg.validate();
    const MkLnccConfig sim_st_cfg = detail::effective_sim(cfg.similarity, i1.grid, finest_scale);
    const MkLnccConfig sim_ts_cfg = detail::effective_sim(cfg.similarity, i0.grid, finest_scale);
    const double dt = 1.0 / cfg.n_time_steps;

    m_st_ = ad::field_input(tape_, lowres_st_, D, true);
    m_ts_ = ad::field_input(tape_, lowres_ts_, D, true);
    const ad::FieldId img0 = ad::image_const(tape_, i0);
    const ad::FieldId img1 = ad::image_const(tape_, i1);

    const ad::FieldId v_st = ad::smooth_node(tape_, m_st_, cfg.kernel);
    ad::FieldId phi_st = ad::map_const(tape_, init_st);
    for (int s = 0; s < cfg.n_time_steps; ++s)
      phi_st = ad::rk4_step_node(tape_, phi_st, v_st, dt);
    map_st_full_ = (lowres_st_ == i1.grid) ? phi_st : ad::resample_node(tape_, phi_st, i1.grid);
    warped_st_ = ad::warp_node(tape_, img0, map_st_full_);
    sim_st_ = ad::mk_lncc_node(tape_, warped_st_, img1, sim_st_cfg);
    const ad::ScalarId l_st =
        ad::s_add(tape_, ad::s_scale(tape_, ad::s_one_minus(tape_, sim_st_), match_weight),
                  ad::s_scale(tape_, ad::reg_inner_node(tape_, m_st_, v_st), cfg.lambda_vr));

    const ad::FieldId v_ts = ad::smooth_node(tape_, m_ts_, cfg.kernel);
    ad::FieldId phi_ts = ad::map_const(tape_, init_ts);
    for (int s = 0; s < cfg.n_time_steps; ++s)
      phi_ts = ad::rk4_step_node(tape_, phi_ts, v_ts, dt);
    map_ts_full_ = (lowres_ts_ == i0.grid) ? phi_ts : ad::resample_node(tape_, phi_ts, i0.grid);
    warped_ts_ = ad::warp_node(tape_, img1, map_ts_full_);
    sim_ts_ = ad::mk_lncc_node(tape_, warped_ts_, img0, sim_ts_cfg);
    const ad::ScalarId l_ts =
        ad::s_add(tape_, ad::s_scale(tape_, ad::s_one_minus(tape_, sim_ts_), match_weight),
                  ad::s_scale(tape_, ad::reg_inner_node(tape_, m_ts_, v_ts), cfg.lambda_vr));

    const ad::ScalarId pair = ad::s_add(tape_, l_st, l_ts);
    if (cfg.lambda_vs > 0.0) {
      const ad::FieldId comp_t = ad::compose_node(tape_, map_ts_full_, map_st_full_);
      const ad::FieldId comp_s = ad::compose_node(tape_, map_st_full_, map_ts_full_);
      const ad::ScalarId sym =
          ad::s_scale(tape_, ad::s_add(tape_, ad::sq_dev_identity_node(tape_, comp_t, 1),
                                       ad::sq_dev_identity_node(tape_, comp_s, 1)),
                      0.5 * cfg.lambda_vs);
      loss_ = ad::s_add(tape_, pair, sym);
    } else {
      loss_ = pair;
    }
  }

  std::size_t n_params() const {
    return static_cast<std::size_t>(lowres_st_.voxels()) * D +
           static_cast<std::size_t>(lowres_ts_.voxels()) * D;
  }
  std::size_t n_params_st() const { return static_cast<std::size_t>(lowres_st_.voxels()) * D; }

  // Flat interface for the optimizer: x = [m_st | m_ts]. Writes the
  // concatenated gradient when grad is non-null and returns the loss.
  double eval_flat(const double* x, double* grad) {
    auto& mst = tape_.f(m_st_);
    auto& mts = tape_.f(m_ts_);
    const std::size_t nst = mst.val.size();
    const std::size_t nts = mts.val.size();
    for (std::size_t i = 0; i < nst + nts; ++i)
      require(std::isfinite(x[i]), "vsvf loss: non-finite momentum input");
    std::copy(x, x + nst, mst.val.begin());
    std::copy(x + nst, x + nst + nts, mts.val.begin());
    tape_.replay();
    if (grad) {
      tape_.backward(loss_);
      std::copy(mst.adj.begin(), mst.adj.end(), grad);
      std::copy(mts.adj.begin(), mts.adj.end(), grad + nst);
      for (std::size_t i = 0; i < nst + nts; ++i)
        require(std::isfinite(grad[i]), "grad_momentum: non-finite adjoint");
    }
    return tape_.s(loss_).val;
  }

  struct Eval {
    double loss = 0.0;
    VectorField<D> grad_st, grad_ts;
    double sim_st = 0.0, sim_ts = 0.0;
  };

  Eval eval(const VectorField<D>& m_st, const VectorField<D>& m_ts) {
    require(m_st.grid == lowres_st_ && m_ts.grid == lowres_ts_,
            "VsvfLossProgram: momentum grids must match the program's grids");
    std::vector<double> x(n_params());
    std::copy(m_st.v.begin(), m_st.v.end(), x.begin());
    std::copy(m_ts.v.begin(), m_ts.v.end(), x.begin() + m_st.v.size());
    std::vector<double> g(n_params());
    Eval e;
    e.loss = eval_flat(x.data(), g.data());
    e.grad_st = VectorField<D>(lowres_st_);
    e.grad_ts = VectorField<D>(lowres_ts_);
    std::copy(g.begin(), g.begin() + m_st.v.size(), e.grad_st.v.begin());
    std::copy(g.begin() + m_st.v.size(), g.end(), e.grad_ts.v.begin());
    e.sim_st = tape_.s(sim_st_).val;
    e.sim_ts = tape_.s(sim_ts_).val;
    return e;
  }

  double value(const VectorField<D>& m_st, const VectorField<D>& m_ts) {
    require(m_st.grid == lowres_st_ && m_ts.grid == lowres_ts_,
            "VsvfLossProgram: momentum grids must match the program's grids");
    std::vector<double> x(n_params());
    std::copy(m_st.v.begin(), m_st.v.end(), x.begin());
    std::copy(m_ts.v.begin(), m_ts.v.end(), x.begin() + m_st.v.size());
    return eval_flat(x.data(), nullptr);
  }

  double last_sim_st() { return tape_.s(sim_st_).val; }
  double last_sim_ts() { return tape_.s(sim_ts_).val; }

  TransformMap<D> map_st() const {
    return read_map(map_st_full_);
  }
  TransformMap<D> map_ts() const {
    return read_map(map_ts_full_);
  }
  ScalarImage<D> warped_st() const {
    const auto& s = tape_.f(warped_st_);
    ScalarImage<D> out(s.grid);
    out.v = s.val;
    return out;
  }

 private:
  TransformMap<D> read_map(ad::FieldId id) const {
    const auto& s = tape_.f(id);
    TransformMap<D> out(s.grid);
    out.v = s.val;
    return out;
  }

  mutable ad::Tape<D> tape_;
  GridSpec<D> lowres_st_, lowres_ts_;
  double lambda_vs_ = 0.0;
  ad::FieldId m_st_{}, m_ts_{}, map_st_full_{}, map_ts_full_{}, warped_st_{}, warped_ts_{};
  ad::ScalarId sim_st_{}, sim_ts_{}, loss_{};
};

// One-shot gradient helpers over the recorded programs.
template <int D>
inline std::pair<AffineParams<D>, AffineParams<D>> grad_affine(AffineLossProgram<D>& prog,
                                                               const AffineParams<D>& g_st,
                                                               const AffineParams<D>& g_ts,
                                                               double lambda_ar) {
  auto e = prog.eval(g_st, g_ts, lambda_ar);
  return {e.grad_st, e.grad_ts};
}

template <int D>
inline std::pair<VectorField<D>, VectorField<D>> grad_momentum(VsvfLossProgram<D>& prog,
                                                               const VectorField<D>& m_st,
                                                               const VectorField<D>& m_ts) {
  auto e = prog.eval(m_st, m_ts);
  return {std::move(e.grad_st), std::move(e.grad_ts)};
}

}  // namespace flowreg
