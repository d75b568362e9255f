#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"

#include <flowreg/flowreg.hpp>

using namespace flowreg;

TEST_CASE("advect: zero velocity leaves the map untouched") {
  const auto g = GridSpec<3>::normalized({8, 7, 6});
  const auto m = identity_map(g);
  VectorField<3> v(g);
  const auto out = advect_map(m, v, 10);
  for (std::size_t i = 0; i < m.v.size(); ++i) REQUIRE(out.v[i] == m.v[i]);
}

TEST_CASE("advect: constant velocity translates the identity map") {
  const auto g = GridSpec<3>::normalized({16, 16, 16});
  VectorField<3> v(g);
  const std::array<double, 3> c{0.07, -0.03, 0.05};
  for (int ch = 0; ch < 3; ++ch)
    for (std::int64_t i = 0; i < g.voxels(); ++i) v.ch(ch)[i] = c[ch];
  const auto out = advect_map(identity_map(g), v, 10);
  const auto id = identity_map(g);
  for (int ch = 0; ch < 3; ++ch)
    for (std::int64_t i = 0; i < g.voxels(); ++i)
      REQUIRE(out.ch(ch)[i] == Catch::Approx(id.ch(ch)[i] - c[ch]).margin(1e-6));
}

TEST_CASE("advect: linear velocity integrates to a matrix exponential") {
  const auto g = GridSpec<3>::normalized({16, 16, 16});
  const std::array<std::array<double, 3>, 3> M{
      {{0.20, 0.10, 0.00}, {-0.10, 0.15, 0.05}, {0.00, -0.05, 0.25}}};
  VectorField<3> v(g);
  const auto id = identity_map(g);
  for_each_voxel(g, [&](const std::array<int, 3>&, std::int64_t i) {
    for (int r = 0; r < 3; ++r) {
      double acc = 0.0;
      for (int cidx = 0; cidx < 3; ++cidx) acc += M[r][cidx] * id.ch(cidx)[i];
      v.ch(r)[i] = acc;
    }
  });
  const auto out = advect_map(identity_map(g), v, 10);

  // The flow of dx/dt = -Mx for unit time is exp(-M). Only voxels whose whole
  // trajectory stays inside the domain see the unclamped field.
  std::array<std::array<double, 3>, 3> negM{};
  for (int r = 0; r < 3; ++r)
    for (int cidx = 0; cidx < 3; ++cidx) negM[r][cidx] = -M[r][cidx];
  const auto E = oracle::expm<3>(negM);

  int checked = 0;
  for_each_voxel(g, [&](const std::array<int, 3>&, std::int64_t i) {
    std::array<double, 3> x{};
    for (int a = 0; a < 3; ++a) x[a] = id.ch(a)[i];
    bool inside = true;
    for (int t = 0; t <= 10 && inside; ++t) {
      std::array<std::array<double, 3>, 3> s{};
      for (int r = 0; r < 3; ++r)
        for (int cidx = 0; cidx < 3; ++cidx) s[r][cidx] = negM[r][cidx] * (t / 10.0);
      const auto Et = oracle::expm<3>(s);
      for (int r = 0; r < 3; ++r) {
        double acc = 0.0;
        for (int cidx = 0; cidx < 3; ++cidx) acc += Et[r][cidx] * x[cidx];
        if (acc < 0.02 || acc > 0.98) inside = false;
      }
    }
    if (!inside) return;
    ++checked;
    for (int r = 0; r < 3; ++r) {
      double expected = 0.0;
      for (int cidx = 0; cidx < 3; ++cidx) expected += E[r][cidx] * x[cidx];
      REQUIRE(out.ch(r)[i] == Catch::Approx(expected).margin(1e-4));
    }
  });
  CHECK(checked > 100);  // the interior filter must leave a real sample
}

TEST_CASE("advect: step count must be positive") {
  const auto g = GridSpec<2>::normalized({6, 6});
  VectorField<2> v(g);
  CHECK_THROWS(advect_map(identity_map(g), v, 0));
}

TEST_CASE("vsvf_unit: zero momentum is a fixed point") {
  const auto g = GridSpec<3>::normalized({8, 8, 8});
  VectorField<3> m(g);
  VsvfConfig<3> cfg;
  const auto init = identity_map(g);
  const auto [v, phi] = vsvf_unit(m, init, cfg);
  for (std::size_t i = 0; i < v.v.size(); ++i) REQUIRE(v.v[i] == 0.0);
  for (std::size_t i = 0; i < phi.v.size(); ++i) REQUIRE(phi.v[i] == init.v[i]);
}

TEST_CASE("vsvf_unit: velocity is the smoothed momentum") {
  const auto g = GridSpec<3>::normalized({9, 9, 9});
  VectorField<3> m(g);
  m.ch(0)[4 + 9 * (4 + 9 * 4)] = 1.0;
  VsvfConfig<3> cfg;
  const auto [v, phi] = vsvf_unit(m, identity_map(g), cfg);
  const auto ref = smooth(m, cfg.kernel);
  for (std::size_t i = 0; i < v.v.size(); ++i) REQUIRE(v.v[i] == ref.v[i]);

  // First-order transport: the map at the impulse moves against the velocity.
  const std::int64_t c = 4 + 9 * (4 + 9 * 4);
  const double vc = v.ch(0)[c];
  REQUIRE(vc > 0.0);
  const double moved = phi.ch(0)[c] - identity_map(g).ch(0)[c];
  CHECK(moved < 0.0);
  CHECK(std::abs(moved + vc) < 0.25 * vc);  // within O(|v|^2) of -v
}

TEST_CASE("vsvf_loss: perfectly aligned inputs give zero loss") {
  const auto g = GridSpec<3>::normalized({16, 16, 16});
  const auto img = oracle::noise_image<3>(g, 131, 0.8);
  VectorField<3> m(g);
  VsvfConfig<3> cfg;
  const auto id = identity_map(g);
  const auto [v_st, phi_st] = vsvf_unit(m, id, cfg);
  const auto [v_ts, phi_ts] = vsvf_unit(m, id, cfg);
  const double loss = vsvf_loss(img, img, phi_st, phi_ts, m, m, v_st, v_ts, cfg);
  CHECK(loss == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("vsvf_loss: swapping source and target is bitwise invariant") {
  const auto g = GridSpec<3>::normalized({12, 12, 12});
  const auto i0 = oracle::noise_image<3>(g, 132, 0.8);
  const auto i1 = oracle::noise_image<3>(g, 133, 0.8);
  const auto m_st = oracle::noise_field<3>(g, 134, 0.08, 1.0);
  const auto m_ts = oracle::noise_field<3>(g, 135, 0.08, 1.0);
  VsvfConfig<3> cfg;
  const auto id = identity_map(g);
  const auto [v_st, phi_st] = vsvf_unit(m_st, id, cfg);
  const auto [v_ts, phi_ts] = vsvf_unit(m_ts, id, cfg);
  const double a = vsvf_loss(i0, i1, phi_st, phi_ts, m_st, m_ts, v_st, v_ts, cfg);
  const double b = vsvf_loss(i1, i0, phi_ts, phi_st, m_ts, m_st, v_ts, v_st, cfg);
  REQUIRE(a == b);
}

TEST_CASE("vsvf_loss: equals the sum of its documented terms") {
  const auto g = GridSpec<3>::normalized({12, 12, 12});
  const auto i0 = oracle::noise_image<3>(g, 136, 0.8);
  const auto i1 = oracle::noise_image<3>(g, 137, 0.8);
  const auto m_st = oracle::noise_field<3>(g, 138, 0.06, 1.0);
  const auto m_ts = oracle::noise_field<3>(g, 139, 0.06, 1.0);
  VsvfConfig<3> cfg;
  const auto id = identity_map(g);
  const auto [v_st, phi_st] = vsvf_unit(m_st, id, cfg);
  const auto [v_ts, phi_ts] = vsvf_unit(m_ts, id, cfg);

  const auto sim_cfg = make_scale_sim(g, true);
  const auto w_st = warp(i0, phi_st);
  const auto w_ts = warp(i1, phi_ts);
  double expected =
      match_weight * (1.0 - mk_lncc(w_st, i1, sim_cfg)) + cfg.lambda_vr * reg_inner(m_st, v_st);
  expected +=
      match_weight * (1.0 - mk_lncc(w_ts, i0, sim_cfg)) + cfg.lambda_vr * reg_inner(m_ts, v_ts);

  // Inverse-consistency: squared deviation from identity of both composition
  // orders summed over the one-voxel interior, averaged.
  auto sq_dev = [&](const TransformMap<3>& comp) {
    double acc = 0.0;
    for_each_voxel(g, [&](const std::array<int, 3>& c, std::int64_t i) {
      for (int a = 0; a < 3; ++a)
        if (c[a] < 1 || c[a] >= g.dims[a] - 1) return;
      for (int a = 0; a < 3; ++a) {
        const double d = comp.ch(a)[i] - c[a] * g.spacing(a);
        acc += d * d;
      }
    });
    return acc;
  };
  expected += 0.5 * cfg.lambda_vs *
              (sq_dev(compose(phi_ts, phi_st)) + sq_dev(compose(phi_st, phi_ts)));

  const double loss = vsvf_loss(i0, i1, phi_st, phi_ts, m_st, m_ts, v_st, v_ts, cfg);
  CHECK(loss == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("vsvf_loss: inverse initial maps make the consistency term small") {
  const auto g = GridSpec<3>::normalized({12, 12, 12});
  const auto img = oracle::noise_image<3>(g, 140, 0.8);
  auto p = AffineParams<3>::identity();
  p.A[0][0] = 0.94;
  p.A[1][1] = 1.02;
  p.b = {0.02, -0.01, 0.015};
  const auto q = affine_inverse(p);
  VectorField<3> m(g);
  VsvfConfig<3> cfg;
  cfg.lambda_vs = 1.0;  // make the consistency term visible
  const auto [v_st, phi_st] = vsvf_unit(m, affine_to_map(p, g), cfg);
  const auto [v_ts, phi_ts] = vsvf_unit(m, affine_to_map(q, g), cfg);

  // Zero momentum: maps stay affine, compositions are exact inverses up to
  // interpolation of an affine function, which is exact in the interior.
  const auto comp = compose(phi_ts, phi_st);
  const auto id = identity_map(g);
  for_each_voxel(g, [&](const std::array<int, 3>& c, std::int64_t i) {
    for (int a = 0; a < 3; ++a)
      if (c[a] < 2 || c[a] >= g.dims[a] - 2) return;
    for (int a = 0; a < 3; ++a)
      CHECK(comp.ch(a)[i] == Catch::Approx(id.ch(a)[i]).margin(1e-9));
  });
}

TEST_CASE("vsvf: program loss agrees with the plain evaluation path") {
  const auto g = GridSpec<3>::normalized({10, 10, 10});
  const auto i0 = oracle::noise_image<3>(g, 141, 0.8);
  const auto i1 = oracle::noise_image<3>(g, 142, 0.8);
  const auto m_st = oracle::noise_field<3>(g, 143, 0.05, 1.0);
  const auto m_ts = oracle::noise_field<3>(g, 144, 0.05, 1.0);
  VsvfConfig<3> cfg;
  cfg.n_time_steps = 5;
  const auto id = identity_map(g);

  VsvfLossProgram<3> prog(i0, i1, id, id, cfg, true);
  const double prog_loss = prog.value(m_st, m_ts);

  const auto [v_st, phi_st] = vsvf_unit(m_st, id, cfg);
  const auto [v_ts, phi_ts] = vsvf_unit(m_ts, id, cfg);
  const double plain_loss = vsvf_loss(i0, i1, phi_st, phi_ts, m_st, m_ts, v_st, v_ts, cfg);
  CHECK(prog_loss == Catch::Approx(plain_loss).margin(1e-12));
}
