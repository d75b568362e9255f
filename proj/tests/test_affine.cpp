#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"

#include <flowreg/flowreg.hpp>

using namespace flowreg;

namespace {

template <int D>
AffineParams<D> random_params(std::uint64_t seed, double amp) {
  Rng rng(seed);
  AffineParams<D> p;
  for (int i = 0; i < D; ++i) {
    for (int j = 0; j < D; ++j) p.A[i][j] = (i == j ? 1.0 : 0.0) + amp * (2.0 * rng.uniform() - 1.0);
    p.b[i] = 0.5 * amp * (2.0 * rng.uniform() - 1.0);
  }
  return p;
}

}  // namespace

TEST_CASE("affine: identity parameters produce the identity map bitwise") {
  const auto g = GridSpec<3>::normalized({6, 5, 4});
  const auto id = AffineParams<3>::identity();
  const auto m = affine_to_map(id, g);
  const auto ref = identity_map(g);
  for (std::size_t i = 0; i < m.v.size(); ++i) REQUIRE(m.v[i] == ref.v[i]);
}

TEST_CASE("affine: translation shifts every map coordinate") {
  const auto g = GridSpec<2>::normalized({9, 9});
  auto p = AffineParams<2>::identity();
  p.b = {0.25, -0.125};
  const auto m = affine_to_map(p, g);
  const auto id = identity_map(g);
  for (std::int64_t i = 0; i < g.voxels(); ++i) {
    CHECK(m.ch(0)[i] == Catch::Approx(id.ch(0)[i] + 0.25).margin(1e-15));
    CHECK(m.ch(1)[i] == Catch::Approx(id.ch(1)[i] - 0.125).margin(1e-15));
  }
}

TEST_CASE("affine: warping a ramp through a known map is analytic") {
  const auto g = GridSpec<2>::normalized({17, 17});
  ScalarImage<2> img(g);
  for_each_voxel(g, [&](const std::array<int, 2>& c, std::int64_t i) {
    const double x = c[0] * g.spacing(0);
    const double y = c[1] * g.spacing(1);
    img.v[static_cast<std::size_t>(i)] = 2.0 * x + 3.0 * y + 0.25;
  });
  AffineParams<2> p;
  p.A = {{{0.9, 0.05}, {-0.03, 0.95}}};
  p.b = {0.03, 0.02};
  const auto out = warp(img, affine_to_map(p, g));
  for_each_voxel(g, [&](const std::array<int, 2>& c, std::int64_t i) {
    const double x = c[0] * g.spacing(0);
    const double y = c[1] * g.spacing(1);
    const auto q = p.apply({x, y});
    if (q[0] < 0 || q[0] > 1 || q[1] < 0 || q[1] > 1) return;  // clamped region
    const double expected = 2.0 * q[0] + 3.0 * q[1] + 0.25;
    CHECK(out.v[static_cast<std::size_t>(i)] == Catch::Approx(expected).margin(1e-6));
  });
}

TEST_CASE("affine: compose_step with the identity is a no-op") {
  const auto p = random_params<3>(61, 0.1);
  const auto id = AffineParams<3>::identity();
  const auto a = affine_compose_step(id, p);
  const auto b = affine_compose_step(p, id);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      CHECK(a.A[i][j] == p.A[i][j]);
      CHECK(b.A[i][j] == p.A[i][j]);
    }
    CHECK(a.b[i] == p.b[i]);
    CHECK(b.b[i] == p.b[i]);
  }
}

TEST_CASE("affine: compose_step matches pointwise application") {
  const auto inc = random_params<2>(62, 0.1);
  const auto acc = random_params<2>(63, 0.1);
  const auto comp = affine_compose_step(inc, acc);
  Rng rng(64);
  for (int t = 0; t < 20; ++t) {
    const std::array<double, 2> x{rng.uniform(), rng.uniform()};
    const auto direct = inc.apply(acc.apply(x));
    const auto fused = comp.apply(x);
    for (int a = 0; a < 2; ++a) CHECK(fused[a] == Catch::Approx(direct[a]).margin(1e-12));
  }
}

TEST_CASE("affine: compose_step is associative") {
  const auto p1 = random_params<3>(65, 0.08);
  const auto p2 = random_params<3>(66, 0.08);
  const auto p3 = random_params<3>(67, 0.08);
  const auto left = affine_compose_step(affine_compose_step(p1, p2), p3);
  const auto right = affine_compose_step(p1, affine_compose_step(p2, p3));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) CHECK(left.A[i][j] == Catch::Approx(right.A[i][j]).margin(1e-12));
    CHECK(left.b[i] == Catch::Approx(right.b[i]).margin(1e-12));
  }
}

TEST_CASE("affine: compose_step agrees with map-level composition") {
  const auto g = GridSpec<2>::normalized({33, 33});
  const auto inc = random_params<2>(68, 0.05);
  const auto acc = random_params<2>(69, 0.05);
  const auto fused_map = affine_to_map(affine_compose_step(inc, acc), g);
  const auto composed = compose(affine_to_map(inc, g), affine_to_map(acc, g));
  for_each_voxel(g, [&](const std::array<int, 2>& c, std::int64_t i) {
    for (int a = 0; a < 2; ++a)
      if (c[a] < 3 || c[a] > 29) return;
    for (int ch = 0; ch < 2; ++ch)
      CHECK(composed.ch(ch)[i] == Catch::Approx(fused_map.ch(ch)[i]).margin(1e-6));
  });
}

TEST_CASE("affine: inverse composes to the identity") {
  const auto p = random_params<3>(70, 0.1);
  const auto inv = affine_inverse(p);
  const auto comp = affine_compose_step(p, inv);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j)
      CHECK(comp.A[i][j] == Catch::Approx(i == j ? 1.0 : 0.0).margin(1e-12));
    CHECK(comp.b[i] == Catch::Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("affine: regularizer is zero at the identity and quadratic away") {
  CHECK(affine_reg_loss(AffineParams<3>::identity(), 5.0) == 0.0);

  auto t = AffineParams<3>::identity();
  t.b = {0.1, 0.0, 0.0};
  CHECK(affine_reg_loss(t, 1.0) == Catch::Approx(0.01).margin(1e-15));

  const auto p = random_params<3>(71, 0.2);
  double acc = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double d = p.A[i][j] - (i == j ? 1.0 : 0.0);
      acc += d * d;
    }
    acc += p.b[i] * p.b[i];
  }
  CHECK(affine_reg_loss(p, 10.0) == Catch::Approx(10.0 * acc).margin(1e-12));
}

TEST_CASE("affine: symmetry loss vanishes exactly on inverse pairs") {
  const auto id2 = AffineParams<2>::identity();
  CHECK(affine_sym_loss(id2, id2, 10.0) == 0.0);

  const auto p = random_params<2>(72, 0.1);
  const auto inv = affine_inverse(p);
  CHECK(affine_sym_loss(p, inv, 10.0) == Catch::Approx(0.0).margin(1e-12));
  CHECK(affine_sym_loss(inv, p, 10.0) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("affine: symmetry loss matches its closed form") {
  const auto p = random_params<3>(73, 0.15);
  const auto q = random_params<3>(74, 0.15);
  // lambda * (||A_ts A_st - I||_F^2 + ||A_ts b_st + b_ts||^2)
  const auto comp = affine_compose_step(q, p);
  double acc = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double d = comp.A[i][j] - (i == j ? 1.0 : 0.0);
      acc += d * d;
    }
    acc += comp.b[i] * comp.b[i];
  }
  CHECK(affine_sym_loss(p, q, 7.0) == Catch::Approx(7.0 * acc).margin(1e-12));
}

TEST_CASE("affine: regularization weight schedule") {
  // c * k / (k + exp(n / k)) with c = 10, k = 4.
  CHECK(lambda_ar_schedule(0) == Catch::Approx(40.0 / 5.0).margin(1e-15));
  CHECK(lambda_ar_schedule(8) == Catch::Approx(40.0 / (4.0 + std::exp(2.0))).margin(1e-12));
  double prev = lambda_ar_schedule(0);
  for (int n = 1; n <= 50; ++n) {
    const double cur = lambda_ar_schedule(n);
    CHECK(cur < prev);
    CHECK(cur > 0.0);
    prev = cur;
  }
  CHECK(lambda_ar_schedule(0) <= 10.0 * 4.0 / 5.0 + 1e-15);
}

TEST_CASE("affine: total loss vanishes for aligned images at the identity") {
  const auto g = GridSpec<2>::normalized({16, 16});
  const auto img = oracle::noise_image<2>(g, 75, 0.5);
  const auto id = AffineParams<2>::identity();
  AffineLossConfig<2> cfg;
  cfg.sim.terms.push_back({1.0, {4, 2, 1}});
  cfg.lambda_ar = 0.0;
  cfg.lambda_as = 10.0;
  const double loss = affine_total_loss(img, img, id, id, cfg);
  CHECK(loss == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("affine: total loss is the sum of its documented terms") {
  const auto g = GridSpec<2>::normalized({16, 16});
  const auto i0 = oracle::noise_image<2>(g, 76, 0.5);
  const auto i1 = oracle::noise_image<2>(g, 77, 0.5);
  const auto p = random_params<2>(78, 0.05);
  const auto q = random_params<2>(79, 0.05);
  AffineLossConfig<2> cfg;
  cfg.sim.terms.push_back({1.0, {4, 2, 1}});
  cfg.lambda_ar = 2.5;
  cfg.lambda_as = 10.0;

  const auto w_st = warp(i0, affine_to_map(p, g));
  const auto w_ts = warp(i1, affine_to_map(q, g));
  double expected =
      match_weight * (1.0 - mk_lncc(w_st, i1, cfg.sim)) + affine_reg_loss(p, cfg.lambda_ar);
  expected +=
      match_weight * (1.0 - mk_lncc(w_ts, i0, cfg.sim)) + affine_reg_loss(q, cfg.lambda_ar);
  expected += affine_sym_loss(p, q, cfg.lambda_as);
  CHECK(affine_total_loss(i0, i1, p, q, cfg) == Catch::Approx(expected).margin(1e-12));
}
