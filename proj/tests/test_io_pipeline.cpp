#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"

#include <flowreg/flowreg.hpp>

#include <filesystem>
#include <fstream>
#include <string>

using namespace flowreg;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("flowreg_tests_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void corrupt_tail(const fs::path& p, int delta) {
  auto bytes = slurp(p);
  if (delta < 0)
    bytes.resize(bytes.size() + delta);
  else
    bytes.append(static_cast<std::size_t>(delta), '\0');
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("io: scalar volumes round-trip through float32") {
  const auto dir = fresh_dir("scalar");
  const auto g = GridSpec<3>::normalized({6, 5, 4});
  const auto img = oracle::noise_image<3>(g, 201);
  const auto path = (dir / "img.vol").string();
  write_volume(img, path);

  const auto back = read_scalar<3>(path);
  REQUIRE(back.grid == g);
  for (std::size_t i = 0; i < img.v.size(); ++i) {
    const float f = static_cast<float>(img.v[i]);
    REQUIRE(back.v[i] == static_cast<double>(f));
  }

  // Writing the read-back values again reproduces the payload bytes.
  const auto path2 = (dir / "img2.vol").string();
  write_volume(back, path2);
  REQUIRE(slurp(path) == slurp(path2));
}

TEST_CASE("io: label volumes round-trip exactly") {
  const auto dir = fresh_dir("labels");
  const auto g = GridSpec<2>::normalized({7, 9});
  LabelImage<2> lab(g);
  Rng rng(202);
  for (auto& v : lab.v) v = static_cast<std::uint16_t>(rng.uniform() * 7.0);
  lab.v[3] = 65535;  // full u16 range survives
  const auto path = (dir / "lab.vol").string();
  write_volume(lab, path);
  const auto back = read_labels<2>(path);
  REQUIRE(back.grid == g);
  REQUIRE(back.v == lab.v);
}

TEST_CASE("io: transform maps round-trip and the header is readable") {
  const auto dir = fresh_dir("map");
  const auto g = GridSpec<2>::normalized({8, 6});
  auto m = identity_map(g);
  m.ch(0)[5] += 0.125;
  const auto path = (dir / "map.vol").string();
  write_volume(m, path);

  const auto info = read_volume_info(path);
  CHECK(info.dim == 2);
  CHECK(info.channels == 2);
  CHECK(info.dims[0] == 8);
  CHECK(info.dims[1] == 6);

  const auto back = read_map<2>(path);
  REQUIRE(back.grid == g);
  for (std::size_t i = 0; i < m.v.size(); ++i)
    REQUIRE(back.v[i] == static_cast<double>(static_cast<float>(m.v[i])));
}

TEST_CASE("io: malformed volumes are rejected") {
  const auto dir = fresh_dir("bad");
  const auto g = GridSpec<2>::normalized({6, 6});
  const auto img = oracle::noise_image<2>(g, 203);
  const auto path = (dir / "img.vol").string();
  write_volume(img, path);

  SECTION("bad magic") {
    auto bytes = slurp(path);
    bytes[0] = 'X';
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    CHECK_THROWS(read_scalar<2>(path));
  }
  SECTION("truncated payload") {
    corrupt_tail(path, -5);
    CHECK_THROWS(read_scalar<2>(path));
  }
  SECTION("trailing bytes") {
    corrupt_tail(path, 3);
    CHECK_THROWS(read_scalar<2>(path));
  }
  SECTION("wrong reader type") {
    CHECK_THROWS(read_labels<2>(path));  // dtype f32, not u16
    CHECK_THROWS(read_map<2>(path));     // 1 channel, not 2
    CHECK_THROWS(read_scalar<3>(path));  // dimension mismatch
  }
  SECTION("missing file") { CHECK_THROWS(read_scalar<2>((dir / "nope.vol").string())); }
}

TEST_CASE("io: writes do not leave temporary files behind") {
  const auto dir = fresh_dir("atomic");
  const auto g = GridSpec<2>::normalized({6, 6});
  write_volume(oracle::noise_image<2>(g, 204), (dir / "a.vol").string());
  int files = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    ++files;
    CHECK(e.path().extension() != ".tmp");
  }
  CHECK(files == 1);
}

TEST_CASE("io: low-resolution map written to disk resamples like the original") {
  const auto dir = fresh_dir("lowres");
  const auto g = GridSpec<2>::normalized({17, 17});
  auto m = identity_map(g);
  const auto bump = oracle::noise_field<2>(g, 205, 0.03, 1.2);
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] += bump.v[i];
  const auto half = resample_map(m, g.scaled(0.5));

  const auto path = (dir / "half.vol").string();
  write_volume(half, path);
  const auto from_disk = resample_map(read_map<2>(path), g);
  const auto in_memory = resample_map(half, g);
  for (std::size_t i = 0; i < from_disk.v.size(); ++i)
    REQUIRE(from_disk.v[i] == Catch::Approx(in_memory.v[i]).margin(1e-6));
}

TEST_CASE("config: defaults hold when the file is empty") {
  const auto p = params_from_config<3>(ConfigMap::parse_text(""));
  CHECK(p.affine.learning_rate == 1e-4);
  CHECK(p.affine.scales == std::vector<double>{0.25, 0.5, 1.0});
  CHECK(p.affine.iterations == std::vector<int>{200, 200, 50});
  CHECK(p.affine.c_ar == 10.0);
  CHECK(p.affine.k_ar == 4.0);
  CHECK(p.affine.lambda_as == 10.0);
  CHECK(p.vsvf.lambda_vr == 10.0);
  CHECK(p.vsvf.lambda_vs == 1e-4);
  CHECK(p.vsvf.n_time_steps == 10);
  CHECK(p.vsvf.lowres_factor == 0.5);
  CHECK(p.vsvf.n_steps == 1);
  CHECK(p.vsvf.kernel.sigmas == std::vector<double>{0.05, 0.10, 0.15, 0.20, 0.25});
  CHECK(p.vsvf.kernel.weights == std::vector<double>{0.067, 0.133, 0.200, 0.267, 0.333});
  CHECK(p.vsvf.similarity.terms.empty());  // derived per scale
}

TEST_CASE("config: comments, blank lines, and overrides parse") {
  const std::string text =
      "# registration settings\n"
      "\n"
      "vsvf_lambda_reg = 2.5\n"
      "vsvf_iterations = 30 30\n"
      "vsvf_scales = 0.5 1.0\n"
      "affine_learning_rate = 5e-5\n"
      "kernel_sigmas = 0.1 0.2\n"
      "kernel_weights = 0.4 0.6\n"
      "vsvf_time_steps = 6\n";
  const auto p = params_from_config<3>(ConfigMap::parse_text(text));
  CHECK(p.vsvf.lambda_vr == 2.5);
  CHECK(p.vsvf.iterations == std::vector<int>{30, 30});
  CHECK(p.vsvf.scales == std::vector<double>{0.5, 1.0});
  CHECK(p.affine.learning_rate == 5e-5);
  CHECK(p.vsvf.kernel.sigmas == std::vector<double>{0.1, 0.2});
  CHECK(p.vsvf.n_time_steps == 6);
}

TEST_CASE("config: window overrides configure both stages") {
  const std::string text =
      "lncc_windows = 4 8\n"
      "lncc_weights = 0.5 0.5\n"
      "lncc_stride = 2\n"
      "lncc_dilation = 1\n";
  const auto p = params_from_config<3>(ConfigMap::parse_text(text));
  REQUIRE(p.vsvf.similarity.terms.size() == 2);
  CHECK(p.vsvf.similarity.terms[0].cfg.window == 4);
  CHECK(p.vsvf.similarity.terms[0].cfg.stride == 2);
  CHECK(p.vsvf.similarity.terms[1].cfg.dilation == 1);
  REQUIRE(p.affine.similarity.terms.size() == 2);
  CHECK(p.affine.similarity.terms[1].cfg.window == 8);
}

TEST_CASE("config: unknown keys, duplicates, and orphan lncc settings fail") {
  CHECK_THROWS(params_from_config<3>(ConfigMap::parse_text("vsvf_lambda = 1\n")));
  CHECK_THROWS(ConfigMap::parse_text("vsvf_steps = 1\nvsvf_steps = 2\n"));
  CHECK_THROWS(params_from_config<3>(ConfigMap::parse_text("lncc_stride = 2\n")));
  CHECK_THROWS(ConfigMap::parse_text("not a key value line\n"));
}

TEST_CASE("normalize: percentile window maps to the unit range") {
  const auto g = GridSpec<3>::normalized({12, 12, 12});
  ScalarImage<3> img(g);
  Rng rng(206);
  for (auto& v : img.v) v = 40.0 + 20.0 * rng.uniform();
  const auto out = normalize_intensity(img);
  double lo = 1e300, hi = -1e300;
  for (const double v : out.v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo >= 0.0);
  CHECK(hi <= 1.0);
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);
}

TEST_CASE("normalize: invariant to intensity shifts") {
  const auto g = GridSpec<2>::normalized({16, 16});
  ScalarImage<2> a(g);
  Rng rng(207);
  for (auto& v : a.v) v = rng.uniform();
  ScalarImage<2> b(g);
  for (std::size_t i = 0; i < a.v.size(); ++i) b.v[i] = a.v[i] + 1000.0;
  const auto na = normalize_intensity(a);
  const auto nb = normalize_intensity(b);
  for (std::size_t i = 0; i < na.v.size(); ++i)
    REQUIRE(na.v[i] == Catch::Approx(nb.v[i]).margin(1e-9));
}

TEST_CASE("normalize: percentiles agree with the sorted oracle") {
  const auto g = GridSpec<2>::normalized({16, 16});
  ScalarImage<2> img(g);
  Rng rng(208);
  for (auto& v : img.v) v = 10.0 * rng.uniform() - 5.0;
  const double lo = oracle::percentile_sorted(img.v, 0.1);
  const double hi = oracle::percentile_sorted(img.v, 99.9);
  const auto out = normalize_intensity(img);
  for (std::size_t i = 0; i < img.v.size(); ++i) {
    double t = (img.v[i] - lo) / (hi - lo);
    t = std::min(std::max(t, 0.0), 1.0);
    REQUIRE(out.v[i] == Catch::Approx(t).margin(1e-9));
  }
}

TEST_CASE("normalize: constant images are rejected") {
  const auto g = GridSpec<2>::normalized({8, 8});
  ScalarImage<2> img(g);
  for (auto& v : img.v) v = 3.0;
  CHECK_THROWS(normalize_intensity(img));
}

TEST_CASE("pipeline: declared labels collect the sorted nonzero union") {
  const auto g = GridSpec<2>::normalized({6, 6});
  LabelImage<2> a(g), b(g);
  a.v[0] = 5;
  a.v[1] = 1;
  b.v[2] = 3;
  b.v[3] = 1;
  const auto labels = detail::declared_labels(a, b);
  CHECK(labels == std::vector<std::uint16_t>{1, 3, 5});
}

TEST_CASE("pipeline: affine method on an identical pair aligns perfectly") {
  const auto dir = fresh_dir("selfreg");
  SynthSpec<3> spec;
  spec.dims = {16, 16, 16};
  spec.seed = 211;
  spec.rotation_max_deg = 0.0;
  spec.scale_min = 1.0;
  spec.scale_max = 1.0;
  spec.translation_max = 0.0;
  spec.momentum_amplitude = 0.0;
  spec.noise_sigma = 0.0;
  const auto pair = make_pair(spec);
  write_volume(pair.i0, (dir / "src.vol").string());
  write_volume(pair.i1, (dir / "dst.vol").string());
  write_volume(pair.labels0, (dir / "lsrc.vol").string());
  write_volume(pair.labels1, (dir / "ldst.vol").string());
  {
    std::ofstream cfg(dir / "fast.cfg");
    cfg << "affine_scales = 0.5 1.0\naffine_iterations = 20 10\n";
  }

  RegistrationJob job;
  job.source = (dir / "src.vol").string();
  job.target = (dir / "dst.vol").string();
  job.labels_source = (dir / "lsrc.vol").string();
  job.labels_target = (dir / "ldst.vol").string();
  job.method = "affine";
  job.config_path = (dir / "fast.cfg").string();
  job.out_dir = (dir / "out").string();
  const auto rep = run_job(job);

  CHECK(rep.dice_mean == 1.0);
  CHECK(rep.folds == 0);
  CHECK(fs::exists(dir / "out" / "warped.vol"));
  CHECK(fs::exists(dir / "out" / "map.vol"));
  CHECK(fs::exists(dir / "out" / "map_ts.vol"));
  CHECK(fs::exists(dir / "out" / "warped_labels.vol"));
  CHECK(fs::exists(dir / "out" / "metrics.json"));
  CHECK(fs::exists(dir / "out" / "traces.json"));
}

TEST_CASE("pipeline: metrics JSON is byte-identical across reruns") {
  const auto dir = fresh_dir("determinism");
  SynthSpec<2> spec;
  spec.dims = {24, 24};
  spec.seed = 212;
  spec.momentum_amplitude = 0.08;
  const auto pair = make_pair(spec);
  write_volume(pair.i0, (dir / "src.vol").string());
  write_volume(pair.i1, (dir / "dst.vol").string());
  {
    std::ofstream cfg(dir / "fast.cfg");
    cfg << "affine_scales = 0.5 1.0\naffine_iterations = 15 10\n"
        << "vsvf_scales = 0.5 1.0\nvsvf_iterations = 5 5\n";
  }

  RegistrationJob job;
  job.source = (dir / "src.vol").string();
  job.target = (dir / "dst.vol").string();
  job.method = "avsm";
  job.config_path = (dir / "fast.cfg").string();

  job.out_dir = (dir / "out1").string();
  run_job(job);
  job.out_dir = (dir / "out2").string();
  run_job(job);

  auto canonical = [](const fs::path& p) {
    auto j = nlohmann::json::parse(slurp(p));
    j["seconds_affine"] = 0.0;
    j["seconds_vsvf"] = 0.0;
    return j.dump(2);
  };
  REQUIRE(canonical(dir / "out1" / "metrics.json") == canonical(dir / "out2" / "metrics.json"));
  REQUIRE(slurp(dir / "out1" / "traces.json") == slurp(dir / "out2" / "traces.json"));
  REQUIRE(slurp(dir / "out1" / "map.vol") == slurp(dir / "out2" / "map.vol"));
  REQUIRE(slurp(dir / "out1" / "warped.vol") == slurp(dir / "out2" / "warped.vol"));
}

TEST_CASE("pipeline: warped output equals warping by the final map") {
  // Library-level statement of the pipeline invariant: the warped image
  // reported by the optimizer is exactly warp(i0, map_st).
  const auto g = GridSpec<3>::normalized({12, 12, 12});
  SynthSpec<3> spec;
  spec.dims = {12, 12, 12};
  spec.seed = 213;
  spec.momentum_amplitude = 0.08;
  const auto pair = make_pair(spec);
  VsvfConfig<3> cfg;
  cfg.scales = {1.0};
  cfg.iterations = {5};
  cfg.lowres_factor = 0.5;
  const auto id = identity_map(g);
  const auto res = optimize_vsvf_multiscale(pair.i0, pair.i1, id, id, cfg);
  const auto direct = warp(pair.i0, res.map_st);
  REQUIRE(res.warped.v == direct.v);
}

TEST_CASE("pipeline: mismatched inputs are rejected") {
  const auto dir = fresh_dir("reject");
  const auto g2 = GridSpec<2>::normalized({12, 12});
  const auto g2b = GridSpec<2>::normalized({10, 10});
  write_volume(oracle::noise_image<2>(g2, 214), (dir / "a.vol").string());
  write_volume(oracle::noise_image<2>(g2b, 215), (dir / "b.vol").string());
  write_volume(oracle::noise_image<2>(g2, 216), (dir / "c.vol").string());
  LabelImage<2> lab(g2);
  write_volume(lab, (dir / "lab.vol").string());

  RegistrationJob job;
  job.source = (dir / "a.vol").string();
  job.target = (dir / "b.vol").string();
  CHECK_THROWS(run_job(job));  // grid mismatch

  job.target = (dir / "c.vol").string();
  job.method = "warp";
  CHECK_THROWS(run_job(job));  // unknown method

  job.method = "affine";
  job.labels_source = (dir / "lab.vol").string();
  CHECK_THROWS(run_job(job));  // labels must come in pairs
}
