#pragma once

#include "flowreg/interp.hpp"
#include "flowreg/io.hpp"
#include "flowreg/metrics.hpp"
#include "flowreg/optimize.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace flowreg {

namespace detail {

// Exact order statistic with linear interpolation at fractional ranks
// (rank = q/100 * (N-1)). Mutates `work`.
inline double percentile(std::vector<double>& work, double q) {
  const std::size_t n = work.size();
  const double rank = q / 100.0 * static_cast<double>(n - 1);
  const auto k = static_cast<std::size_t>(rank);
  const double frac = rank - static_cast<double>(k);
  std::nth_element(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(k), work.end());
  const double vk = work[k];
  if (frac == 0.0 || k + 1 == n) return vk;
  const double vk1 = *std::min_element(work.begin() + static_cast<std::ptrdiff_t>(k) + 1, work.end());
  return vk + frac * (vk1 - vk);
}

}  // namespace detail

// Maps the 0.1th percentile to 0 and the 99.9th to 1, clamping the tails.
template <int D>
ScalarImage<D> normalize_intensity(const ScalarImage<D>& img) {
  require(img.grid.voxels() >= 2, "normalize_intensity: image too small");
  std::vector<double> work = img.v;
  const double lo = detail::percentile(work, 0.1);
  const double hi = detail::percentile(work, 99.9);
  require(hi > lo, "normalize_intensity: constant image");

  ScalarImage<D> out(img.grid);
  const double inv = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < img.v.size(); ++i) {
    const double t = (img.v[i] - lo) * inv;
    out.v[i] = t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
  }
  return out;
}

struct RegistrationJob {
  std::string source, target;
  std::string labels_source, labels_target;  // both or neither
  std::string method = "avsm";               // affine | vsvf | avsm
  std::string config_path;                   // empty = built-in defaults
  std::string out_dir = ".";

  // Command-line overrides, applied on top of the config file.
  double lowres_factor = 0.0;  // 0 keeps the config value
  int steps = 0;               // 0 keeps the config value
  std::vector<double> scales;  // empty keeps the config values
};

namespace detail {

// Stretches or truncates per-scale iteration lists when a scale override
// changes the number of scales; extra scales reuse the last count.
inline void fit_iterations(std::vector<int>& iters, std::size_t n_scales) {
  if (iters.empty()) iters.push_back(50);
  while (iters.size() < n_scales) iters.push_back(iters.back());
  iters.resize(n_scales);
}

template <int D>
PipelineParams<D> job_params(const RegistrationJob& job) {
  PipelineParams<D> p;
  if (!job.config_path.empty()) p = params_from_config<D>(ConfigMap::parse_file(job.config_path));
  if (job.lowres_factor > 0.0) p.vsvf.lowres_factor = job.lowres_factor;
  if (job.steps > 0) p.vsvf.n_steps = job.steps;
  if (!job.scales.empty()) {
    p.affine.scales = job.scales;
    p.vsvf.scales = job.scales;
    fit_iterations(p.affine.iterations, job.scales.size());
    fit_iterations(p.vsvf.iterations, job.scales.size());
  }
  p.affine.validate();
  p.vsvf.validate();
  return p;
}

// Sorted union of nonzero labels present in either image.
template <int D>
std::vector<std::uint16_t> declared_labels(const LabelImage<D>& a, const LabelImage<D>& b) {
  std::set<std::uint16_t> s;
  for (auto l : a.v)
    if (l != 0) s.insert(l);
  for (auto l : b.v)
    if (l != 0) s.insert(l);
  return {s.begin(), s.end()};
}

inline void atomic_write_text(const std::string& path, const std::string& text) {
  atomic_write_bytes(path, text, {});
}

template <int D>
MetricsReport run_job_typed(const RegistrationJob& job) {
  using clock = std::chrono::steady_clock;
  require(job.method == "affine" || job.method == "vsvf" || job.method == "avsm",
          "run_job: method must be affine, vsvf, or avsm");
  const PipelineParams<D> params = job_params<D>(job);

  const ScalarImage<D> i0 = normalize_intensity(read_scalar<D>(job.source));
  const ScalarImage<D> i1 = normalize_intensity(read_scalar<D>(job.target));
  require(i0.grid == i1.grid, "run_job: source and target must share a grid");

  require(job.labels_source.empty() == job.labels_target.empty(),
          "run_job: provide label volumes for both images or neither");
  const bool have_labels = !job.labels_source.empty();
  LabelImage<D> labels0, labels1;
  if (have_labels) {
    labels0 = read_labels<D>(job.labels_source);
    labels1 = read_labels<D>(job.labels_target);
    require(labels0.grid == i0.grid && labels1.grid == i1.grid,
            "run_job: label grids must match the image grids");
  }

  MetricsReport report;
  std::vector<std::vector<double>> affine_traces, vsvf_traces;
  TransformMap<D> map_st, map_ts;
  ScalarImage<D> warped;

  TransformMap<D> init_st = identity_map(i1.grid);
  TransformMap<D> init_ts = identity_map(i0.grid);
  if (job.method == "affine" || job.method == "avsm") {
    const auto t0 = clock::now();
    const AffineOptResult<D> ar = optimize_affine_multiscale(i0, i1, params.affine);
    report.seconds_affine = std::chrono::duration<double>(clock::now() - t0).count();
    affine_traces = ar.traces;
    init_st = affine_to_map(ar.params_st, i1.grid);
    init_ts = affine_to_map(ar.params_ts, i0.grid);
  }

  if (job.method == "affine") {
    map_st = std::move(init_st);
    map_ts = std::move(init_ts);
    warped = warp(i0, map_st);
  } else {
    const auto t0 = clock::now();
    VsvfResult<D> vr = optimize_vsvf_multiscale(i0, i1, init_st, init_ts, params.vsvf);
    if (params.vsvf.n_steps > 1) {
      VsvfConfig<D> refine = params.vsvf;
      refine.n_steps = params.vsvf.n_steps - 1;
      VsvfResult<D> rr = multi_step_vsvf(i0, i1, vr.map_st, vr.map_ts, refine);
      for (auto& t : rr.traces) vr.traces.push_back(std::move(t));
      vr.map_st = std::move(rr.map_st);
      vr.map_ts = std::move(rr.map_ts);
      vr.warped = std::move(rr.warped);
    }
    report.seconds_vsvf = std::chrono::duration<double>(clock::now() - t0).count();
    vsvf_traces = std::move(vr.traces);
    map_st = std::move(vr.map_st);
    map_ts = std::move(vr.map_ts);
    warped = std::move(vr.warped);
  }

  const FoldReport folds = count_folds(map_st);
  report.folds = folds.count;
  report.folds_mean_abs_det = folds.mean_abs_det;
  report.symmetry = symmetry_metric(map_st, map_ts);

  LabelImage<D> warped_labels;
  if (have_labels) {
    warped_labels = warp_labels(labels0, map_st);
    const DiceResult d = dice(warped_labels, labels1, declared_labels(labels0, labels1));
    report.dice_per_label = d.per_label;
    report.dice_mean = d.mean;
  }

  namespace fs = std::filesystem;
  fs::create_directories(job.out_dir);
  const auto out = [&](const char* name) { return (fs::path(job.out_dir) / name).string(); };
  write_volume(warped, out("warped.vol"));
  write_volume(map_st, out("map.vol"));
  write_volume(map_ts, out("map_ts.vol"));
  if (have_labels) write_volume(warped_labels, out("warped_labels.vol"));

  nlohmann::json metrics;
  if (have_labels) {
    metrics["dice_mean"] = report.dice_mean;
    for (const auto& [label, d] : report.dice_per_label)
      metrics["dice_per_label"][std::to_string(label)] = d;
  } else {
    metrics["dice_mean"] = nullptr;
    metrics["dice_per_label"] = nlohmann::json::object();
  }
  metrics["folds"] = report.folds;
  metrics["folds_mean_abs_det"] = report.folds_mean_abs_det;
  metrics["symmetry"] = report.symmetry;
  metrics["seconds_affine"] = report.seconds_affine;
  metrics["seconds_vsvf"] = report.seconds_vsvf;
  atomic_write_text(out("metrics.json"), metrics.dump(2) + "\n");

  nlohmann::json traces;
  traces["affine"] = affine_traces;
  traces["vsvf"] = vsvf_traces;
  atomic_write_text(out("traces.json"), traces.dump(2) + "\n");

  return report;
}

}  // namespace detail

// Reads the inputs, runs the selected pipeline, writes artifacts
// (warped.vol, map.vol, map_ts.vol, warped_labels.vol, metrics.json,
// traces.json) into the output directory, and returns the metrics.
inline MetricsReport run_job(const RegistrationJob& job) {
  const VolumeInfo info = read_volume_info(job.source);
  return info.dim == 2 ? detail::run_job_typed<2>(job) : detail::run_job_typed<3>(job);
}

}  // namespace flowreg
