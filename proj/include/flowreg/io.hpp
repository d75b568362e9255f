#pragma once

#include "flowreg/affine.hpp"
#include "flowreg/grid.hpp"
#include "flowreg/vsvf.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

// Volume container: a short plain-text header followed by a raw
// little-endian payload. Example:
//
//   flowvol 1
//   dim 3
//   dims 64 64 64
//   channels 1
//   dtype f32
//   extent 1 1 1
//   data
//   <dims-product * channels elements, axis 0 fastest, channel blocks last>
//
// Values are 32-bit floats (images, fields, maps) or 16-bit unsigned
// (labels). Payload bytes round-trip exactly through read+write.

namespace flowreg {

namespace detail {

inline void store_le32(std::uint32_t x, unsigned char* p) {
  p[0] = static_cast<unsigned char>(x);
  p[1] = static_cast<unsigned char>(x >> 8);
  p[2] = static_cast<unsigned char>(x >> 16);
  p[3] = static_cast<unsigned char>(x >> 24);
}

inline std::uint32_t load_le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline void store_le16(std::uint16_t x, unsigned char* p) {
  p[0] = static_cast<unsigned char>(x);
  p[1] = static_cast<unsigned char>(x >> 8);
}

inline std::uint16_t load_le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

// Writes the whole file to `path + ".tmp"` and renames, so readers never see
// a partial volume.
inline void atomic_write_bytes(const std::string& path, const std::string& header,
                               const std::vector<unsigned char>& payload) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), "write_volume: cannot open " + tmp);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    require(out.good(), "write_volume: write failed for " + tmp);
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0, "write_volume: rename failed for " + path);
}

template <int D>
inline std::string volume_header(const GridSpec<D>& g, int channels, const char* dtype) {
  std::ostringstream h;
  h << "flowvol 1\n";
  h << "dim " << D << "\n";
  h << "dims";
  for (int a = 0; a < D; ++a) h << ' ' << g.dims[a];
  h << "\nchannels " << channels << "\ndtype " << dtype << "\nextent";
  char buf[64];
  for (int a = 0; a < D; ++a) {
    std::snprintf(buf, sizeof buf, " %.17g", g.extent[a]);
    h << buf;
  }
  h << "\ndata\n";
  return h.str();
}

template <int D>
inline void write_f32_volume(const GridSpec<D>& g, const std::vector<double>& v, int channels,
                             const std::string& path) {
  std::vector<unsigned char> payload(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i)
    store_le32(std::bit_cast<std::uint32_t>(static_cast<float>(v[i])), &payload[i * 4]);
  atomic_write_bytes(path, volume_header(g, channels, "f32"), payload);
}

}  // namespace detail

struct VolumeInfo {
  int dim = 0;
  std::array<int, 3> dims{};  // first `dim` entries meaningful
  int channels = 0;
  std::string dtype;
  std::array<double, 3> extent{};
};

namespace detail {

inline std::string next_header_line(std::istream& in, const std::string& path) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "read_volume: truncated header in " + path);
  return line;
}

inline VolumeInfo read_header(std::istream& in, const std::string& path) {
  VolumeInfo info;
  require(next_header_line(in, path) == "flowvol 1", "read_volume: bad magic in " + path);

  const auto expect_key = [&](const std::string& line, const char* key) -> std::istringstream {
    std::istringstream s(line);
    std::string k;
    s >> k;
    require(k == key, "read_volume: expected '" + std::string(key) + "' line in " + path);
    return s;
  };

  {
    auto s = expect_key(next_header_line(in, path), "dim");
    require(static_cast<bool>(s >> info.dim) && (info.dim == 2 || info.dim == 3),
            "read_volume: dim must be 2 or 3 in " + path);
  }
  {
    auto s = expect_key(next_header_line(in, path), "dims");
    for (int a = 0; a < info.dim; ++a)
      require(static_cast<bool>(s >> info.dims[a]) && info.dims[a] >= 2,
              "read_volume: bad dims in " + path);
  }
  {
    auto s = expect_key(next_header_line(in, path), "channels");
    require(static_cast<bool>(s >> info.channels) && info.channels >= 1,
            "read_volume: bad channel count in " + path);
  }
  {
    auto s = expect_key(next_header_line(in, path), "dtype");
    s >> info.dtype;
    require(info.dtype == "f32" || info.dtype == "u16", "read_volume: bad dtype in " + path);
  }
  {
    auto s = expect_key(next_header_line(in, path), "extent");
    for (int a = 0; a < info.dim; ++a)
      require(static_cast<bool>(s >> info.extent[a]) && info.extent[a] > 0.0,
              "read_volume: bad extent in " + path);
  }
  require(next_header_line(in, path) == "data", "read_volume: expected 'data' line in " + path);
  return info;
}

inline std::vector<unsigned char> read_payload(std::istream& in, std::size_t bytes,
                                               const std::string& path) {
  std::vector<unsigned char> buf(bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  require(static_cast<std::size_t>(in.gcount()) == bytes, "read_volume: truncated payload in " + path);
  require(in.peek() == std::char_traits<char>::eof(), "read_volume: trailing bytes in " + path);
  return buf;
}

template <int D>
inline GridSpec<D> grid_from_info(const VolumeInfo& info, const std::string& path) {
  require(info.dim == D, "read_volume: dimension mismatch in " + path);
  GridSpec<D> g;
  for (int a = 0; a < D; ++a) {
    g.dims[a] = info.dims[a];
    g.extent[a] = info.extent[a];
  }
  return g;
}

template <int D>
inline void read_f32_into(const std::string& path, int channels, GridSpec<D>& grid,
                          std::vector<double>& v) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_volume: cannot open " + path);
  const VolumeInfo info = read_header(in, path);
  require(info.dtype == "f32", "read_volume: dtype mismatch in " + path);
  require(info.channels == channels, "read_volume: channel count mismatch in " + path);
  grid = grid_from_info<D>(info, path);
  const std::size_t n = static_cast<std::size_t>(grid.voxels()) * static_cast<std::size_t>(channels);
  const auto buf = read_payload(in, n * 4, path);
  v.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = static_cast<double>(std::bit_cast<float>(load_le32(&buf[i * 4])));
}

}  // namespace detail

inline VolumeInfo read_volume_info(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_volume: cannot open " + path);
  return detail::read_header(in, path);
}

template <int D>
inline void write_volume(const ScalarImage<D>& img, const std::string& path) {
  detail::write_f32_volume(img.grid, img.v, 1, path);
}

template <int D>
inline void write_volume(const VectorField<D>& f, const std::string& path) {
  detail::write_f32_volume(f.grid, f.v, D, path);
}

template <int D>
inline void write_volume(const TransformMap<D>& m, const std::string& path) {
  detail::write_f32_volume(m.grid, m.v, D, path);
}

template <int D>
inline void write_volume(const LabelImage<D>& labels, const std::string& path) {
  std::vector<unsigned char> payload(labels.v.size() * 2);
  for (std::size_t i = 0; i < labels.v.size(); ++i)
    detail::store_le16(labels.v[i], &payload[i * 2]);
  detail::atomic_write_bytes(path, detail::volume_header(labels.grid, 1, "u16"), payload);
}

template <int D>
inline ScalarImage<D> read_scalar(const std::string& path) {
  ScalarImage<D> img;
  detail::read_f32_into<D>(path, 1, img.grid, img.v);
  return img;
}

template <int D>
inline VectorField<D> read_field(const std::string& path) {
  VectorField<D> f;
  detail::read_f32_into<D>(path, D, f.grid, f.v);
  return f;
}

template <int D>
inline TransformMap<D> read_map(const std::string& path) {
  TransformMap<D> m;
  detail::read_f32_into<D>(path, D, m.grid, m.v);
  return m;
}

template <int D>
inline LabelImage<D> read_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_volume: cannot open " + path);
  const VolumeInfo info = detail::read_header(in, path);
  require(info.dtype == "u16", "read_volume: dtype mismatch in " + path);
  require(info.channels == 1, "read_volume: channel count mismatch in " + path);
  LabelImage<D> labels(detail::grid_from_info<D>(info, path));
  const std::size_t n = labels.v.size();
  const auto buf = detail::read_payload(in, n * 2, path);
  for (std::size_t i = 0; i < n; ++i) labels.v[i] = detail::load_le16(&buf[i * 2]);
  return labels;
}

// ---------------------------------------------------------------------------
// Flat key-value configuration. '#' starts a comment, blank lines are
// skipped, values are whitespace-separated tokens. Every key has a default
// matching the reference hyperparameters, so an empty file is a valid
// config. Unknown keys are errors.

template <int D>
struct PipelineParams {
  AffineOptConfig affine;
  VsvfConfig<D> vsvf;
};

class ConfigMap {
 public:
  static ConfigMap parse_text(const std::string& text) {
    ConfigMap cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      require(eq != std::string::npos,
              "config: line " + std::to_string(lineno) + " is not 'key = value'");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      require(!key.empty(), "config: empty key on line " + std::to_string(lineno));
      require(cfg.kv_.emplace(key, value).second, "config: duplicate key '" + key + "'");
    }
    return cfg;
  }

  static ConfigMap parse_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str());
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  double get_double(const std::string& key, double def) const {
    if (!has(key)) return def;
    const auto vals = get_doubles(key);
    require(vals.size() == 1, "config: '" + key + "' expects a single value");
    return vals[0];
  }

  int get_int(const std::string& key, int def) const {
    const double d = get_double(key, def);
    const int i = static_cast<int>(std::llround(d));
    require(static_cast<double>(i) == d, "config: '" + key + "' expects an integer");
    return i;
  }

  std::vector<double> get_doubles(const std::string& key) const {
    std::vector<double> out;
    std::istringstream s(kv_.at(key));
    double d;
    while (s >> d) out.push_back(d);
    require(s.eof(), "config: cannot parse numbers in '" + key + "'");
    return out;
  }

  std::vector<int> get_ints(const std::string& key) const {
    std::vector<int> out;
    for (double d : get_doubles(key)) {
      const int i = static_cast<int>(std::llround(d));
      require(static_cast<double>(i) == d, "config: '" + key + "' expects integers");
      out.push_back(i);
    }
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> kv_;
};

template <int D>
inline PipelineParams<D> params_from_config(const ConfigMap& cfg) {
  static const std::vector<std::string> known = {
      "affine_scales",     "affine_iterations", "affine_learning_rate", "affine_lambda_reg_c",
      "affine_lambda_reg_k", "affine_lambda_sym", "vsvf_scales",        "vsvf_iterations",
      "vsvf_lambda_reg",   "vsvf_lambda_sym",   "vsvf_time_steps",      "vsvf_lowres_factor",
      "vsvf_steps",        "kernel_sigmas",     "kernel_weights",       "lncc_windows",
      "lncc_weights",      "lncc_stride",       "lncc_dilation"};
  for (const auto& [key, value] : cfg.entries()) {
    bool ok = false;
    for (const auto& k : known) ok = ok || k == key;
    require(ok, "config: unknown key '" + key + "'");
  }

  PipelineParams<D> p;
  if (cfg.has("affine_scales")) p.affine.scales = cfg.get_doubles("affine_scales");
  if (cfg.has("affine_iterations")) p.affine.iterations = cfg.get_ints("affine_iterations");
  p.affine.learning_rate = cfg.get_double("affine_learning_rate", p.affine.learning_rate);
  p.affine.c_ar = cfg.get_double("affine_lambda_reg_c", p.affine.c_ar);
  p.affine.k_ar = cfg.get_double("affine_lambda_reg_k", p.affine.k_ar);
  p.affine.lambda_as = cfg.get_double("affine_lambda_sym", p.affine.lambda_as);

  if (cfg.has("vsvf_scales")) p.vsvf.scales = cfg.get_doubles("vsvf_scales");
  if (cfg.has("vsvf_iterations")) p.vsvf.iterations = cfg.get_ints("vsvf_iterations");
  p.vsvf.lambda_vr = cfg.get_double("vsvf_lambda_reg", p.vsvf.lambda_vr);
  p.vsvf.lambda_vs = cfg.get_double("vsvf_lambda_sym", p.vsvf.lambda_vs);
  p.vsvf.n_time_steps = cfg.get_int("vsvf_time_steps", p.vsvf.n_time_steps);
  p.vsvf.lowres_factor = cfg.get_double("vsvf_lowres_factor", p.vsvf.lowres_factor);
  p.vsvf.n_steps = cfg.get_int("vsvf_steps", p.vsvf.n_steps);

  if (cfg.has("kernel_sigmas")) p.vsvf.kernel.sigmas = cfg.get_doubles("kernel_sigmas");
  if (cfg.has("kernel_weights")) p.vsvf.kernel.weights = cfg.get_doubles("kernel_weights");

  // Explicit window list overrides the resolution-derived similarity at
  // every scale of both stages; stride 0 means window/4 per term.
  if (cfg.has("lncc_windows")) {
    const auto windows = cfg.get_ints("lncc_windows");
    std::vector<double> weights(windows.size(), 1.0 / static_cast<double>(windows.size()));
    if (cfg.has("lncc_weights")) weights = cfg.get_doubles("lncc_weights");
    require(weights.size() == windows.size(), "config: lncc_weights/lncc_windows length mismatch");
    const int stride = cfg.get_int("lncc_stride", 0);
    const int dilation = cfg.get_int("lncc_dilation", 1);
    MkLnccConfig sim;
    for (std::size_t i = 0; i < windows.size(); ++i) {
      LnccConfig lc;
      lc.window = windows[i];
      lc.stride = stride > 0 ? stride : std::max(1, windows[i] / 4);
      lc.dilation = dilation;
      sim.terms.push_back({weights[i], lc});
    }
    p.affine.similarity = sim;
    p.vsvf.similarity = sim;
  } else {
    require(!cfg.has("lncc_weights") && !cfg.has("lncc_stride") && !cfg.has("lncc_dilation"),
            "config: lncc_* keys need lncc_windows");
  }

  p.affine.validate();
  p.vsvf.validate();
  return p;
}

}  // namespace flowreg
