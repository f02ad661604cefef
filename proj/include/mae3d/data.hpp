#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mae3d/pointcloud.hpp"
#include "mae3d/rng.hpp"

namespace mae3d {

struct MeshSpec {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::size_t, 3>> faces;
};

namespace detail {
inline std::runtime_error off_error(std::size_t line, const std::string& what) {
  return std::runtime_error("OFF parse error at line " + std::to_string(line) + ": " + what);
}
}  // namespace detail

/// Parse an OFF mesh. Accepts both the standard two-line header and the
/// ModelNet40 variant where the counts are glued to the magic ("OFF490 582 0").
/// Polygon faces are triangulated by fan. Malformed input is rejected.
inline MeshSpec parse_off(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;

  auto next_content_line = [&](std::string& out) -> bool {
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      if (line.find_first_not_of(" \t\r\n") != std::string::npos) {
        out = line;
        return true;
      }
    }
    return false;
  };

  std::string header;
  if (!next_content_line(header)) throw detail::off_error(lineno, "empty file");
  std::size_t pos = header.find_first_not_of(" \t");
  if (header.compare(pos, 3, "OFF") != 0) throw detail::off_error(lineno, "missing OFF magic");
  std::string counts_text = header.substr(pos + 3);

  if (counts_text.find_first_not_of(" \t\r") == std::string::npos) {
    if (!next_content_line(counts_text)) throw detail::off_error(lineno, "missing counts");
  }
  long long nv = 0, nf = 0, ne = 0;
  {
    std::istringstream cs(counts_text);
    if (!(cs >> nv >> nf >> ne) || nv < 0 || nf < 0)
      throw detail::off_error(lineno, "malformed counts '" + counts_text + "'");
  }

  MeshSpec mesh;
  mesh.vertices.reserve(static_cast<std::size_t>(nv));
  for (long long i = 0; i < nv; ++i) {
    std::string vline;
    if (!next_content_line(vline)) throw detail::off_error(lineno, "unexpected end of vertices");
    std::istringstream vs(vline);
    Vec3 v;
    if (!(vs >> v[0] >> v[1] >> v[2])) throw detail::off_error(lineno, "malformed vertex");
    if (!std::isfinite(v[0]) || !std::isfinite(v[1]) || !std::isfinite(v[2]))
      throw detail::off_error(lineno, "non-finite vertex");
    mesh.vertices.push_back(v);
  }
  for (long long i = 0; i < nf; ++i) {
    std::string fline;
    if (!next_content_line(fline)) throw detail::off_error(lineno, "unexpected end of faces");
    std::istringstream fs(fline);
    long long degree = 0;
    if (!(fs >> degree) || degree < 3) throw detail::off_error(lineno, "malformed face degree");
    std::vector<std::size_t> idx(static_cast<std::size_t>(degree));
    for (auto& ix : idx) {
      long long v = -1;
      if (!(fs >> v) || v < 0 || v >= nv)
        throw detail::off_error(lineno, "face index out of range");
      ix = static_cast<std::size_t>(v);
    }
    for (std::size_t t = 1; t + 1 < idx.size(); ++t)
      mesh.faces.push_back({idx[0], idx[t], idx[t + 1]});
  }
  return mesh;
}

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 u{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const Vec3 v{c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  const Vec3 n{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
  return 0.5 * std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
}

/// Area-weighted surface sampling with barycentric-uniform points per face.
inline PointCloud sample_surface(const MeshSpec& mesh, std::size_t n, Rng& rng) {
  if (mesh.faces.empty()) throw std::invalid_argument("sample_surface: mesh has no faces");
  std::vector<double> cumulative;
  cumulative.reserve(mesh.faces.size());
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    total += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
    cumulative.push_back(total);
  }
  if (total <= 0.0) throw std::runtime_error("sample_surface: zero total area");

  PointCloud cloud;
  cloud.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = rng.uniform(0.0, total);
    const auto it = std::lower_bound(cumulative.begin(), cumulative.end(), r);
    const auto& f = mesh.faces[static_cast<std::size_t>(it - cumulative.begin())];
    double u = rng.uniform(), v = rng.uniform();
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    cloud.points.push_back(Vec3{a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
                                a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
                                a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2])});
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string path;
  int label = 0;
  std::string split;  // "train" | "test"
};

struct Dataset {
  std::vector<PointCloud> clouds;
  std::vector<ManifestEntry> manifest;
  std::vector<std::string> class_names;

  std::size_t size() const { return clouds.size(); }

  std::vector<std::size_t> split_indices(const std::string& split) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < manifest.size(); ++i)
      if (manifest[i].split == split) idx.push_back(i);
    return idx;
  }

  int num_classes() const {
    int c = 0;
    for (const auto& e : manifest) c = std::max(c, e.label + 1);
    return c;
  }
};

struct SynthSpec {
  std::vector<std::string> classes;  // subset of sphere, cube, cylinder, torus, plane
  std::size_t samples_per_class = 50;
  std::size_t points = 1024;
  double jitter_sigma = 0.01;
  double anisotropy = 0.3;  // per-axis scale in [1-a, 1+a]
  double train_fraction = 0.8;
};

namespace detail {

inline Vec3 sample_shape_point(const std::string& cls, Rng& rng) {
  if (cls == "sphere") {
    Vec3 p{rng.normal(), rng.normal(), rng.normal()};
    const double norm = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) + 1e-12;
    return Vec3{p[0] / norm, p[1] / norm, p[2] / norm};
  }
  if (cls == "cube") {
    const std::size_t face = rng.uniform_index(6);
    const double u = rng.uniform(-0.5, 0.5), v = rng.uniform(-0.5, 0.5);
    const double s = (face % 2 == 0) ? -0.5 : 0.5;
    switch (face / 2) {
      case 0: return Vec3{s, u, v};
      case 1: return Vec3{u, s, v};
      default: return Vec3{u, v, s};
    }
  }
  if (cls == "cylinder") {
    // radius 0.5, height 1: lateral area pi, each cap pi/4
    const double lateral = 3.14159265358979323846;
    const double cap = lateral / 4.0;
    const double r = rng.uniform(0.0, lateral + 2.0 * cap);
    if (r < lateral) {
      const double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      return Vec3{0.5 * std::cos(theta), 0.5 * std::sin(theta), rng.uniform(-0.5, 0.5)};
    }
    const double rho = 0.5 * std::sqrt(rng.uniform());
    const double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double z = (r < lateral + cap) ? -0.5 : 0.5;
    return Vec3{rho * std::cos(theta), rho * std::sin(theta), z};
  }
  if (cls == "torus") {
    // major radius 0.5, minor 0.2; area element weight (R + r cos t) / (R + r)
    const double R = 0.5, r = 0.2;
    for (;;) {
      const double t = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      if (rng.uniform() > (R + r * std::cos(t)) / (R + r)) continue;
      const double phi = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double w = R + r * std::cos(t);
      return Vec3{w * std::cos(phi), w * std::sin(phi), r * std::sin(t)};
    }
  }
  if (cls == "plane") {
    return Vec3{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 0.0};
  }
  throw std::invalid_argument("unknown synthetic class: " + cls);
}

inline std::array<std::array<double, 3>, 3> random_rotation(Rng& rng) {
  // rotation from a uniform random unit quaternion
  double q[4];
  double norm = 0.0;
  for (auto& v : q) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm) + 1e-12;
  for (auto& v : q) v /= norm;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

}  // namespace detail

/// Analytic desk-scale dataset: each sample is a surface-sampled primitive
/// with a random rotation, anisotropic per-axis scale, and Gaussian jitter.
inline Dataset synth_dataset(const SynthSpec& spec, Rng& rng) {
  Dataset ds;
  ds.class_names = spec.classes;
  const std::size_t train_count = static_cast<std::size_t>(
      std::llround(spec.train_fraction * static_cast<double>(spec.samples_per_class)));
  for (std::size_t cls = 0; cls < spec.classes.size(); ++cls) {
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      const auto rot = detail::random_rotation(rng);
      const Vec3 scale{rng.uniform(1.0 - spec.anisotropy, 1.0 + spec.anisotropy),
                       rng.uniform(1.0 - spec.anisotropy, 1.0 + spec.anisotropy),
                       rng.uniform(1.0 - spec.anisotropy, 1.0 + spec.anisotropy)};
      PointCloud cloud;
      cloud.label = static_cast<int>(cls);
      cloud.points.reserve(spec.points);
      for (std::size_t i = 0; i < spec.points; ++i) {
        Vec3 p = detail::sample_shape_point(spec.classes[cls], rng);
        for (int d = 0; d < 3; ++d) p[d] *= scale[d];
        Vec3 q{rot[0][0] * p[0] + rot[0][1] * p[1] + rot[0][2] * p[2],
               rot[1][0] * p[0] + rot[1][1] * p[1] + rot[1][2] * p[2],
               rot[2][0] * p[0] + rot[2][1] * p[1] + rot[2][2] * p[2]};
        for (int d = 0; d < 3; ++d) q[d] += spec.jitter_sigma * rng.normal();
        cloud.points.push_back(q);
      }
      ManifestEntry entry;
      std::ostringstream name;
      name << "synth/" << spec.classes[cls] << "_" << std::setw(4) << std::setfill('0') << s;
      entry.path = name.str();
      entry.label = static_cast<int>(cls);
      entry.split = (s < train_count) ? "train" : "test";
      ds.manifest.push_back(entry);
      ds.clouds.push_back(std::move(cloud));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// binary cache + manifest CSV
// ---------------------------------------------------------------------------

inline constexpr char kCacheMagic[] = "MAE3Dv1";  // 7 bytes on disk

inline void cache_write(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cache_write: cannot open " + path);
  out.write(kCacheMagic, 7);
  const auto count = static_cast<std::uint32_t>(ds.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto label = static_cast<std::uint32_t>(ds.manifest[i].label);
    const auto npts = static_cast<std::uint32_t>(ds.clouds[i].size());
    out.write(reinterpret_cast<const char*>(&label), 4);
    out.write(reinterpret_cast<const char*>(&npts), 4);
    for (const Vec3& p : ds.clouds[i].points) {
      const float xyz[3] = {static_cast<float>(p[0]), static_cast<float>(p[1]),
                            static_cast<float>(p[2])};
      out.write(reinterpret_cast<const char*>(xyz), 12);
    }
  }
  if (!out) throw std::runtime_error("cache_write: write failed for " + path);
}

/// Read a cache; the manifest (paths/splits) is stored separately as CSV, so
/// the returned entries carry labels only unless a manifest is attached.
inline Dataset cache_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cache_read: cannot open " + path);
  auto fail = [&](const std::string& what) {
    return std::runtime_error("cache_read: " + what + " at offset " +
                              std::to_string(static_cast<long long>(in.tellg())));
  };
  char magic[7];
  if (!in.read(magic, 7)) throw fail("truncated magic");
  if (std::memcmp(magic, kCacheMagic, 7) != 0) throw std::runtime_error("cache_read: bad magic");
  std::uint32_t count = 0;
  if (!in.read(reinterpret_cast<char*>(&count), 4)) throw fail("truncated sample count");
  Dataset ds;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t label = 0, npts = 0;
    if (!in.read(reinterpret_cast<char*>(&label), 4)) throw fail("truncated label");
    if (!in.read(reinterpret_cast<char*>(&npts), 4)) throw fail("truncated point count");
    PointCloud cloud;
    cloud.label = static_cast<int>(label);
    cloud.points.reserve(npts);
    for (std::uint32_t p = 0; p < npts; ++p) {
      float xyz[3];
      if (!in.read(reinterpret_cast<char*>(xyz), 12)) throw fail("truncated coordinates");
      cloud.points.push_back(Vec3{xyz[0], xyz[1], xyz[2]});
    }
    ManifestEntry entry;
    entry.label = static_cast<int>(label);
    ds.manifest.push_back(entry);
    ds.clouds.push_back(std::move(cloud));
  }
  return ds;
}

inline void manifest_write(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("manifest_write: cannot open " + path);
  out << "path,label,split\n";
  for (const auto& e : ds.manifest) out << e.path << "," << e.label << "," << e.split << "\n";
}

inline std::vector<ManifestEntry> manifest_read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest_read: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "path,label,split")
    throw std::runtime_error("manifest_read: bad header in " + path);
  std::vector<ManifestEntry> entries;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string label_str;
    if (!std::getline(ls, e.path, ',') || !std::getline(ls, label_str, ',') ||
        !std::getline(ls, e.split))
      throw std::runtime_error("manifest_read: malformed line " + std::to_string(lineno));
    e.label = std::stoi(label_str);
    entries.push_back(e);
  }
  return entries;
}

/// ASCII XYZ export, one "x y z" triple per line, 6 decimal places.
inline void write_xyz(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_xyz: cannot open " + path);
  out << std::fixed << std::setprecision(6);
  for (const Vec3& p : cloud.points) out << p[0] << " " << p[1] << " " << p[2] << "\n";
}

inline PointCloud read_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_xyz: cannot open " + path);
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p[0] >> p[1] >> p[2]))
      throw std::runtime_error("read_xyz: malformed line " + std::to_string(lineno));
    cloud.points.push_back(p);
  }
  return cloud;
}

}  // namespace mae3d
