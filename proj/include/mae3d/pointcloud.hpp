#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mae3d/rng.hpp"

namespace mae3d {

using Vec3 = std::array<double, 3>;

inline double squared_dist(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Ordered point set in normalized coordinates, optionally labelled.
struct PointCloud {
  std::vector<Vec3> points;
  std::optional<int> label;

  std::size_t size() const { return points.size(); }
};

/// Patch decomposition of a cloud: S centers, S groups of K point indices,
/// and a visible/masked partition of the patch indices.
struct PatchSet {
  std::vector<std::size_t> center_indices;        // into the source cloud
  std::vector<std::vector<std::size_t>> patches;  // S groups of K indices
  std::vector<std::size_t> visible_idx;
  std::vector<std::size_t> masked_idx;

  std::size_t num_patches() const { return patches.size(); }
};

/// Translate the centroid to the origin and scale so the farthest point has
/// norm 1. Throws on degenerate input (all points coincident).
inline PointCloud normalize_unit_sphere(const PointCloud& cloud) {
  if (cloud.points.empty()) throw std::invalid_argument("normalize_unit_sphere: empty cloud");
  Vec3 centroid{0, 0, 0};
  for (const auto& p : cloud.points) {
    for (int d = 0; d < 3; ++d) centroid[d] += p[d];
  }
  const double inv_n = 1.0 / static_cast<double>(cloud.points.size());
  for (int d = 0; d < 3; ++d) centroid[d] *= inv_n;

  double max_norm2 = 0.0;
  for (const auto& p : cloud.points) {
    Vec3 q{p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]};
    max_norm2 = std::max(max_norm2, q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
  }
  if (max_norm2 <= 0.0) throw std::runtime_error("normalize_unit_sphere: zero extent");
  const double scale = 1.0 / std::sqrt(max_norm2);

  PointCloud out;
  out.label = cloud.label;
  out.points.reserve(cloud.points.size());
  for (const auto& p : cloud.points) {
    out.points.push_back(Vec3{(p[0] - centroid[0]) * scale,
                              (p[1] - centroid[1]) * scale,
                              (p[2] - centroid[2]) * scale});
  }
  return out;
}

/// Farthest point sampling. Greedy max-min: each selected index maximizes the
/// minimum distance to all previously selected points. Ties go to the lower
/// index. First selection is start_index.
inline std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t s,
                                    std::size_t start_index = 0) {
  const std::size_t n = cloud.size();
  if (s < 1 || s > n) throw std::invalid_argument("fps: S out of range");
  if (start_index >= n) throw std::invalid_argument("fps: start index out of range");

  std::vector<std::size_t> selected;
  selected.reserve(s);
  selected.push_back(start_index);

  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  for (std::size_t step = 1; step < s; ++step) {
    const Vec3& last = cloud.points[selected.back()];
    std::size_t best = 0;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], squared_dist(cloud.points[i], last));
      if (min_dist[i] > best_dist) {
        best_dist = min_dist[i];
        best = i;
      }
    }
    selected.push_back(best);
  }
  return selected;
}

/// K nearest source points to a query, ties broken by ascending index.
inline std::vector<std::size_t> knn_indices(const PointCloud& cloud, const Vec3& query,
                                            std::size_t k) {
  const std::size_t n = cloud.size();
  if (k > n) throw std::invalid_argument("knn: K exceeds point count");
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = {squared_dist(cloud.points[i], query), i};
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = dist[i].second;
  return out;
}

/// Group the cloud into S patches of the K points nearest each center.
/// The visible/masked partition is left unset.
inline PatchSet knn_patchify(const PointCloud& cloud, const std::vector<std::size_t>& centers,
                             std::size_t k) {
  PatchSet ps;
  ps.center_indices = centers;
  ps.patches.reserve(centers.size());
  for (std::size_t c : centers) {
    if (c >= cloud.size()) throw std::invalid_argument("knn_patchify: center index out of range");
    ps.patches.push_back(knn_indices(cloud, cloud.points[c], k));
  }
  return ps;
}

/// Masked patch count for a given ratio: round-half-to-even of ratio*S.
inline std::size_t masked_count(std::size_t s, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("mask ratio must be in [0,1)");
  const double x = ratio * static_cast<double>(s);
  const double floor_x = std::floor(x);
  const double frac = x - floor_x;
  double r;
  if (frac > 0.5) {
    r = floor_x + 1.0;
  } else if (frac < 0.5) {
    r = floor_x;
  } else {  // ties to even
    r = (std::fmod(floor_x, 2.0) == 0.0) ? floor_x : floor_x + 1.0;
  }
  return static_cast<std::size_t>(r);
}

/// Uniform masking without replacement. Deterministic given the rng state.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> mask_random(std::size_t s,
                                                                                 double ratio,
                                                                                 Rng& rng) {
  const std::size_t m = masked_count(s, ratio);
  std::vector<std::size_t> perm(s);
  std::iota(perm.begin(), perm.end(), 0);
  // Fisher-Yates, first m entries become the masked set
  for (std::size_t i = 0; i + 1 < s && i < m; ++i) {
    const std::size_t j = i + rng.uniform_index(s - i);
    std::swap(perm[i], perm[j]);
  }
  std::vector<std::size_t> masked(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
  std::vector<std::size_t> visible(perm.begin() + static_cast<std::ptrdiff_t>(m), perm.end());
  std::sort(masked.begin(), masked.end());
  std::sort(visible.begin(), visible.end());
  return {visible, masked};
}

/// Block masking: mask the round(ratio*S) centers nearest a randomly chosen
/// seed center (the seed itself included).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> mask_block(
    const std::vector<Vec3>& centers, double ratio, Rng& rng) {
  const std::size_t s = centers.size();
  const std::size_t m = masked_count(s, ratio);
  std::vector<std::size_t> masked;
  if (m > 0) {
    const std::size_t seed = static_cast<std::size_t>(rng.uniform_index(s));
    std::vector<std::pair<double, std::size_t>> dist(s);
    for (std::size_t i = 0; i < s; ++i) dist[i] = {squared_dist(centers[i], centers[seed]), i};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(m), dist.end());
    masked.resize(m);
    for (std::size_t i = 0; i < m; ++i) masked[i] = dist[i].second;
    std::sort(masked.begin(), masked.end());
  }
  std::vector<std::size_t> visible;
  visible.reserve(s - m);
  std::size_t mi = 0;
  for (std::size_t i = 0; i < s; ++i) {
    if (mi < masked.size() && masked[mi] == i) {
      ++mi;
    } else {
      visible.push_back(i);
    }
  }
  return {visible, masked};
}

/// Symmetric Chamfer distance: mean squared nearest-neighbor distance in both
/// directions. Double precision, exhaustive.
inline double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  if (a.points.empty() || b.points.empty())
    throw std::invalid_argument("chamfer_distance: empty cloud");
  double sum_ab = 0.0;
  for (const auto& x : a.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& y : b.points) best = std::min(best, squared_dist(x, y));
    sum_ab += best;
  }
  double sum_ba = 0.0;
  for (const auto& y : b.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& x : a.points) best = std::min(best, squared_dist(x, y));
    sum_ba += best;
  }
  return sum_ab / static_cast<double>(a.points.size()) +
         sum_ba / static_cast<double>(b.points.size());
}

}  // namespace mae3d
