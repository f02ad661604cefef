#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mae3d/nn.hpp"
#include "mae3d/tensor.hpp"

namespace mae3d {

/// G x G lattice linearly spaced in [-0.5, 0.5]^2, scaled by patch_radius.
/// K = G*G must be a perfect square so the grid matches the patch cardinality.
template <typename T>
Tensor<T> make_folding_grid(std::size_t k, double patch_radius) {
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(k))));
  if (g * g != k)
    throw std::invalid_argument("folding grid: K=" + std::to_string(k) +
                                " is not a perfect square");
  std::vector<T> data;
  data.reserve(2 * k);
  for (std::size_t r = 0; r < g; ++r) {
    for (std::size_t c = 0; c < g; ++c) {
      const double u = (g == 1) ? 0.0 : -0.5 + static_cast<double>(r) / static_cast<double>(g - 1);
      const double v = (g == 1) ? 0.0 : -0.5 + static_cast<double>(c) / static_cast<double>(g - 1);
      data.push_back(static_cast<T>(u * patch_radius));
      data.push_back(static_cast<T>(v * patch_radius));
    }
  }
  return Tensor<T>::constant({k, 2}, std::move(data));
}

/// Coarse stage: global feature -> S patch centers through an MLP
/// d_glob -> 512 -> 1024 -> S*3.
template <typename T>
class CenterPredictor {
public:
  CenterPredictor() = default;
  CenterPredictor(ParamStore<T>& store, const std::string& prefix, std::size_t d_glob,
                  std::size_t num_patches, Rng& rng)
      : num_patches_(num_patches),
        l1_(store, prefix + ".l1", d_glob, 512, rng),
        l2_(store, prefix + ".l2", 512, 1024, rng),
        l3_(store, prefix + ".l3", 1024, num_patches * 3, rng) {}

  /// g: [1, d_glob] -> [S, 3]
  Tensor<T> operator()(const Tensor<T>& g) const {
    auto h = l3_(relu(l2_(relu(l1_(g)))));
    return reshape(h, {num_patches_, std::size_t{3}});
  }

private:
  std::size_t num_patches_ = 0;
  Linear<T> l1_, l2_, l3_;
};

/// Fine stage: deform the 2D grid around each predicted center. Two folding
/// stages (each -> 256 -> 128 -> 3); the second stage additionally consumes
/// the first stage's 3D output. Offsets are residual on the centers.
template <typename T>
class FoldingDecoder {
public:
  FoldingDecoder() = default;
  FoldingDecoder(ParamStore<T>& store, const std::string& prefix, std::size_t d_glob, Rng& rng)
      : s1a_(store, prefix + ".s1a", d_glob + 5, 256, rng),
        s1b_(store, prefix + ".s1b", 256, 128, rng),
        s1c_(store, prefix + ".s1c", 128, 3, rng),
        s2a_(store, prefix + ".s2a", d_glob + 8, 256, rng),
        s2b_(store, prefix + ".s2b", 256, 128, rng),
        s2c_(store, prefix + ".s2c", 128, 3, rng) {}

  /// g: [1, d_glob], centers: [S, 3], grid: [K, 2] -> [S*K, 3]
  Tensor<T> operator()(const Tensor<T>& g, const Tensor<T>& centers,
                       const Tensor<T>& grid) const {
    const std::size_t s = centers.rows();
    const std::size_t k = grid.rows();
    // row p*K+j carries (g, grid[j], centers[p])
    auto g_rep = tile_rows(g, s * k);
    auto grid_rep = tile_rows(grid, s);
    auto centers_rep = repeat_interleave_rows(centers, k);
    auto base = concat<T>({g_rep, grid_rep, centers_rep}, 1);  // [S*K, d_glob+5]
    auto fold1 = s1c_(relu(s1b_(relu(s1a_(base)))));
    auto fold2 = s2c_(relu(s2b_(relu(s2a_(concat<T>({base, fold1}, 1))))));
    return add(centers_rep, fold2);
  }

private:
  Linear<T> s1a_, s1b_, s1c_;
  Linear<T> s2a_, s2b_, s2c_;
};

template <typename T>
struct MultitaskLoss {
  Tensor<T> total;
  Tensor<T> center_term;
  Tensor<T> fine_term;
};

/// L = CD(coarse, centers_gt) + alpha * CD(fine, cloud_gt); the fine term is
/// computed against the entire ground-truth cloud.
template <typename T>
MultitaskLoss<T> multitask_loss(const Tensor<T>& coarse_centers, const Tensor<T>& centers_gt,
                                const Tensor<T>& fine_cloud, const Tensor<T>& cloud_gt,
                                double alpha) {
  if (alpha < 0.0) throw std::invalid_argument("multitask_loss: alpha must be nonnegative");
  MultitaskLoss<T> out;
  out.center_term = chamfer(coarse_centers, centers_gt);
  out.fine_term = chamfer(fine_cloud, cloud_gt);
  out.total = add(out.center_term, scale(out.fine_term, static_cast<T>(alpha)));
  return out;
}

}  // namespace mae3d
