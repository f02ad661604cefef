#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mae3d/nn.hpp"
#include "mae3d/tensor.hpp"

namespace mae3d {

struct EmbeddingConfig {
  std::size_t d_feat = 256;
  std::size_t d_pos = 64;
  // one shared learnable mask feature (default) vs. an independent vector per
  // patch slot
  bool per_patch_mask_tokens = false;

  std::size_t d_tok() const { return d_feat + d_pos; }
};

/// Pluggable per-patch feature extractor: maps [P*K,3] local coordinates to
/// one feature vector per patch.
template <typename T>
class PatchExtractor {
public:
  virtual ~PatchExtractor() = default;
  /// points: [P*K, 3] patch-local coordinates, K consecutive rows per patch.
  virtual Tensor<T> forward(const Tensor<T>& points, std::size_t num_patches,
                            std::size_t k) const = 0;
  virtual std::size_t feature_dim() const = 0;
};

/// PointNet-style extractor: shared per-point MLP 3 -> 64 -> 128 -> d_feat
/// with layer norm and ReLU between layers, then max-pool over each patch.
template <typename T>
class PointNetExtractor : public PatchExtractor<T> {
public:
  PointNetExtractor() = default;
  PointNetExtractor(ParamStore<T>& store, const std::string& prefix, std::size_t d_feat,
                    Rng& rng)
      : d_feat_(d_feat),
        l1_(store, prefix + ".l1", 3, 64, rng),
        n1_(store, prefix + ".n1", 64),
        l2_(store, prefix + ".l2", 64, 128, rng),
        n2_(store, prefix + ".n2", 128),
        l3_(store, prefix + ".l3", 128, d_feat, rng) {}

  Tensor<T> forward(const Tensor<T>& points, std::size_t num_patches,
                    std::size_t k) const override {
    if (num_patches == 0 || k == 0) throw std::invalid_argument("extractor: empty patch");
    if (points.rows() != num_patches * k || points.cols() != 3)
      throw std::invalid_argument("extractor: expected [" + std::to_string(num_patches * k) +
                                  ",3], got " + shape_str(points.shape()));
    auto h = relu(n1_(l1_(points)));
    h = relu(n2_(l2_(h)));
    h = l3_(h);  // [P*K, d_feat]
    auto grouped = reshape(h, {num_patches, k, d_feat_});
    return reduce_max(grouped, 1);  // [P, d_feat]
  }

  std::size_t feature_dim() const override { return d_feat_; }

private:
  std::size_t d_feat_ = 0;
  Linear<T> l1_, l2_, l3_;
  LayerNorm<T> n1_, n2_;
};

/// Trainable positional embedding: center coordinates through a 3 -> 64 ->
/// d_pos MLP.
template <typename T>
class PositionalEmbed {
public:
  PositionalEmbed() = default;
  PositionalEmbed(ParamStore<T>& store, const std::string& prefix, std::size_t d_pos, Rng& rng)
      : l1_(store, prefix + ".l1", 3, 64, rng), l2_(store, prefix + ".l2", 64, d_pos, rng) {}

  /// centers: [P, 3] -> [P, d_pos]
  Tensor<T> operator()(const Tensor<T>& centers) const { return l2_(relu(l1_(centers))); }

private:
  Linear<T> l1_, l2_;
};

/// Class token halves and the learnable mask feature(s).
template <typename T>
struct LearnedEmbeddings {
  Tensor<T> class_feat;  // [1, d_feat]
  Tensor<T> class_pos;   // [1, d_pos]
  Tensor<T> mask_feat;   // [1, d_feat] shared, or [S, d_feat] per patch slot

  LearnedEmbeddings() = default;
  LearnedEmbeddings(ParamStore<T>& store, const std::string& prefix, const EmbeddingConfig& cfg,
                    std::size_t num_patches, Rng& rng) {
    auto init = [&](Shape shape) {
      std::vector<T> data(shape_numel(shape));
      for (auto& v : data) v = static_cast<T>(0.02 * rng.normal());
      return data;
    };
    class_feat = store.add(prefix + ".class_feat", {1, cfg.d_feat}, init({1, cfg.d_feat}));
    class_pos = store.add(prefix + ".class_pos", {1, cfg.d_pos}, init({1, cfg.d_pos}));
    const std::size_t mask_rows = cfg.per_patch_mask_tokens ? num_patches : 1;
    mask_feat =
        store.add(prefix + ".mask_feat", {mask_rows, cfg.d_feat}, init({mask_rows, cfg.d_feat}));
  }
};

/// Encoder input: class token concat(psi0, phi0) at position 0, then
/// concat(psi_i, phi_i) for each visible patch.
template <typename T>
Tensor<T> assemble_encoder_tokens(const Tensor<T>& features, const Tensor<T>& positions,
                                  const LearnedEmbeddings<T>& learned) {
  if (features.rows() != positions.rows())
    throw std::invalid_argument("assemble_encoder_tokens: feature/position count mismatch");
  auto cls = concat<T>({learned.class_feat, learned.class_pos}, 1);      // [1, d_tok]
  auto visible = concat<T>({features, positions}, 1);                    // [v, d_tok]
  return concat<T>({cls, visible}, 0);                                   // [v+1, d_tok]
}

/// Mask tokens: concat(learnable mask feature, positional embedding of the
/// true masked center). Patch member points are never consulted.
template <typename T>
Tensor<T> make_mask_tokens(const Tensor<T>& masked_center_pos, const LearnedEmbeddings<T>& learned,
                           const std::vector<std::size_t>& masked_idx) {
  const std::size_t m = masked_center_pos.rows();
  Tensor<T> feats;
  if (learned.mask_feat.rows() == 1) {
    feats = tile_rows(learned.mask_feat, m);
  } else {
    feats = gather_rows(learned.mask_feat, masked_idx);
  }
  return concat<T>({feats, masked_center_pos}, 1);  // [m, d_tok]
}

}  // namespace mae3d
