#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "mae3d/embedding.hpp"
#include "mae3d/nn.hpp"
#include "mae3d/pointcloud.hpp"
#include "mae3d/reconstruction.hpp"
#include "mae3d/tensor.hpp"
#include "mae3d/transformer.hpp"

namespace mae3d {

struct ModelConfig {
  EmbeddingConfig emb;
  TransformerConfig tf;
  std::size_t num_patches = 32;  // S
  std::size_t patch_size = 64;   // K
  double patch_radius = 0.15;
  double alpha = 1.0;
};

template <typename T>
struct PretrainOutput {
  Tensor<T> loss;
  Tensor<T> loss_center;
  Tensor<T> loss_fine;
  Tensor<T> coarse_centers;  // [S, 3]
  Tensor<T> fine_cloud;      // [S*K, 3]
};

/// The full pretraining network: patch embedding, asymmetric
/// encoder/decoder, pooling and the two-stage reconstruction head.
template <typename T>
class MAE3DModel {
public:
  explicit MAE3DModel(const ModelConfig& cfg, Rng& rng)
      : cfg_(cfg),
        extractor_(params_, "extractor", cfg.emb.d_feat, rng),
        posembed_(params_, "posembed", cfg.emb.d_pos, rng),
        learned_(params_, "tokens", cfg.emb, cfg.num_patches, rng),
        encoder_(params_, "enc", cfg.emb.d_tok(), cfg.tf, rng),
        enc2dec_(params_, "proj.enc2dec", cfg.tf.enc_dim, cfg.tf.dec_dim, rng),
        mask2dec_(params_, "proj.mask2dec", cfg.emb.d_tok(), cfg.tf.dec_dim, rng),
        decoder_(params_, "dec", cfg.tf, rng),
        center_pred_(params_, "recon.center", cfg.tf.dec_dim, cfg.num_patches, rng),
        folding_(params_, "recon.fold", cfg.tf.dec_dim, rng),
        grid_(make_folding_grid<T>(cfg.patch_size, cfg.patch_radius)) {}

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const PatchExtractor<T>& extractor() const { return extractor_; }
  const PositionalEmbed<T>& posembed() const { return posembed_; }

  /// Patch-local coordinates of the visible patches: [|v|*K, 3], K
  /// consecutive rows per patch, each point re-centered to its patch center.
  static Tensor<T> visible_local_coords(const PointCloud& cloud, const PatchSet& ps,
                                        std::size_t k) {
    std::vector<T> data;
    data.reserve(ps.visible_idx.size() * k * 3);
    for (std::size_t vi : ps.visible_idx) {
      const Vec3& c = cloud.points[ps.center_indices[vi]];
      for (std::size_t member : ps.patches[vi]) {
        const Vec3& p = cloud.points[member];
        data.push_back(static_cast<T>(p[0] - c[0]));
        data.push_back(static_cast<T>(p[1] - c[1]));
        data.push_back(static_cast<T>(p[2] - c[2]));
      }
    }
    return Tensor<T>::constant({ps.visible_idx.size() * k, 3}, std::move(data));
  }

  static Tensor<T> centers_matrix(const PointCloud& cloud, const PatchSet& ps,
                                  const std::vector<std::size_t>& subset) {
    std::vector<T> data;
    data.reserve(subset.size() * 3);
    for (std::size_t i : subset) {
      const Vec3& c = cloud.points[ps.center_indices[i]];
      data.push_back(static_cast<T>(c[0]));
      data.push_back(static_cast<T>(c[1]));
      data.push_back(static_cast<T>(c[2]));
    }
    return Tensor<T>::constant({subset.size(), 3}, std::move(data));
  }

  static Tensor<T> cloud_matrix(const PointCloud& cloud) {
    std::vector<T> data;
    data.reserve(cloud.size() * 3);
    for (const Vec3& p : cloud.points)
      for (int d = 0; d < 3; ++d) data.push_back(static_cast<T>(p[d]));
    return Tensor<T>::constant({cloud.size(), 3}, std::move(data));
  }

  /// Encode the visible patches: tokens through the encoder. Exposed
  /// separately so the encoder's cost can be measured in isolation.
  Tensor<T> encode_visible(const PointCloud& cloud, const PatchSet& ps, Rng& rng,
                           bool train) const {
    auto local = visible_local_coords(cloud, ps, cfg_.patch_size);
    auto features = extractor_.forward(local, ps.visible_idx.size(), cfg_.patch_size);
    auto vis_centers = centers_matrix(cloud, ps, ps.visible_idx);
    auto vis_pos = posembed_(vis_centers);

    TokenSeq<T> chi;
    chi.tokens = assemble_encoder_tokens(features, vis_pos, learned_);
    chi.roles.assign(ps.visible_idx.size() + 1, TokenRole::visible);
    chi.roles[0] = TokenRole::cls;
    chi.patch_index.assign(ps.visible_idx.size() + 1, 0);
    for (std::size_t i = 0; i < ps.visible_idx.size(); ++i)
      chi.patch_index[i + 1] = ps.visible_idx[i];
    return encoder_(chi, rng, train);
  }

  /// Global feature of a masked cloud: encode, decode with mask tokens, pool.
  Tensor<T> global_feature(const PointCloud& cloud, const PatchSet& ps, Rng& rng,
                           bool train) const {
    const std::size_t s = ps.num_patches();
    const std::size_t v = ps.visible_idx.size();
    const std::size_t m = ps.masked_idx.size();
    if (v + m != s) throw std::invalid_argument("model: incomplete mask partition");

    auto encoded = encode_visible(cloud, ps, rng, train);  // [v+1, enc_dim]
    auto projected = enc2dec_(encoded);                    // [v+1, dec_dim]
    auto cls = slice_rows(projected, 0, 1);
    auto visible_tokens = slice_rows(projected, 1, v + 1);

    auto masked_centers = centers_matrix(cloud, ps, ps.masked_idx);
    auto mask_pos = posembed_(masked_centers);
    auto mask_tokens = mask2dec_(make_mask_tokens(mask_pos, learned_, ps.masked_idx));

    // order patch tokens by original patch index, class token first
    auto pool_tokens = concat<T>({visible_tokens, mask_tokens}, 0);  // [S, dec_dim]
    std::vector<std::size_t> perm(s);
    for (std::size_t i = 0; i < v; ++i) perm[ps.visible_idx[i]] = i;
    for (std::size_t i = 0; i < m; ++i) perm[ps.masked_idx[i]] = v + i;
    auto ordered = gather_rows(pool_tokens, perm);

    TokenSeq<T> xi;
    xi.tokens = concat<T>({cls, ordered}, 0);  // [S+1, dec_dim]
    xi.roles.assign(s + 1, TokenRole::visible);
    xi.roles[0] = TokenRole::cls;
    for (std::size_t i = 0; i < m; ++i) xi.roles[ps.masked_idx[i] + 1] = TokenRole::mask;
    xi.patch_index.assign(s + 1, 0);
    for (std::size_t p = 0; p < s; ++p) xi.patch_index[p + 1] = p;

    auto decoded = decoder_(xi, s, rng, train);
    return pool_global_feature(decoded);  // [1, dec_dim]
  }

  /// Full pretraining forward pass for one cloud: reconstruction + loss.
  PretrainOutput<T> forward_pretrain(const PointCloud& cloud, const PatchSet& ps, Rng& rng,
                                     bool train) const {
    auto g = global_feature(cloud, ps, rng, train);
    PretrainOutput<T> out;
    out.coarse_centers = center_pred_(g);
    out.fine_cloud = folding_(g, out.coarse_centers, grid_);

    auto centers_gt = centers_matrix(cloud, ps, all_indices(ps.num_patches()));
    auto cloud_gt = cloud_matrix(cloud);
    auto loss = multitask_loss(out.coarse_centers, centers_gt, out.fine_cloud, cloud_gt,
                               cfg_.alpha);
    out.loss = loss.total;
    out.loss_center = loss.center_term;
    out.loss_fine = loss.fine_term;
    return out;
  }

private:
  static std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  PointNetExtractor<T> extractor_;
  PositionalEmbed<T> posembed_;
  LearnedEmbeddings<T> learned_;
  Encoder<T> encoder_;
  Linear<T> enc2dec_;
  Linear<T> mask2dec_;
  Decoder<T> decoder_;
  CenterPredictor<T> center_pred_;
  FoldingDecoder<T> folding_;
  Tensor<T> grid_;
};

}  // namespace mae3d
