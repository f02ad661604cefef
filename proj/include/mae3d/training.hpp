#pragma once

#include <cmath>
#include <iomanip>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mae3d/checkpoint.hpp"
#include "mae3d/config.hpp"
#include "mae3d/model.hpp"
#include "mae3d/optim.hpp"
#include "mae3d/pointcloud.hpp"

namespace mae3d {

/// Pretraining augmentation: per-axis random scale in [2/3, 3/2] and per-axis
/// random translation in [-0.2, 0.2].
inline PointCloud augment(const PointCloud& cloud, Rng& rng) {
  Vec3 scale, shift;
  for (int d = 0; d < 3; ++d) scale[d] = rng.uniform(2.0 / 3.0, 3.0 / 2.0);
  for (int d = 0; d < 3; ++d) shift[d] = rng.uniform(-0.2, 0.2);
  PointCloud out;
  out.label = cloud.label;
  out.points.reserve(cloud.size());
  for (const Vec3& p : cloud.points)
    out.points.push_back(
        Vec3{p[0] * scale[0] + shift[0], p[1] * scale[1] + shift[1], p[2] * scale[2] + shift[2]});
  return out;
}

/// Normalize, sample centers, patchify and mask one cloud.
inline PatchSet build_patchset(const PointCloud& cloud, const PretrainConfig& cfg, Rng& rng) {
  const std::size_t start =
      cfg.fps_random_start ? static_cast<std::size_t>(rng.uniform_index(cloud.size())) : 0;
  PatchSet ps = knn_patchify(cloud, fps(cloud, cfg.num_patches, start), cfg.patch_size);
  std::vector<Vec3> centers;
  centers.reserve(ps.center_indices.size());
  for (std::size_t c : ps.center_indices) centers.push_back(cloud.points[c]);
  if (cfg.mask_strategy == "block") {
    std::tie(ps.visible_idx, ps.masked_idx) = mask_block(centers, cfg.mask_ratio, rng);
  } else if (cfg.mask_strategy == "random") {
    std::tie(ps.visible_idx, ps.masked_idx) = mask_random(cfg.num_patches, cfg.mask_ratio, rng);
  } else {
    throw std::invalid_argument("unknown mask strategy: " + cfg.mask_strategy);
  }
  return ps;
}

template <typename T>
struct StepStats {
  double loss_total = 0.0;
  double loss_center = 0.0;
  double loss_fine = 0.0;
};

/// One optimizer step over a batch: per cloud normalize, augment, patchify,
/// mask, forward, accumulate gradients; then a single Adam update.
template <typename T>
StepStats<T> pretrain_step(const std::vector<const PointCloud*>& batch, MAE3DModel<T>& model,
                           Adam<T>& optimizer, const PretrainConfig& cfg, Rng& rng, double lr) {
  model.params().zero_grad();
  StepStats<T> stats;
  const T inv_b = T(1) / static_cast<T>(batch.size());
  for (const PointCloud* cloud : batch) {
    PointCloud prepared = normalize_unit_sphere(*cloud);
    if (cfg.use_augment) prepared = augment(prepared, rng);
    const PatchSet ps = build_patchset(prepared, cfg, rng);
    auto out = model.forward_pretrain(prepared, ps, rng, /*train=*/true);
    backward(scale(out.loss, inv_b));
    stats.loss_total += static_cast<double>(out.loss.item());
    stats.loss_center += static_cast<double>(out.loss_center.item());
    stats.loss_fine += static_cast<double>(out.loss_fine.item());
  }
  stats.loss_total /= static_cast<double>(batch.size());
  stats.loss_center /= static_cast<double>(batch.size());
  stats.loss_fine /= static_cast<double>(batch.size());
  optimizer.step(lr);
  return stats;
}

/// Deterministic eval-mode reconstruction error: mean Chamfer distance of the
/// fine output against the (normalized, unaugmented) input over all clouds.
template <typename T>
double eval_reconstruction_cd(const std::vector<PointCloud>& clouds, MAE3DModel<T>& model,
                              const PretrainConfig& cfg) {
  double total = 0.0;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    Rng rng(cfg.seed + 7919 * (i + 1));
    const PointCloud prepared = normalize_unit_sphere(clouds[i]);
    const PatchSet ps = build_patchset(prepared, cfg, rng);
    auto out = model.forward_pretrain(prepared, ps, rng, /*train=*/false);
    total += static_cast<double>(out.loss_fine.item());
  }
  return total / static_cast<double>(clouds.size());
}

/// Full pretraining loop. Masking and augmentation draw from a fresh stream
/// each epoch; the metrics stream (if any) receives one CSV row per step.
template <typename T>
class Pretrainer {
public:
  explicit Pretrainer(const PretrainConfig& cfg) : cfg_(cfg) {
    Rng init_rng(cfg.seed);
    model_ = std::make_unique<MAE3DModel<T>>(cfg.model_config(), init_rng);
    typename Adam<T>::Hyper hp;
    hp.weight_decay = cfg.weight_decay;
    optimizer_ = std::make_unique<Adam<T>>(model_->params(), hp);
  }

  MAE3DModel<T>& model() { return *model_; }
  Adam<T>& optimizer() { return *optimizer_; }
  const PretrainConfig& config() const { return cfg_; }

  static void write_metrics_header(std::ostream& out) {
    out << "epoch,step,lr,loss_center,loss_fine,loss_total\n";
  }

  /// Train over the given clouds; returns the last step's stats.
  StepStats<T> run(const std::vector<PointCloud>& clouds, std::ostream* metrics = nullptr) {
    if (clouds.empty()) throw std::invalid_argument("pretrain: empty dataset");
    const std::size_t steps_per_epoch =
        (clouds.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    const std::size_t total_steps = cfg_.epochs * steps_per_epoch;
    StepStats<T> last;
    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      Rng epoch_rng(cfg_.seed ^ (0x9e3779b97f4a7c15ull * (epoch + 1)));
      for (std::size_t step = 0; step < steps_per_epoch; ++step) {
        std::vector<const PointCloud*> batch;
        for (std::size_t b = step * cfg_.batch_size;
             b < std::min(clouds.size(), (step + 1) * cfg_.batch_size); ++b)
          batch.push_back(&clouds[b]);
        const double lr = cosine_lr(global_step, total_steps, cfg_.base_lr, cfg_.min_lr);
        last = pretrain_step(batch, *model_, *optimizer_, cfg_, epoch_rng, lr);
        if (!std::isfinite(last.loss_total))
          throw std::runtime_error("pretrain: non-finite loss at epoch " +
                                   std::to_string(epoch) + ", batch " + std::to_string(step) +
                                   ", lr " + std::to_string(lr));
        if (metrics) {
          (*metrics) << epoch << "," << global_step << "," << std::setprecision(10) << lr << ","
                     << std::setprecision(10) << last.loss_center << "," << last.loss_fine << ","
                     << last.loss_total << "\n";
        }
        ++global_step;
      }
    }
    return last;
  }

  Checkpoint make_checkpoint(std::uint32_t epoch) {
    return snapshot(model_->params(), config_hash(canonical_config(cfg_)), epoch,
                    optimizer_.get());
  }

private:
  PretrainConfig cfg_;
  std::unique_ptr<MAE3DModel<T>> model_;
  std::unique_ptr<Adam<T>> optimizer_;
};

}  // namespace mae3d
