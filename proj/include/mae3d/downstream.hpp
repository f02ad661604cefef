#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mae3d/checkpoint.hpp"
#include "mae3d/data.hpp"
#include "mae3d/embedding.hpp"
#include "mae3d/optim.hpp"
#include "mae3d/pointcloud.hpp"
#include "mae3d/tensor.hpp"

namespace mae3d {

struct DownstreamConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double dropout_p = 0.5;
  std::uint64_t seed = 1;
  std::size_t d_feat = 256;
};

/// The transfer unit: the pretrained patch feature extractor applied to a
/// whole cloud, max-pooled to one global vector.
template <typename T>
class Backbone {
public:
  /// When with_posembed is set the positional MLP also transfers: the global
  /// feature becomes concat(max-pool extractor, max-pool Phi over points).
  explicit Backbone(std::size_t d_feat, Rng& rng, bool with_posembed = false,
                    std::size_t d_pos = 64)
      : d_feat_(d_feat), with_posembed_(with_posembed),
        extractor_(params_, "extractor", d_feat, rng) {
    if (with_posembed_) posembed_ = PositionalEmbed<T>(params_, "posembed", d_pos, rng);
  }

  ParamStore<T>& params() { return params_; }
  std::size_t feature_dim() const { return d_feat_; }

  void load_pretrained(const Checkpoint& ck) {
    std::vector<std::string> prefixes{"extractor."};
    if (with_posembed_) prefixes.push_back("posembed.");
    checkpoint_apply(ck, params_, prefixes);
  }

  /// Global feature for a batch of equal-size clouds: [B, d_feat] (plus
  /// d_pos when the positional pathway is on). Each cloud is treated as one
  /// whole-cloud patch, re-centered at the origin by normalization upstream.
  Tensor<T> forward(const std::vector<const PointCloud*>& clouds) const {
    if (clouds.empty()) throw std::invalid_argument("backbone: empty batch");
    const std::size_t n = clouds[0]->size();
    std::vector<T> data;
    data.reserve(clouds.size() * n * 3);
    for (const PointCloud* c : clouds) {
      if (c->size() != n) throw std::invalid_argument("backbone: unequal cloud sizes in batch");
      for (const Vec3& p : c->points)
        for (int d = 0; d < 3; ++d) data.push_back(static_cast<T>(p[d]));
    }
    auto points = Tensor<T>::constant({clouds.size() * n, 3}, std::move(data));
    auto feat = extractor_.forward(points, clouds.size(), n);
    if (!with_posembed_) return feat;
    auto pos = posembed_(points);  // [B*n, d_pos]
    auto pooled = reduce_max(reshape(pos, {clouds.size(), n, pos.cols()}), 1);
    return concat<T>({feat, pooled}, 1);
  }

  std::vector<T> forward_single(const PointCloud& cloud) const {
    auto f = forward({&cloud});
    return f.value();
  }

private:
  std::size_t d_feat_;
  bool with_posembed_;
  ParamStore<T> params_;
  PointNetExtractor<T> extractor_;
  PositionalEmbed<T> posembed_;
};

/// Backbone + classification head (d_feat -> 512 -> 256 -> C, dropout 0.5
/// between layers), trained end to end for fine-tuning.
template <typename T>
class Classifier {
public:
  Classifier(std::size_t d_feat, int num_classes, Rng& rng)
      : d_feat_(d_feat),
        num_classes_(num_classes),
        extractor_(params_, "extractor", d_feat, rng),
        h1_(params_, "head.l1", d_feat, 512, rng),
        h2_(params_, "head.l2", 512, 256, rng),
        h3_(params_, "head.l3", 256, static_cast<std::size_t>(num_classes), rng) {}

  ParamStore<T>& params() { return params_; }
  int num_classes() const { return num_classes_; }

  void load_pretrained(const Checkpoint& ck) { checkpoint_apply(ck, params_, {"extractor."}); }

  Tensor<T> features(const std::vector<const PointCloud*>& clouds) const {
    const std::size_t n = clouds[0]->size();
    std::vector<T> data;
    data.reserve(clouds.size() * n * 3);
    for (const PointCloud* c : clouds) {
      if (c->size() != n) throw std::invalid_argument("classifier: unequal cloud sizes");
      for (const Vec3& p : c->points)
        for (int d = 0; d < 3; ++d) data.push_back(static_cast<T>(p[d]));
    }
    auto points = Tensor<T>::constant({clouds.size() * n, 3}, std::move(data));
    return extractor_.forward(points, clouds.size(), n);
  }

  Tensor<T> logits(const Tensor<T>& feats, double dropout_p, Rng& rng, bool train) const {
    auto h = dropout(relu(h1_(feats)), dropout_p, rng, train);
    h = dropout(relu(h2_(h)), dropout_p, rng, train);
    return h3_(h);
  }

private:
  std::size_t d_feat_;
  int num_classes_;
  ParamStore<T> params_;
  PointNetExtractor<T> extractor_;
  Linear<T> h1_, h2_, h3_;
};

namespace detail {
inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
  return idx;
}
}  // namespace detail

template <typename T>
struct FinetuneResult {
  double best_accuracy = 0.0;
  std::vector<double> epoch_accuracy;  // test accuracy after each epoch
};

/// Supervised fine-tuning (or training from scratch when no checkpoint is
/// given). Clouds must be pre-normalized and of equal size.
template <typename T>
FinetuneResult<T> finetune_run(const std::vector<PointCloud>& train,
                               const std::vector<int>& train_labels,
                               const std::vector<PointCloud>& test,
                               const std::vector<int>& test_labels, int num_classes,
                               const Checkpoint* init, const DownstreamConfig& cfg) {
  if (train.empty() || test.empty()) throw std::invalid_argument("finetune: empty split");
  for (int l : train_labels)
    if (l < 0 || l >= num_classes) throw std::invalid_argument("finetune: label out of range");
  Rng rng(cfg.seed);
  Classifier<T> cls(cfg.d_feat, num_classes, rng);
  if (init) cls.load_pretrained(*init);
  Adam<T> opt(cls.params());

  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;
  std::size_t global_step = 0;
  FinetuneResult<T> result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng(cfg.seed ^ (0x9e3779b97f4a7c15ull * (epoch + 1)));
    const auto order = detail::shuffled_indices(train.size(), epoch_rng);
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<const PointCloud*> batch;
      std::vector<int> labels;
      for (std::size_t b = step * cfg.batch_size;
           b < std::min(train.size(), (step + 1) * cfg.batch_size); ++b) {
        batch.push_back(&train[order[b]]);
        labels.push_back(train_labels[order[b]]);
      }
      cls.params().zero_grad();
      auto loss = cross_entropy(cls.logits(cls.features(batch), cfg.dropout_p, epoch_rng, true),
                                labels);
      backward(loss);
      opt.step(cosine_lr(global_step, total_steps, cfg.lr));
      ++global_step;
    }
    // test accuracy, eval mode
    std::size_t correct = 0;
    Rng eval_rng(0);
    for (std::size_t i = 0; i < test.size(); ++i) {
      auto lg = cls.logits(cls.features({&test[i]}), cfg.dropout_p, eval_rng, false);
      const auto& v = lg.value();
      const std::size_t pred =
          static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
      if (static_cast<int>(pred) == test_labels[i]) ++correct;
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(test.size());
    result.epoch_accuracy.push_back(acc);
    result.best_accuracy = std::max(result.best_accuracy, acc);
  }
  return result;
}

/// Train a single affine layer + softmax cross-entropy on fixed feature
/// vectors. Features are plain values; no gradient can reach the extractor.
template <typename T>
double linear_probe(const std::vector<std::vector<T>>& train_feats,
                    const std::vector<int>& train_labels,
                    const std::vector<std::vector<T>>& test_feats,
                    const std::vector<int>& test_labels, int num_classes,
                    const DownstreamConfig& cfg) {
  if (train_feats.empty() || test_feats.empty())
    throw std::invalid_argument("linear_probe: empty split");
  const std::size_t d = train_feats[0].size();
  Rng rng(cfg.seed);
  ParamStore<T> store;
  Linear<T> probe(store, "probe", d, static_cast<std::size_t>(num_classes), rng);
  // zero init: the probe must be reachable within 100 steps of lr-capped Adam
  for (auto& p : store.all()) std::fill(p.value().begin(), p.value().end(), T(0));
  Adam<T> opt(store);

  std::vector<T> train_data;
  train_data.reserve(train_feats.size() * d);
  for (const auto& f : train_feats) train_data.insert(train_data.end(), f.begin(), f.end());
  auto x = Tensor<T>::constant({train_feats.size(), d}, std::move(train_data));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    store.zero_grad();
    backward(cross_entropy(probe(x), train_labels));
    opt.step(cfg.lr);
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_feats.size(); ++i) {
    auto f = Tensor<T>::constant({std::size_t{1}, d}, std::vector<T>(test_feats[i]));
    const auto logits = probe(f);
    const auto& v = logits.value();
    const std::size_t pred =
        static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    if (static_cast<int>(pred) == test_labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test_feats.size());
}

/// Compute and cache frozen global features for a set of clouds.
template <typename T>
std::vector<std::vector<T>> cache_features(const Backbone<T>& backbone,
                                           const std::vector<PointCloud>& clouds) {
  std::vector<std::vector<T>> feats;
  feats.reserve(clouds.size());
  for (const auto& c : clouds) feats.push_back(backbone.forward_single(c));
  return feats;
}

/// Per-class subsample for the limited-data probe: at least one sample per
/// class, round(ratio * count) otherwise.
inline std::vector<std::size_t> limited_subset(const std::vector<int>& labels, double ratio,
                                               int num_classes, Rng& rng) {
  std::vector<std::size_t> chosen;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) members.push_back(i);
    if (members.empty()) continue;
    const auto order = detail::shuffled_indices(members.size(), rng);
    const std::size_t take = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(members.size()))));
    for (std::size_t i = 0; i < std::min(take, members.size()); ++i)
      chosen.push_back(members[order[i]]);
  }
  return chosen;
}

struct FewShotEpisodeSpec {
  int ways = 5;        // K classes
  int shots = 10;      // N train samples per class
  int queries = 20;    // test samples per class
  std::size_t episodes = 10;
};

struct FewShotResult {
  double mean = 0.0;
  double std_dev = 0.0;  // population std over episodes
  std::vector<double> episode_accuracy;
};

/// K-way N-shot over frozen features: each episode samples K classes, N
/// train + 20 test samples per class (disjoint), trains a linear probe and
/// reports accuracy. Episode seeds are distinct and deterministic.
template <typename T>
FewShotResult fewshot_eval(const std::vector<std::vector<T>>& features,
                           const std::vector<int>& labels, int num_classes,
                           const FewShotEpisodeSpec& spec, const DownstreamConfig& cfg) {
  if (num_classes < spec.ways) throw std::invalid_argument("fewshot: not enough classes");
  FewShotResult result;
  for (std::size_t e = 0; e < spec.episodes; ++e) {
    Rng rng(cfg.seed + 104729 * (e + 1));
    const auto class_order = detail::shuffled_indices(static_cast<std::size_t>(num_classes), rng);
    std::vector<std::vector<T>> train_f, test_f;
    std::vector<int> train_l, test_l;
    for (int w = 0; w < spec.ways; ++w) {
      const int cls = static_cast<int>(class_order[static_cast<std::size_t>(w)]);
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == cls) members.push_back(i);
      const std::size_t need = static_cast<std::size_t>(spec.shots + spec.queries);
      if (members.size() < need)
        throw std::invalid_argument("fewshot: class " + std::to_string(cls) + " has " +
                                    std::to_string(members.size()) + " samples, need " +
                                    std::to_string(need));
      const auto order = detail::shuffled_indices(members.size(), rng);
      for (int i = 0; i < spec.shots; ++i) {
        train_f.push_back(features[members[order[static_cast<std::size_t>(i)]]]);
        train_l.push_back(w);
      }
      for (int i = spec.shots; i < spec.shots + spec.queries; ++i) {
        test_f.push_back(features[members[order[static_cast<std::size_t>(i)]]]);
        test_l.push_back(w);
      }
    }
    result.episode_accuracy.push_back(
        linear_probe(train_f, train_l, test_f, test_l, spec.ways, cfg));
  }
  double sum = 0.0;
  for (double a : result.episode_accuracy) sum += a;
  result.mean = sum / static_cast<double>(result.episode_accuracy.size());
  double var = 0.0;
  for (double a : result.episode_accuracy) var += (a - result.mean) * (a - result.mean);
  result.std_dev = std::sqrt(var / static_cast<double>(result.episode_accuracy.size()));
  return result;
}

}  // namespace mae3d
