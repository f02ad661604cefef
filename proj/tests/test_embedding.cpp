#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "mae3d/embedding.hpp"
#include "mae3d/model.hpp"
#include "mae3d/training.hpp"

using namespace mae3d;
using mae3d::testing::fd_check;
using mae3d::testing::random_tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.emb.d_feat = 16;
  mc.emb.d_pos = 8;
  mc.tf.enc_depth = 1;
  mc.tf.enc_dim = 16;
  mc.tf.enc_heads = 2;
  mc.tf.dec_depth = 1;
  mc.tf.dec_dim = 12;
  mc.tf.dec_heads = 2;
  mc.tf.mlp_ratio = 2;
  mc.num_patches = 4;
  mc.patch_size = 16;
  return mc;
}

PointCloud random_cloud(std::size_t n, Rng& rng) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i)
    c.points.push_back(Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  return c;
}

}  // namespace

TEST_CASE("patch features are permutation invariant within a patch") {
  Rng rng(1);
  ParamStore<double> store;
  PointNetExtractor<double> ex(store, "extractor", 32, rng);
  auto pts = random_tensor({16, 3}, rng, false);
  auto f1 = ex.forward(pts, 1, 16);

  // reverse the rows of the patch
  std::vector<double> reversed(pts.size());
  for (std::size_t r = 0; r < 16; ++r)
    for (int d = 0; d < 3; ++d) reversed[r * 3 + d] = pts.value()[(15 - r) * 3 + d];
  auto f2 = ex.forward(Tensor<double>::constant({16, 3}, reversed), 1, 16);
  CHECK(f1.value() == f2.value());
}

TEST_CASE("identical patches produce identical features") {
  Rng rng(2);
  ParamStore<double> store;
  PointNetExtractor<double> ex(store, "extractor", 32, rng);
  auto one = random_tensor({8, 3}, rng, false);
  std::vector<double> two = one.value();
  two.insert(two.end(), one.value().begin(), one.value().end());
  auto f = ex.forward(Tensor<double>::constant({16, 3}, two), 2, 8);
  for (std::size_t j = 0; j < 32; ++j)
    CHECK(f.value()[j] == doctest::Approx(f.value()[32 + j]));
}

TEST_CASE("extractor output shape and finiteness at production dims") {
  Rng rng(3);
  ParamStore<float> store;
  PointNetExtractor<float> ex(store, "extractor", 256, rng);
  std::vector<float> pts(10 * 64 * 3);
  for (auto& v : pts) v = static_cast<float>(rng.uniform(-0.2, 0.2));
  auto f = ex.forward(Tensor<float>::constant({640, 3}, pts), 10, 64);
  CHECK(f.shape() == Shape{10, 256});
  for (float v : f.value()) CHECK(std::isfinite(v));
}

TEST_CASE("extractor rejects empty patches and wrong shapes") {
  Rng rng(4);
  ParamStore<double> store;
  PointNetExtractor<double> ex(store, "extractor", 8, rng);
  auto pts = random_tensor({6, 3}, rng, false);
  CHECK_THROWS_AS(ex.forward(pts, 0, 6), std::invalid_argument);
  CHECK_THROWS_AS(ex.forward(pts, 2, 4), std::invalid_argument);
}

TEST_CASE("positional embedding is deterministic and separates centers") {
  Rng rng(5);
  ParamStore<double> store;
  PositionalEmbed<double> pe(store, "posembed", 16, rng);
  auto c = random_tensor({1, 3}, rng, false);
  CHECK(pe(c).value() == pe(c).value());

  int distinct = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto a = pe(random_tensor({1, 3}, rng, false));
    auto b = pe(random_tensor({1, 3}, rng, false));
    if (a.value() != b.value()) ++distinct;
  }
  CHECK(distinct == 100);
}

TEST_CASE("positional embedding gradient matches finite differences") {
  Rng rng(6);
  ParamStore<double> store;
  PositionalEmbed<double> pe(store, "posembed", 8, rng);
  auto centers = random_tensor({5, 3}, rng, false);
  auto w = random_tensor({5, 8}, rng, false);
  fd_check(store.all(), [&] { return sum_all(mul(pe(centers), w)); });
}

TEST_CASE("encoder token assembly: length, dims, ordering") {
  Rng rng(7);
  ParamStore<double> store;
  EmbeddingConfig ecfg;
  ecfg.d_feat = 12;
  ecfg.d_pos = 4;
  LearnedEmbeddings<double> learned(store, "tokens", ecfg, 8, rng);
  auto feats = random_tensor({10, 12}, rng, false);
  auto pos = random_tensor({10, 4}, rng, false);
  auto seq = assemble_encoder_tokens(feats, pos, learned);
  CHECK(seq.shape() == Shape{11, 16});
  // row 0 is the class token
  for (std::size_t j = 0; j < 12; ++j)
    CHECK(seq.value()[j] == doctest::Approx(learned.class_feat.value()[j]));

  // reordering visible patches reorders rows 1..v identically
  std::vector<std::size_t> perm{3, 1, 4, 0, 2, 9, 8, 7, 6, 5};
  auto seq2 = assemble_encoder_tokens(gather_rows(feats, perm), gather_rows(pos, perm), learned);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < 16; ++j)
      CHECK(seq2.value()[(i + 1) * 16 + j] == seq.value()[(perm[i] + 1) * 16 + j]);
}

TEST_CASE("mask tokens vary only through the positional part") {
  Rng rng(8);
  ParamStore<double> store;
  EmbeddingConfig ecfg;
  ecfg.d_feat = 12;
  ecfg.d_pos = 4;
  LearnedEmbeddings<double> learned(store, "tokens", ecfg, 8, rng);

  auto pos = random_tensor({3, 4}, rng, false);
  auto toks = make_mask_tokens(pos, learned, {0, 1, 2});
  CHECK(toks.shape() == Shape{3, 16});
  // identical centers -> identical tokens
  std::vector<double> same = {pos.value()[0], pos.value()[1], pos.value()[2], pos.value()[3]};
  same.insert(same.end(), same.begin(), same.end());
  auto toks2 = make_mask_tokens(Tensor<double>::constant({2, 4}, same), learned, {0, 1});
  for (std::size_t j = 0; j < 16; ++j)
    CHECK(toks2.value()[j] == toks2.value()[16 + j]);

  // zero positional part -> all tokens equal
  auto zero_pos = Tensor<double>::constant({3, 4}, std::vector<double>(12, 0.0));
  auto toks3 = make_mask_tokens(zero_pos, learned, {0, 1, 2});
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t j = 0; j < 16; ++j)
      CHECK(toks3.value()[r * 16 + j] == toks3.value()[j]);
}

TEST_CASE("mask tokens never see masked member points") {
  Rng rng(9);
  ModelConfig mc = tiny_config();
  Rng model_rng(42);
  MAE3DModel<double> model(mc, model_rng);

  auto cloud = normalize_unit_sphere(random_cloud(64, rng));
  auto ps = knn_patchify(cloud, fps(cloud, mc.num_patches, 0), mc.patch_size);
  ps.visible_idx = {0, 2};
  ps.masked_idx = {1, 3};

  Rng fwd1(1), fwd2(1);
  auto g1 = model.global_feature(cloud, ps, fwd1, false);

  // corrupt points that belong only to masked patches (and are not centers)
  PointCloud noisy = cloud;
  std::vector<bool> in_visible(cloud.size(), false), is_center(cloud.size(), false);
  for (std::size_t vi : ps.visible_idx)
    for (std::size_t m : ps.patches[vi]) in_visible[m] = true;
  for (std::size_t c : ps.center_indices) is_center[c] = true;
  int corrupted = 0;
  for (std::size_t mi : ps.masked_idx)
    for (std::size_t m : ps.patches[mi])
      if (!in_visible[m] && !is_center[m]) {
        noisy.points[m] = Vec3{rng.uniform(), rng.uniform(), rng.uniform()};
        ++corrupted;
      }
  REQUIRE(corrupted > 0);
  auto g2 = model.global_feature(noisy, ps, fwd2, false);
  CHECK(g1.value() == g2.value());
}

TEST_CASE("gradients reach class and mask embeddings from the loss") {
  Rng rng(10);
  ModelConfig mc = tiny_config();
  Rng model_rng(7);
  MAE3DModel<double> model(mc, model_rng);
  auto cloud = normalize_unit_sphere(random_cloud(64, rng));
  auto ps = knn_patchify(cloud, fps(cloud, mc.num_patches, 0), mc.patch_size);
  ps.visible_idx = {0, 3};
  ps.masked_idx = {1, 2};

  model.params().zero_grad();
  Rng fwd(1);
  auto out = model.forward_pretrain(cloud, ps, fwd, true);
  backward(out.loss);

  for (const char* name : {"tokens.class_feat", "tokens.class_pos", "tokens.mask_feat"}) {
    auto& p = model.params().at(name);
    double norm = 0.0;
    for (double g : p.grad()) norm += g * g;
    INFO(name);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("per-patch mask token variant selects per-slot vectors") {
  Rng rng(11);
  ParamStore<double> store;
  EmbeddingConfig ecfg;
  ecfg.d_feat = 6;
  ecfg.d_pos = 2;
  ecfg.per_patch_mask_tokens = true;
  LearnedEmbeddings<double> learned(store, "tokens", ecfg, 4, rng);
  CHECK(learned.mask_feat.shape() == Shape{4, 6});
  auto pos = Tensor<double>::constant({2, 2}, {0, 0, 0, 0});
  auto toks = make_mask_tokens(pos, learned, {1, 3});
  for (std::size_t j = 0; j < 6; ++j) {
    CHECK(toks.value()[j] == learned.mask_feat.value()[1 * 6 + j]);
    CHECK(toks.value()[8 + j] == learned.mask_feat.value()[3 * 6 + j]);
  }
}
