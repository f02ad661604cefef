#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "mae3d/model.hpp"

namespace mae3d {

/// Pretraining recipe. Defaults follow the reference experimental setting
/// (Adam, lr 1e-4, cosine schedule to 0, weight decay 1e-4, batch 32,
/// 300 epochs, block masking at ratio 0.7, 32 patches of 64 points, seed 1).
struct PretrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 32;
  double base_lr = 1e-4;
  double min_lr = 0.0;
  double weight_decay = 1e-4;
  std::string mask_strategy = "block";  // block | random
  double mask_ratio = 0.7;
  std::size_t num_patches = 32;  // S
  std::size_t patch_size = 64;   // K
  double alpha = 1.0;
  std::uint64_t seed = 1;
  bool use_augment = true;
  bool fps_random_start = false;
  double patch_radius = 0.15;
  // model dims
  std::size_t d_feat = 256;
  std::size_t d_pos = 64;
  bool per_patch_mask_tokens = false;
  std::size_t enc_depth = 6;
  std::size_t enc_dim = 256;
  std::size_t enc_heads = 4;
  std::size_t dec_depth = 2;
  std::size_t dec_dim = 192;
  std::size_t dec_heads = 3;
  std::size_t mlp_ratio = 4;
  double dropout_p = 0.0;

  ModelConfig model_config() const {
    ModelConfig mc;
    mc.emb.d_feat = d_feat;
    mc.emb.d_pos = d_pos;
    mc.emb.per_patch_mask_tokens = per_patch_mask_tokens;
    mc.tf.enc_depth = enc_depth;
    mc.tf.enc_dim = enc_dim;
    mc.tf.enc_heads = enc_heads;
    mc.tf.dec_depth = dec_depth;
    mc.tf.dec_dim = dec_dim;
    mc.tf.dec_heads = dec_heads;
    mc.tf.mlp_ratio = mlp_ratio;
    mc.tf.dropout_p = dropout_p;
    mc.num_patches = num_patches;
    mc.patch_size = patch_size;
    mc.patch_radius = patch_radius;
    mc.alpha = alpha;
    return mc;
  }
};

using ConfigMap = std::map<std::string, std::string>;

/// Flat key=value text; '#' starts a comment.
inline ConfigMap parse_config_text(const std::string& text) {
  ConfigMap kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: missing '=' on line " + std::to_string(lineno));
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return (b == std::string::npos) ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw std::runtime_error("config: empty key on line " + std::to_string(lineno));
    kv[key] = value;
  }
  return kv;
}

inline ConfigMap parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

namespace detail {
inline std::size_t to_size(const std::string& v) { return std::stoull(v); }
inline double to_double(const std::string& v) { return std::stod(v); }
inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::runtime_error("config: bad boolean '" + v + "'");
}
}  // namespace detail

/// Apply key=value overrides; unknown keys are rejected.
inline void apply_config(PretrainConfig& cfg, const ConfigMap& kv) {
  for (const auto& [key, value] : kv) {
    if (key == "epochs") cfg.epochs = detail::to_size(value);
    else if (key == "batch_size") cfg.batch_size = detail::to_size(value);
    else if (key == "base_lr") cfg.base_lr = detail::to_double(value);
    else if (key == "min_lr") cfg.min_lr = detail::to_double(value);
    else if (key == "weight_decay") cfg.weight_decay = detail::to_double(value);
    else if (key == "mask_strategy") cfg.mask_strategy = value;
    else if (key == "mask_ratio") cfg.mask_ratio = detail::to_double(value);
    else if (key == "num_patches") cfg.num_patches = detail::to_size(value);
    else if (key == "patch_size") cfg.patch_size = detail::to_size(value);
    else if (key == "alpha") cfg.alpha = detail::to_double(value);
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "augment") cfg.use_augment = detail::to_bool(value);
    else if (key == "fps_random_start") cfg.fps_random_start = detail::to_bool(value);
    else if (key == "patch_radius") cfg.patch_radius = detail::to_double(value);
    else if (key == "d_feat") cfg.d_feat = detail::to_size(value);
    else if (key == "d_pos") cfg.d_pos = detail::to_size(value);
    else if (key == "per_patch_mask_tokens") cfg.per_patch_mask_tokens = detail::to_bool(value);
    else if (key == "enc_depth") cfg.enc_depth = detail::to_size(value);
    else if (key == "enc_dim") cfg.enc_dim = detail::to_size(value);
    else if (key == "enc_heads") cfg.enc_heads = detail::to_size(value);
    else if (key == "dec_depth") cfg.dec_depth = detail::to_size(value);
    else if (key == "dec_dim") cfg.dec_dim = detail::to_size(value);
    else if (key == "dec_heads") cfg.dec_heads = detail::to_size(value);
    else if (key == "mlp_ratio") cfg.mlp_ratio = detail::to_size(value);
    else if (key == "dropout_p") cfg.dropout_p = detail::to_double(value);
    else throw std::runtime_error("config: unknown key '" + key + "'");
  }
}

/// Canonical form: every key on its own line, fixed order. Used for the
/// resolved-config snapshot and the checkpoint hash.
inline std::string canonical_config(const PretrainConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "alpha=" << c.alpha << "\n"
      << "augment=" << (c.use_augment ? "true" : "false") << "\n"
      << "base_lr=" << c.base_lr << "\n"
      << "batch_size=" << c.batch_size << "\n"
      << "d_feat=" << c.d_feat << "\n"
      << "d_pos=" << c.d_pos << "\n"
      << "dec_depth=" << c.dec_depth << "\n"
      << "dec_dim=" << c.dec_dim << "\n"
      << "dec_heads=" << c.dec_heads << "\n"
      << "dropout_p=" << c.dropout_p << "\n"
      << "enc_depth=" << c.enc_depth << "\n"
      << "enc_dim=" << c.enc_dim << "\n"
      << "enc_heads=" << c.enc_heads << "\n"
      << "epochs=" << c.epochs << "\n"
      << "fps_random_start=" << (c.fps_random_start ? "true" : "false") << "\n"
      << "mask_ratio=" << c.mask_ratio << "\n"
      << "mask_strategy=" << c.mask_strategy << "\n"
      << "min_lr=" << c.min_lr << "\n"
      << "mlp_ratio=" << c.mlp_ratio << "\n"
      << "num_patches=" << c.num_patches << "\n"
      << "patch_radius=" << c.patch_radius << "\n"
      << "patch_size=" << c.patch_size << "\n"
      << "per_patch_mask_tokens=" << (c.per_patch_mask_tokens ? "true" : "false") << "\n"
      << "seed=" << c.seed << "\n"
      << "weight_decay=" << c.weight_decay << "\n";
  return out.str();
}

}  // namespace mae3d
