#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mae3d/nn.hpp"
#include "mae3d/tensor.hpp"

namespace mae3d {

struct TransformerConfig {
  std::size_t enc_depth = 6;
  std::size_t enc_dim = 256;
  std::size_t enc_heads = 4;
  std::size_t dec_depth = 2;
  std::size_t dec_dim = 192;
  std::size_t dec_heads = 3;
  std::size_t mlp_ratio = 4;
  double dropout_p = 0.0;

  void validate() const {
    if (enc_depth < 1 || dec_depth < 1)
      throw std::invalid_argument("transformer: depth must be >= 1");
    if (enc_heads == 0 || dec_heads == 0 || enc_dim % enc_heads != 0 ||
        dec_dim % dec_heads != 0)
      throw std::invalid_argument("transformer: dim must be divisible by head count");
  }
};

enum class TokenRole { cls, visible, mask };

template <typename T>
struct TokenSeq {
  Tensor<T> tokens;  // [L, d]
  std::vector<TokenRole> roles;
  std::vector<std::size_t> patch_index;  // unused slot 0 for the class token
};

/// Pre-norm transformer block: x + MHA(LN(x)), then h + FFN(LN(h)).
template <typename T>
class TransformerBlock {
public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& store, const std::string& prefix, std::size_t dim,
                   std::size_t heads, std::size_t mlp_ratio, Rng& rng)
      : dim_(dim),
        heads_(heads),
        ln1_(store, prefix + ".ln1", dim),
        ln2_(store, prefix + ".ln2", dim),
        q_(store, prefix + ".q", dim, dim, rng),
        k_(store, prefix + ".k", dim, dim, rng),
        v_(store, prefix + ".v", dim, dim, rng),
        o_(store, prefix + ".o", dim, dim, rng),
        ff1_(store, prefix + ".ff1", dim, dim * mlp_ratio, rng),
        ff2_(store, prefix + ".ff2", dim * mlp_ratio, dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, double dropout_p, Rng& rng, bool train,
                       std::vector<Tensor<T>>* attention_probe = nullptr) const {
    auto y = ln1_(x);
    auto q = q_(y), k = k_(y), v = v_(y);
    const std::size_t dh = dim_ / heads_;
    const T scale_f = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Tensor<T>> head_out;
    head_out.reserve(heads_);
    for (std::size_t h = 0; h < heads_; ++h) {
      auto qh = slice_cols(q, h * dh, (h + 1) * dh);
      auto kh = slice_cols(k, h * dh, (h + 1) * dh);
      auto vh = slice_cols(v, h * dh, (h + 1) * dh);
      auto scores = scale(matmul(qh, transpose2d(kh)), scale_f);
      auto attn = softmax_last(scores);
      if (attention_probe) attention_probe->push_back(attn);
      head_out.push_back(matmul(attn, vh));
    }
    auto mha = o_(concat(head_out, 1));
    mha = dropout(mha, dropout_p, rng, train);
    auto h1 = add(x, mha);

    auto ff = ff2_(dropout(gelu(ff1_(ln2_(h1))), dropout_p, rng, train));
    ff = dropout(ff, dropout_p, rng, train);
    return add(h1, ff);
  }

private:
  std::size_t dim_ = 0, heads_ = 0;
  LayerNorm<T> ln1_, ln2_;
  Linear<T> q_, k_, v_, o_;
  Linear<T> ff1_, ff2_;
};

/// Encoder over class + visible tokens only. Applies the d_tok -> enc_dim
/// input projection, the block stack and a final layer norm.
template <typename T>
class Encoder {
public:
  Encoder() = default;
  Encoder(ParamStore<T>& store, const std::string& prefix, std::size_t d_tok,
          const TransformerConfig& cfg, Rng& rng)
      : cfg_(cfg),
        in_proj_(store, prefix + ".in", d_tok, cfg.enc_dim, rng),
        final_ln_(store, prefix + ".ln", cfg.enc_dim) {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.enc_depth; ++i)
      blocks_.emplace_back(store, prefix + ".b" + std::to_string(i), cfg.enc_dim, cfg.enc_heads,
                           cfg.mlp_ratio, rng);
  }

  Tensor<T> operator()(const TokenSeq<T>& seq, Rng& rng, bool train,
                       std::vector<Tensor<T>>* attention_probe = nullptr) const {
    for (const auto role : seq.roles)
      if (role == TokenRole::mask)
        throw std::invalid_argument("encoder: mask tokens are not allowed in the encoder");
    auto x = in_proj_(seq.tokens);
    for (const auto& b : blocks_) x = b(x, cfg_.dropout_p, rng, train, attention_probe);
    return final_ln_(x);
  }

private:
  TransformerConfig cfg_;
  Linear<T> in_proj_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> final_ln_;
};

/// Decoder over all S+1 tokens at dec_dim.
template <typename T>
class Decoder {
public:
  Decoder() = default;
  Decoder(ParamStore<T>& store, const std::string& prefix, const TransformerConfig& cfg, Rng& rng)
      : cfg_(cfg), final_ln_(store, prefix + ".ln", cfg.dec_dim) {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.dec_depth; ++i)
      blocks_.emplace_back(store, prefix + ".b" + std::to_string(i), cfg.dec_dim, cfg.dec_heads,
                           cfg.mlp_ratio, rng);
  }

  Tensor<T> operator()(const TokenSeq<T>& seq, std::size_t num_patches, Rng& rng,
                       bool train) const {
    if (seq.tokens.rows() != num_patches + 1)
      throw std::invalid_argument("decoder: expected " + std::to_string(num_patches + 1) +
                                  " tokens, got " + std::to_string(seq.tokens.rows()));
    auto x = seq.tokens;
    for (const auto& b : blocks_) x = b(x, cfg_.dropout_p, rng, train);
    return final_ln_(x);
  }

private:
  TransformerConfig cfg_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> final_ln_;
};

/// Elementwise max over the S patch tokens; the class token (row 0) is
/// excluded. Returns [1, dec_dim].
template <typename T>
Tensor<T> pool_global_feature(const Tensor<T>& decoded) {
  if (decoded.rows() < 2) throw std::invalid_argument("pool: need at least one patch token");
  auto patch_tokens = slice_rows(decoded, 1, decoded.rows());
  auto pooled = reduce_max(patch_tokens, 0);  // [dec_dim]
  return reshape(pooled, {std::size_t{1}, decoded.cols()});
}

}  // namespace mae3d
