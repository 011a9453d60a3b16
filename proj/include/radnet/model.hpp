#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "radnet/checkpoint.hpp"
#include "radnet/config.hpp"
#include "radnet/positional.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

using TokenId = std::size_t;

enum class Decision { keep, skip };

/// Per-layer key/value store for sequential decoding. Entries are append-only
/// and position ordered; `next_position` advances even when the caller
/// discards the entry it just appended.
template <typename Scalar>
class LayerKVCache {
 public:
  struct Entry {
    std::size_t position;
    Vector<Scalar> key;
    Vector<Scalar> value;
  };

  explicit LayerKVCache(std::size_t n_layers) : layers_(n_layers), next_(n_layers, 0) {}

  std::size_t next_position(std::size_t layer) const { return next_.at(layer); }
  const std::vector<Entry>& entries(std::size_t layer) const { return layers_.at(layer); }
  std::size_t n_layers() const { return layers_.size(); }

  void append(std::size_t layer, std::size_t pos, Vector<Scalar> key, Vector<Scalar> value) {
    check_position(layer, pos);
    layers_[layer].push_back({pos, std::move(key), std::move(value)});
    ++next_[layer];
  }

  void discard_last(std::size_t layer) {
    if (layers_.at(layer).empty()) throw Error(Errc::cache_consistency, "no entry to discard");
    layers_[layer].pop_back();
  }

  void check_position(std::size_t layer, std::size_t pos) const {
    if (layer >= layers_.size()) {
      throw Error(Errc::cache_consistency, "layer " + std::to_string(layer) + " out of range");
    }
    if (pos != next_[layer]) {
      throw Error(Errc::cache_consistency, "layer " + std::to_string(layer) + " expects position " +
                                               std::to_string(next_[layer]) + ", got " + std::to_string(pos));
    }
  }

 private:
  std::vector<std::vector<Entry>> layers_;
  std::vector<std::size_t> next_;
};

/// Scaled dot-product attention of one (pre-scaled) query against `count`
/// entries, split into heads. `key_at(j)` / `value_at(j)` return full-width vectors.
template <typename Scalar, typename KeyFn, typename ValueFn>
Vector<Scalar> multi_head_attend(const Vector<Scalar>& query, std::size_t count, KeyFn&& key_at,
                                 ValueFn&& value_at, std::size_t n_heads) {
  const Eigen::Index width = query.size();
  const Eigen::Index hd = width / Eigen::Index(n_heads);
  Vector<Scalar> out = Vector<Scalar>::Zero(width);
  Vector<Scalar> scores(static_cast<Eigen::Index>(count));
  for (Eigen::Index h = 0; h < Eigen::Index(n_heads); ++h) {
    const auto qh = query.segment(h * hd, hd);
    for (std::size_t j = 0; j < count; ++j) scores(Eigen::Index(j)) = qh.dot(key_at(j).segment(h * hd, hd));
    const Vector<Scalar> p = softmax(scores);
    auto oh = out.segment(h * hd, hd);
    for (std::size_t j = 0; j < count; ++j) oh += p(Eigen::Index(j)) * value_at(j).segment(h * hd, hd);
  }
  return out;
}

/// What a hook sees at a residual addition node. References are read-only;
/// the hook can only choose keep (x + R(x)) or skip (x) and record.
template <typename Scalar>
struct BlockEvent {
  const Vector<Scalar>& x;
  const Vector<Scalar>& r;
  BlockId block;
  std::size_t token_index;
};

template <typename Scalar>
using BlockHook = std::function<Decision(const BlockEvent<Scalar>&)>;

struct ForwardOptions {
  /// Keep K/V of an ATT block whose addition was skipped.
  bool keep_skipped_kv = true;
  bool compute_logits = true;
};

template <typename Scalar>
struct ForwardResult {
  Matrix<Scalar> hidden;  // residual stream after the last layer, before the head [T x d_model]
  Matrix<Scalar> logits;  // [T x vocab_size]; empty when compute_logits is off
};

template <typename Scalar>
struct AttentionProjection {
  Vector<Scalar> query;  // already multiplied by 1/sqrt(head_dim)
  Vector<Scalar> key;
  Vector<Scalar> value;
};

/// Decoder-only transformer with explicit ATT/FFN residual blocks.
template <typename Scalar>
class Model {
 public:
  explicit Model(const Checkpoint& ckpt) : config_(ckpt.config) {
    validate_checkpoint(ckpt);
    auto mat = [&](const std::string& n) -> Matrix<Scalar> {
      return ckpt.tensors.at(n).matrix().template cast<Scalar>();
    };
    auto vec = [&](const std::string& n) -> Vector<Scalar> {
      return ckpt.tensors.at(n).vector().template cast<Scalar>();
    };
    tok_embed_ = mat("tok_embed.weight");
    if (config_.pos_embedding == PosEmbedding::learned) pos_embed_ = mat("pos_embed.weight");
    layers_.resize(config_.n_layers);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& L = layers_[l];
      L.attn_norm_w = vec(p + "attn_norm.weight");
      L.attn_norm_b = vec(p + "attn_norm.bias");
      L.wq = mat(p + "attn.q_proj.weight");
      L.bq = vec(p + "attn.q_proj.bias");
      L.wk = mat(p + "attn.k_proj.weight");
      L.bk = vec(p + "attn.k_proj.bias");
      L.wv = mat(p + "attn.v_proj.weight");
      L.bv = vec(p + "attn.v_proj.bias");
      L.wo = mat(p + "attn.out_proj.weight");
      L.bo = vec(p + "attn.out_proj.bias");
      L.ffn_norm_w = vec(p + "ffn_norm.weight");
      L.ffn_norm_b = vec(p + "ffn_norm.bias");
      L.fc1 = mat(p + "ffn.fc1.weight");
      L.b1 = vec(p + "ffn.fc1.bias");
      L.fc2 = mat(p + "ffn.fc2.weight");
      L.b2 = vec(p + "ffn.fc2.bias");
    }
    if (config_.final_norm) {
      final_norm_w_ = vec("final_norm.weight");
      final_norm_b_ = vec("final_norm.bias");
    }
    if (!config_.tied_embeddings) lm_head_ = mat("lm_head.weight");
  }

  const ModelConfig& config() const { return config_; }
  std::size_t n_layers() const { return config_.n_layers; }

  void check_token(TokenId token) const {
    if (token >= config_.vocab_size) {
      throw Error(Errc::input, "token id " + std::to_string(token) + " >= vocab_size " +
                                   std::to_string(config_.vocab_size));
    }
  }

  /// Token embedding plus position embedding for sequence position `pos`.
  Vector<Scalar> embed(TokenId token, std::size_t pos) const {
    check_token(token);
    if (pos >= config_.max_seq_len) {
      throw Error(Errc::sequence_length, "position " + std::to_string(pos) + " exceeds max_seq_len " +
                                             std::to_string(config_.max_seq_len));
    }
    Vector<Scalar> x = tok_embed_.row(Eigen::Index(token)).transpose();
    if (config_.pos_embedding == PosEmbedding::learned) {
      x += pos_embed_.row(Eigen::Index(pos + config_.pos_offset)).transpose();
    } else {
      x += positional_embedding<Scalar>(pos, config_.d_model);
    }
    return x;
  }

  /// Normalization applied at the start of a branch (identity under post-norm).
  Vector<Scalar> branch_input(const Vector<Scalar>& x, BlockKind kind, std::size_t layer) const {
    if (!config_.pre_norm) return x;
    const auto& L = layers_.at(layer);
    return kind == BlockKind::att ? layer_norm(x, L.attn_norm_w, L.attn_norm_b, config_.norm_eps)
                                  : layer_norm(x, L.ffn_norm_w, L.ffn_norm_b, config_.norm_eps);
  }

  AttentionProjection<Scalar> project_qkv(const Vector<Scalar>& x, std::size_t layer) const {
    const auto& L = layers_.at(layer);
    const Vector<Scalar> h = branch_input(x, BlockKind::att, layer);
    const Scalar scaling = Scalar(1) / std::sqrt(Scalar(config_.head_dim()));
    return {(L.wq * h + L.bq) * scaling, L.wk * h + L.bk, L.wv * h + L.bv};
  }

  Vector<Scalar> attention_output(const Vector<Scalar>& attended, std::size_t layer) const {
    const auto& L = layers_.at(layer);
    return L.wo * attended + L.bo;
  }

  /// Residual branch R(x) of the attention block. Appends this token's K/V to
  /// the layer cache; `pos` must be the next unfilled position for the layer.
  Vector<Scalar> attention_block(const Vector<Scalar>& x, std::size_t layer, LayerKVCache<Scalar>& cache,
                                 std::size_t pos) const {
    cache.check_position(layer, pos);
    auto proj = project_qkv(x, layer);
    cache.append(layer, pos, std::move(proj.key), std::move(proj.value));
    const auto& entries = cache.entries(layer);
    const Vector<Scalar> attended = multi_head_attend<Scalar>(
        proj.query, entries.size(), [&](std::size_t j) -> const Vector<Scalar>& { return entries[j].key; },
        [&](std::size_t j) -> const Vector<Scalar>& { return entries[j].value; }, config_.n_heads);
    return attention_output(attended, layer);
  }

  /// Residual branch R(x) of the feed-forward block.
  Vector<Scalar> ffn_block(const Vector<Scalar>& x, std::size_t layer) const {
    const auto& L = layers_.at(layer);
    const Vector<Scalar> h = branch_input(x, BlockKind::ffn, layer);
    const Vector<Scalar> a = activation(Vector<Scalar>(L.fc1 * h + L.b1), config_.activation);
    return L.fc2 * a + L.b2;
  }

  /// Output of the addition node: x + R(x) when kept, x when skipped; post-norm
  /// models normalize afterwards.
  Vector<Scalar> combine(const Vector<Scalar>& x, const Vector<Scalar>& r, BlockId block, Decision d) const {
    Vector<Scalar> y = d == Decision::keep ? Vector<Scalar>(x + r) : x;
    if (config_.pre_norm) return y;
    const auto& L = layers_.at(block.layer);
    return block.kind == BlockKind::att ? layer_norm(y, L.attn_norm_w, L.attn_norm_b, config_.norm_eps)
                                        : layer_norm(y, L.ffn_norm_w, L.ffn_norm_b, config_.norm_eps);
  }

  Vector<Scalar> head(const Vector<Scalar>& hidden) const {
    const Vector<Scalar> h =
        config_.final_norm ? layer_norm(hidden, final_norm_w_, final_norm_b_, config_.norm_eps) : hidden;
    return config_.tied_embeddings ? Vector<Scalar>(tok_embed_ * h) : Vector<Scalar>(lm_head_ * h);
  }

  void check_sequence(std::span<const TokenId> tokens) const {
    if (tokens.size() > config_.max_seq_len) {
      throw Error(Errc::sequence_length, "sequence of " + std::to_string(tokens.size()) +
                                             " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    }
    for (auto t : tokens) check_token(t);
  }

  /// One token through the whole stack, firing `hook` at every addition node.
  Vector<Scalar> step(TokenId token, std::size_t pos, LayerKVCache<Scalar>& cache, const BlockHook<Scalar>& hook,
                      const ForwardOptions& opts = {}) const {
    Vector<Scalar> x = embed(token, pos);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const BlockId att{l, BlockKind::att};
      const Vector<Scalar> ra = attention_block(x, l, cache, pos);
      const Decision da = hook ? hook(BlockEvent<Scalar>{x, ra, att, pos}) : Decision::keep;
      if (da == Decision::skip && !opts.keep_skipped_kv) cache.discard_last(l);
      x = combine(x, ra, att, da);

      const BlockId ffn{l, BlockKind::ffn};
      const Vector<Scalar> rf = ffn_block(x, l);
      const Decision df = hook ? hook(BlockEvent<Scalar>{x, rf, ffn, pos}) : Decision::keep;
      x = combine(x, rf, ffn, df);
    }
    if (!all_finite(x)) {
      throw Error(Errc::numeric, "non-finite hidden state at position " + std::to_string(pos));
    }
    return x;
  }

  /// Teacher-forced forward over a token sequence with per-token decoding
  /// through a fresh per-layer cache.
  ForwardResult<Scalar> forward(std::span<const TokenId> tokens, const BlockHook<Scalar>& hook,
                                const ForwardOptions& opts = {}) const {
    check_sequence(tokens);
    const auto T = Eigen::Index(tokens.size());
    ForwardResult<Scalar> out;
    out.hidden.resize(T, Eigen::Index(config_.d_model));
    if (opts.compute_logits) out.logits.resize(T, Eigen::Index(config_.vocab_size));
    LayerKVCache<Scalar> cache(config_.n_layers);
    for (Eigen::Index t = 0; t < T; ++t) {
      const Vector<Scalar> x = step(tokens[std::size_t(t)], std::size_t(t), cache, hook, opts);
      out.hidden.row(t) = x.transpose();
      if (opts.compute_logits) out.logits.row(t) = head(x).transpose();
    }
    return out;
  }

  /// Hook-free path, used as the reference the hooked forward must reproduce.
  ForwardResult<Scalar> reference_forward(std::span<const TokenId> tokens) const {
    check_sequence(tokens);
    const auto T = Eigen::Index(tokens.size());
    ForwardResult<Scalar> out;
    out.hidden.resize(T, Eigen::Index(config_.d_model));
    out.logits.resize(T, Eigen::Index(config_.vocab_size));
    LayerKVCache<Scalar> cache(config_.n_layers);
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto pos = std::size_t(t);
      Vector<Scalar> x = embed(tokens[pos], pos);
      for (std::size_t l = 0; l < config_.n_layers; ++l) {
        x = combine(x, attention_block(x, l, cache, pos), {l, BlockKind::att}, Decision::keep);
        x = combine(x, ffn_block(x, l), {l, BlockKind::ffn}, Decision::keep);
      }
      out.hidden.row(t) = x.transpose();
      out.logits.row(t) = head(x).transpose();
    }
    return out;
  }

 private:
  struct LayerParams {
    Vector<Scalar> attn_norm_w, attn_norm_b;
    Matrix<Scalar> wq, wk, wv, wo;
    Vector<Scalar> bq, bk, bv, bo;
    Vector<Scalar> ffn_norm_w, ffn_norm_b;
    Matrix<Scalar> fc1, fc2;
    Vector<Scalar> b1, b2;
  };

  ModelConfig config_;
  Matrix<Scalar> tok_embed_;
  Matrix<Scalar> pos_embed_;
  std::vector<LayerParams> layers_;
  Vector<Scalar> final_norm_w_, final_norm_b_;
  Matrix<Scalar> lm_head_;
};

}  // namespace radnet
