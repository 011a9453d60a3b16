#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "radnet/error.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

enum class PosEmbedding { learned, sinusoidal };

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 128;
  Activation activation = Activation::relu;
  bool pre_norm = true;
  bool final_norm = true;
  bool tied_embeddings = true;
  PosEmbedding pos_embedding = PosEmbedding::learned;
  std::size_t pos_offset = 0;
  double norm_eps = 1e-5;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t n_blocks() const { return 2 * n_layers; }

  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

enum class BlockKind { att, ffn };

inline std::string_view block_kind_name(BlockKind k) { return k == BlockKind::att ? "ATT" : "FFN"; }

inline BlockKind parse_block_kind(std::string_view s) {
  if (s == "ATT") return BlockKind::att;
  if (s == "FFN") return BlockKind::ffn;
  throw Error(Errc::input, "unknown block kind '" + std::string(s) + "'");
}

/// One residual block; the linear index interleaves ATT and FFN per layer.
struct BlockId {
  std::size_t layer = 0;
  BlockKind kind = BlockKind::att;

  std::size_t index() const { return 2 * layer + (kind == BlockKind::ffn ? 1 : 0); }
  static BlockId from_index(std::size_t i) { return {i / 2, i % 2 ? BlockKind::ffn : BlockKind::att}; }

  bool operator==(const BlockId&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Parses a sidecar config: either the native ModelConfig object or a
/// Hugging Face OPT `config.json`. For OPT, `pos_offset` cannot be read from
/// the config itself; pass the learned position table row count so it can be
/// derived from the checkpoint.
ModelConfig parse_sidecar_config(const nlohmann::json& j, std::size_t position_table_rows = 0);

/// Stable 64-bit FNV-1a over bytes, rendered as 16 hex digits.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);
std::string config_digest(const ModelConfig& c);

}  // namespace radnet
