#include "radnet/config.hpp"

#include <cstdio>

namespace radnet {

void ModelConfig::validate() const {
  if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
    throw Error(Errc::config, "d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                                  std::to_string(n_heads) + ")");
  }
  if (max_seq_len < 1) throw Error(Errc::config, "max_seq_len must be >= 1");
  if (vocab_size < 2) throw Error(Errc::config, "vocab_size must be >= 2");
  if (d_ff == 0) throw Error(Errc::config, "d_ff must be >= 1");
  if (!(norm_eps > 0)) throw Error(Errc::config, "norm_eps must be > 0");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},
                     {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len},
                     {"activation", activation_name(c.activation)},
                     {"pre_norm", c.pre_norm},
                     {"final_norm", c.final_norm},
                     {"tied_embeddings", c.tied_embeddings},
                     {"pos_embedding", c.pos_embedding == PosEmbedding::learned ? "learned" : "sinusoidal"},
                     {"pos_offset", c.pos_offset},
                     {"norm_eps", c.norm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    c = ModelConfig{};
    j.at("n_layers").get_to(c.n_layers);
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_ff").get_to(c.d_ff);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_seq_len").get_to(c.max_seq_len);
    c.activation = parse_activation(j.at("activation").get<std::string>());
    j.at("pre_norm").get_to(c.pre_norm);
    j.at("final_norm").get_to(c.final_norm);
    j.at("tied_embeddings").get_to(c.tied_embeddings);
    const auto pos = j.at("pos_embedding").get<std::string>();
    if (pos == "learned") {
      c.pos_embedding = PosEmbedding::learned;
    } else if (pos == "sinusoidal") {
      c.pos_embedding = PosEmbedding::sinusoidal;
    } else {
      throw Error(Errc::config, "unknown pos_embedding '" + pos + "'");
    }
    j.at("pos_offset").get_to(c.pos_offset);
    if (j.contains("norm_eps")) j.at("norm_eps").get_to(c.norm_eps);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config, std::string("model config: ") + e.what());
  }
  c.validate();
}

ModelConfig parse_sidecar_config(const nlohmann::json& j, std::size_t position_table_rows) {
  if (j.contains("d_model")) return j.get<ModelConfig>();
  if (j.value("model_type", "") != "opt") {
    throw Error(Errc::config, "sidecar config is neither a native model config nor an OPT config");
  }
  try {
    ModelConfig c;
    c.n_layers = j.at("num_hidden_layers").get<std::size_t>();
    c.d_model = j.at("hidden_size").get<std::size_t>();
    c.n_heads = j.at("num_attention_heads").get<std::size_t>();
    c.d_ff = j.at("ffn_dim").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_position_embeddings").get<std::size_t>();
    c.activation = parse_activation(j.value("activation_function", std::string("relu")));
    c.pre_norm = j.value("do_layer_norm_before", true);
    c.final_norm = c.pre_norm;
    c.tied_embeddings = j.value("tie_word_embeddings", true);
    c.pos_embedding = PosEmbedding::learned;
    if (!j.value("enable_bias", true) || !j.value("layer_norm_elementwise_affine", true) ||
        j.value("_remove_final_layer_norm", false)) {
      throw Error(Errc::config, "OPT variants without biases, affine norms or the final norm are not supported");
    }
    if (j.contains("word_embed_proj_dim") && j["word_embed_proj_dim"].get<std::size_t>() != c.d_model) {
      throw Error(Errc::config, "OPT variants with a projected embedding dimension are not supported");
    }
    if (position_table_rows != 0) {
      if (position_table_rows < c.max_seq_len) {
        throw Error(Errc::config, "position table has fewer rows than max_position_embeddings");
      }
      c.pos_offset = position_table_rows - c.max_seq_len;
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config, std::string("OPT config: ") + e.what());
  }
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string config_digest(const ModelConfig& c) {
  return hex64(fnv1a64(nlohmann::json(c).dump()));
}

}  // namespace radnet
