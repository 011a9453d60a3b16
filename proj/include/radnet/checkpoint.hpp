#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "radnet/config.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

using TensorMap = std::map<std::string, Tensor<float>>;

/// Container shared by model checkpoints, router checkpoints and distillation
/// datasets: a JSON header plus named sections in name order. The byte layout
/// is documented in docs/formats.md.
struct TensorArchive {
  nlohmann::json header = nlohmann::json::object();
  TensorMap tensors;
  std::map<std::string, std::vector<std::int32_t>> index_arrays;

  bool operator==(const TensorArchive&) const = default;
};

inline constexpr char kArchiveMagic[8] = {'R', 'A', 'D', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kArchiveVersion = 1;

std::vector<char> encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(const std::vector<char>& bytes);
void write_archive(const TensorArchive& archive, const std::filesystem::path& path);
TensorArchive read_archive(const std::filesystem::path& path);

struct Checkpoint {
  ModelConfig config;
  TensorMap tensors;
  std::map<std::string, std::string> metadata;
  /// Source names that the loader saw but did not map; reported, never dropped silently.
  std::vector<std::string> unmapped;

  bool operator==(const Checkpoint& o) const {
    return config == o.config && tensors == o.tensors && metadata == o.metadata;
  }
};

/// Canonical parameter names and shapes a config requires.
std::map<std::string, Shape> required_parameters(const ModelConfig& config);

/// Throws mapping error for missing names, shape error for wrong shapes.
void validate_checkpoint(const Checkpoint& ckpt);

void save_model(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_model(const std::filesystem::path& path);

/// Maps source tensor names to canonical parameter names.
using NameMap = std::map<std::string, std::string>;

/// Reads the public tensor-file layout: u64 LE header length, JSON header of
/// {name: {dtype, shape, data_offsets}}, byte payload. F16/BF16 are widened to F32.
TensorMap read_public_tensor_file(const std::filesystem::path& path);
std::vector<std::string> read_public_tensor_names(const std::filesystem::path& path);

Checkpoint load_public_tensor_file(const std::filesystem::path& path, const NameMap& name_map,
                                   const std::filesystem::path& config_path);

/// Name map for OPT decoder checkpoints; `prefix` is usually "model.decoder." or "decoder.".
NameMap opt_name_map(std::size_t n_layers, const std::string& prefix);

/// Splittable generator used for synthetic weights: SplitMix64 seeded with
/// `seed ^ fnv1a64(name)`, normals by Box-Muller.
class NamedStream {
 public:
  NamedStream(std::uint64_t seed, std::string_view name);
  std::uint64_t next_u64();
  double next_uniform();  // [0, 1)
  double next_normal();

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Deterministic synthetic model. `scale` multiplies every residual-branch
/// parameter (attention and FFN weights and biases); embeddings, head and norms
/// do not depend on it, so scale = 0 gives exactly-zero branches.
Checkpoint init_synthetic(const ModelConfig& config, std::uint64_t seed, double scale);

}  // namespace radnet
