#include "radnet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

namespace radnet {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

enum class SectionType : std::uint8_t { f32 = 0, i32 = 1 };

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  std::vector<char> take() { return std::move(out_); }

 private:
  std::vector<char> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<char>& in) : in_(in) {}

  template <typename T>
  T get(const char* what) {
    T v;
    need(sizeof(T), what);
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n, const char* what) const {
    if (n > in_.size() - pos_) {
      throw Error(Errc::truncation, std::string("archive truncated while reading ") + what + " (need " +
                                        std::to_string(n) + " bytes, " + std::to_string(in_.size() - pos_) +
                                        " left)");
    }
  }
  const char* take(std::size_t n, const char* what) {
    need(n, what);
    const char* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<char>& in_;
  std::size_t pos_ = 0;
};

std::size_t checked_product(const Shape& shape, std::size_t elem, const std::string& name) {
  std::size_t n = elem;
  for (auto d : shape) {
    if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d) {
      throw Error(Errc::format, "shape of '" + name + "' overflows");
    }
    n *= d;
  }
  return n;
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open '" + path.string() + "'");
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write '" + path.string() + "'");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw Error(Errc::io, "write failed for '" + path.string() + "'");
}

}  // namespace

std::vector<char> encode_archive(const TensorArchive& archive) {
  for (const auto& [name, _] : archive.index_arrays) {
    if (archive.tensors.count(name)) throw Error(Errc::format, "duplicate section name '" + name + "'");
  }
  Writer w;
  w.bytes(kArchiveMagic, sizeof kArchiveMagic);
  w.put<std::uint32_t>(kArchiveVersion);
  const std::string header = archive.header.dump();
  w.put<std::uint64_t>(header.size());
  w.bytes(header.data(), header.size());

  // Sections in name order across both kinds.
  std::map<std::string, SectionType> order;
  for (const auto& [name, _] : archive.tensors) order[name] = SectionType::f32;
  for (const auto& [name, _] : archive.index_arrays) order[name] = SectionType::i32;
  w.put<std::uint64_t>(order.size());
  for (const auto& [name, type] : order) {
    w.put<std::uint32_t>(std::uint32_t(name.size()));
    w.bytes(name.data(), name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(type));
    if (type == SectionType::f32) {
      const auto& t = archive.tensors.at(name);
      w.put<std::uint32_t>(std::uint32_t(t.shape.size()));
      for (auto d : t.shape) w.put<std::uint64_t>(d);
      w.put<std::uint64_t>(t.data.size() * sizeof(float));
      w.bytes(t.data.data(), t.data.size() * sizeof(float));
    } else {
      const auto& a = archive.index_arrays.at(name);
      w.put<std::uint32_t>(1);
      w.put<std::uint64_t>(a.size());
      w.put<std::uint64_t>(a.size() * sizeof(std::int32_t));
      w.bytes(a.data(), a.size() * sizeof(std::int32_t));
    }
  }
  return w.take();
}

TensorArchive decode_archive(const std::vector<char>& bytes) {
  Reader r(bytes);
  if (bytes.size() < sizeof kArchiveMagic || std::memcmp(bytes.data(), kArchiveMagic, sizeof kArchiveMagic) != 0) {
    throw Error(Errc::format, "bad magic bytes: not a radnet archive");
  }
  r.take(sizeof kArchiveMagic, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kArchiveVersion) {
    throw Error(Errc::format, "unsupported archive version " + std::to_string(version));
  }
  TensorArchive archive;
  const auto header_len = r.get<std::uint64_t>("header length");
  const char* header = r.take(header_len, "header");
  try {
    archive.header = nlohmann::json::parse(header, header + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, std::string("archive header is not valid JSON: ") + e.what());
  }

  const auto count = r.get<std::uint64_t>("section count");
  for (std::uint64_t s = 0; s < count; ++s) {
    const auto name_len = r.get<std::uint32_t>("section name length");
    const char* name_ptr = r.take(name_len, "section name");
    std::string name(name_ptr, name_len);
    const auto type = r.get<std::uint8_t>("section type");
    if (type > 1) throw Error(Errc::format, "section '" + name + "' has unknown type " + std::to_string(type));
    const auto rank = r.get<std::uint32_t>("rank");
    r.need(std::size_t(rank) * sizeof(std::uint64_t), "dims");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>("dim");
    const auto payload = r.get<std::uint64_t>("payload length");
    const std::size_t elem = type == 0 ? sizeof(float) : sizeof(std::int32_t);
    const std::size_t expected = checked_product(shape, elem, name);
    if (payload != expected) {
      throw Error(Errc::shape_mismatch, "section '" + name + "' declares shape " + shape_string(shape) + " (" +
                                            std::to_string(expected) + " bytes) but payload length " +
                                            std::to_string(payload));
    }
    const char* data = r.take(payload, "payload");
    if (archive.tensors.count(name) || archive.index_arrays.count(name)) {
      throw Error(Errc::format, "duplicate section '" + name + "'");
    }
    if (type == 0) {
      std::vector<float> values(payload / sizeof(float));
      std::memcpy(values.data(), data, payload);
      archive.tensors.emplace(name, Tensor<float>(shape, std::move(values)));
    } else {
      if (rank != 1) throw Error(Errc::format, "index section '" + name + "' must be rank 1");
      std::vector<std::int32_t> values(payload / sizeof(std::int32_t));
      std::memcpy(values.data(), data, payload);
      archive.index_arrays.emplace(name, std::move(values));
    }
  }
  if (!r.done()) throw Error(Errc::format, "trailing bytes after last section");
  return archive;
}

void write_archive(const TensorArchive& archive, const std::filesystem::path& path) {
  write_file(path, encode_archive(archive));
}

TensorArchive read_archive(const std::filesystem::path& path) { return decode_archive(read_file(path)); }

std::map<std::string, Shape> required_parameters(const ModelConfig& c) {
  std::map<std::string, Shape> req;
  const std::size_t d = c.d_model;
  req["tok_embed.weight"] = {c.vocab_size, d};
  if (c.pos_embedding == PosEmbedding::learned) req["pos_embed.weight"] = {c.max_seq_len + c.pos_offset, d};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    req[p + "attn_norm.weight"] = {d};
    req[p + "attn_norm.bias"] = {d};
    for (const char* proj : {"q_proj", "k_proj", "v_proj", "out_proj"}) {
      req[p + "attn." + proj + ".weight"] = {d, d};
      req[p + "attn." + proj + ".bias"] = {d};
    }
    req[p + "ffn_norm.weight"] = {d};
    req[p + "ffn_norm.bias"] = {d};
    req[p + "ffn.fc1.weight"] = {c.d_ff, d};
    req[p + "ffn.fc1.bias"] = {c.d_ff};
    req[p + "ffn.fc2.weight"] = {d, c.d_ff};
    req[p + "ffn.fc2.bias"] = {d};
  }
  if (c.final_norm) {
    req["final_norm.weight"] = {d};
    req["final_norm.bias"] = {d};
  }
  if (!c.tied_embeddings) req["lm_head.weight"] = {c.vocab_size, d};
  return req;
}

void validate_checkpoint(const Checkpoint& ckpt) {
  ckpt.config.validate();
  const auto req = required_parameters(ckpt.config);
  std::vector<std::string> missing;
  for (const auto& [name, shape] : req) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      missing.push_back(name);
      continue;
    }
    if (it->second.shape != shape) {
      throw Error(Errc::shape_mismatch, "parameter '" + name + "' has shape " + shape_string(it->second.shape) +
                                            ", expected " + shape_string(shape));
    }
    if (!all_finite(it->second.vector())) {
      throw Error(Errc::numeric, "parameter '" + name + "' contains non-finite values");
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing required parameters:";
    for (const auto& m : missing) msg += " " + m;
    throw Error(Errc::mapping, msg);
  }
  for (const auto& [name, _] : ckpt.tensors) {
    if (!req.count(name)) throw Error(Errc::mapping, "unknown parameter '" + name + "' for this config");
  }
}

void save_model(const Checkpoint& ckpt, const std::filesystem::path& path) {
  validate_checkpoint(ckpt);
  TensorArchive a;
  a.header = {{"kind", "model"}, {"config", ckpt.config}, {"metadata", ckpt.metadata}};
  a.tensors = ckpt.tensors;
  write_archive(a, path);
}

Checkpoint load_model(const std::filesystem::path& path) {
  auto a = read_archive(path);
  if (a.header.value("kind", "") != "model") {
    throw Error(Errc::format, "'" + path.string() + "' is not a model checkpoint");
  }
  Checkpoint c;
  try {
    c.config = a.header.at("config").get<ModelConfig>();
    c.metadata = a.header.at("metadata").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, std::string("checkpoint header: ") + e.what());
  }
  c.tensors = std::move(a.tensors);
  validate_checkpoint(c);
  return c;
}

namespace {

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = std::uint32_t(h & 0x8000) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1f;
  const std::uint32_t mant = h & 0x3ff;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // Subnormal half: value = mant * 2^-24.
      const float v = std::ldexp(float(mant), -24);
      return sign ? -v : v;
    }
  } else if (exp == 31) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 112) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

float bf16_to_float(std::uint16_t h) { return std::bit_cast<float>(std::uint32_t(h) << 16); }

}  // namespace

namespace {

nlohmann::json read_public_header(std::ifstream& in, const std::filesystem::path& path, std::uint64_t& file_size,
                                  std::uint64_t& header_len) {
  if (!in) throw Error(Errc::io, "cannot open '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);
  if (file_size < 8) throw Error(Errc::format, "tensor file shorter than its 8-byte header length");
  in.read(reinterpret_cast<char*>(&header_len), 8);
  if (header_len > file_size - 8) {
    throw Error(Errc::format, "header length " + std::to_string(header_len) + " exceeds file size " +
                                  std::to_string(file_size));
  }
  std::string header(header_len, '\0');
  in.read(header.data(), std::streamsize(header_len));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, std::string("tensor file header is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(Errc::format, "tensor file header must be a JSON object");
  return j;
}

}  // namespace

std::vector<std::string> read_public_tensor_names(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::uint64_t file_size = 0, header_len = 0;
  const auto j = read_public_header(in, path, file_size, header_len);
  std::vector<std::string> names;
  for (const auto& [name, _] : j.items()) {
    if (name != "__metadata__") names.push_back(name);
  }
  return names;
}

TensorMap read_public_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::uint64_t file_size = 0, header_len = 0;
  const auto j = read_public_header(in, path, file_size, header_len);
  const std::uint64_t payload_size = file_size - 8 - header_len;

  struct Entry {
    std::string name;
    std::string dtype;
    Shape shape;
    std::uint64_t begin, end;
  };
  std::vector<Entry> entries;
  std::vector<std::string> unsupported;
  for (const auto& [name, info] : j.items()) {
    if (name == "__metadata__") continue;
    Entry e;
    e.name = name;
    try {
      e.dtype = info.at("dtype").get<std::string>();
      e.shape = info.at("shape").get<Shape>();
      const auto offs = info.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offs.size() != 2) throw Error(Errc::format, "data_offsets of '" + name + "' must have two entries");
      e.begin = offs[0];
      e.end = offs[1];
    } catch (const nlohmann::json::exception& ex) {
      throw Error(Errc::format, "bad header entry '" + name + "': " + ex.what());
    }
    if (e.dtype != "F32" && e.dtype != "F16" && e.dtype != "BF16") {
      unsupported.push_back(name + " (" + e.dtype + ")");
      continue;
    }
    const std::size_t elem = e.dtype == "F32" ? 4 : 2;
    if (e.begin > e.end || e.end > payload_size) {
      throw Error(Errc::format, "tensor '" + name + "' offsets [" + std::to_string(e.begin) + "," +
                                    std::to_string(e.end) + ") are outside the " + std::to_string(payload_size) +
                                    "-byte payload");
    }
    if (e.end - e.begin != checked_product(e.shape, elem, name)) {
      throw Error(Errc::format, "tensor '" + name + "' byte span does not match shape " + shape_string(e.shape));
    }
    entries.push_back(std::move(e));
  }
  if (!unsupported.empty()) {
    std::string msg = "unsupported dtype for:";
    for (const auto& u : unsupported) msg += " " + u;
    throw Error(Errc::unsupported_dtype, msg);
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < entries.size(); ++i) {
    if (entries[i].begin < entries[i - 1].end) {
      throw Error(Errc::format, "tensors '" + entries[i - 1].name + "' and '" + entries[i].name + "' overlap");
    }
  }

  TensorMap out;
  std::vector<char> raw;
  for (const auto& e : entries) {
    raw.resize(e.end - e.begin);
    in.seekg(std::streamoff(8 + header_len + e.begin));
    in.read(raw.data(), std::streamsize(raw.size()));
    if (!in) throw Error(Errc::truncation, "short read for tensor '" + e.name + "'");
    std::vector<float> values(shape_size(e.shape));
    if (e.dtype == "F32") {
      std::memcpy(values.data(), raw.data(), raw.size());
    } else {
      for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint16_t h;
        std::memcpy(&h, raw.data() + 2 * i, 2);
        values[i] = e.dtype == "F16" ? half_to_float(h) : bf16_to_float(h);
      }
    }
    out.emplace(e.name, Tensor<float>(e.shape, std::move(values)));
  }
  return out;
}

Checkpoint load_public_tensor_file(const std::filesystem::path& path, const NameMap& name_map,
                                   const std::filesystem::path& config_path) {
  auto source = read_public_tensor_file(path);
  Checkpoint c;
  for (auto& [name, tensor] : source) {
    auto it = name_map.find(name);
    if (it == name_map.end()) {
      c.unmapped.push_back(name);
      continue;
    }
    c.tensors.emplace(it->second, std::move(tensor));
  }

  std::ifstream cfg(config_path);
  if (!cfg) throw Error(Errc::io, "cannot open config '" + config_path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config, std::string("config is not valid JSON: ") + e.what());
  }
  std::size_t pos_rows = 0;
  if (auto it = c.tensors.find("pos_embed.weight"); it != c.tensors.end() && it->second.rank() == 2) {
    pos_rows = it->second.shape[0];
  }
  c.config = parse_sidecar_config(j, pos_rows);
  for (const char* key : {"eos_token_id", "bos_token_id", "pad_token_id"}) {
    if (j.contains(key) && j[key].is_number_integer()) c.metadata[key] = std::to_string(j[key].get<long long>());
  }
  c.metadata["source"] = path.filename().string();

  const auto req = required_parameters(c.config);
  for (auto it = c.tensors.begin(); it != c.tensors.end();) {
    if (!req.count(it->first)) {
      c.unmapped.push_back(it->first);
      it = c.tensors.erase(it);
    } else {
      ++it;
    }
  }
  validate_checkpoint(c);
  return c;
}

NameMap opt_name_map(std::size_t n_layers, const std::string& prefix) {
  NameMap m;
  m[prefix + "embed_tokens.weight"] = "tok_embed.weight";
  m[prefix + "embed_positions.weight"] = "pos_embed.weight";
  m[prefix + "final_layer_norm.weight"] = "final_norm.weight";
  m[prefix + "final_layer_norm.bias"] = "final_norm.bias";
  m["lm_head.weight"] = "lm_head.weight";
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::string src = prefix + "layers." + std::to_string(l) + ".";
    const std::string dst = "layers." + std::to_string(l) + ".";
    for (const char* wb : {"weight", "bias"}) {
      const std::string s = wb;
      for (const char* proj : {"q_proj", "k_proj", "v_proj", "out_proj"}) {
        m[src + "self_attn." + proj + "." + s] = dst + "attn." + proj + "." + s;
      }
      m[src + "self_attn_layer_norm." + s] = dst + "attn_norm." + s;
      m[src + "final_layer_norm." + s] = dst + "ffn_norm." + s;
      m[src + "fc1." + s] = dst + "ffn.fc1." + s;
      m[src + "fc2." + s] = dst + "ffn.fc2." + s;
    }
  }
  return m;
}

NamedStream::NamedStream(std::uint64_t seed, std::string_view name) : state_(seed ^ fnv1a64(name)) {}

std::uint64_t NamedStream::next_u64() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double NamedStream::next_uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

double NamedStream::next_normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - next_uniform();
  const double u2 = next_uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Checkpoint init_synthetic(const ModelConfig& config, std::uint64_t seed, double scale) {
  if (!(scale >= 0)) throw Error(Errc::domain, "synthetic init scale must be >= 0");
  config.validate();
  Checkpoint c;
  c.config = config;
  c.metadata["generator"] = "splitmix64-boxmuller";
  c.metadata["seed"] = std::to_string(seed);
  c.metadata["eos_token_id"] = "0";

  for (const auto& [name, shape] : required_parameters(config)) {
    NamedStream rng(seed, name);
    Tensor<float> t(shape);
    const bool is_bias = name.ends_with(".bias");
    const bool is_norm = name.find("norm") != std::string::npos;
    const bool in_branch = name.find(".attn.") != std::string::npos || name.find(".ffn.") != std::string::npos;
    const double fan_in = shape.size() == 2 ? double(shape[1]) : 1.0;
    for (auto& v : t.data) {
      const double n = rng.next_normal();
      double value;
      if (is_norm) {
        value = is_bias ? 0.05 * n : 1.0 + 0.05 * n;
      } else if (in_branch) {
        value = scale * (is_bias ? 0.1 * n : n / std::sqrt(fan_in));
      } else if (name == "lm_head.weight") {
        value = n / std::sqrt(fan_in);
      } else {
        value = n;  // token / position embeddings
      }
      v = float(value);
    }
    c.tensors.emplace(name, std::move(t));
  }
  return c;
}

}  // namespace radnet
