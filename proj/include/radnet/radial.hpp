#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "radnet/checkpoint.hpp"
#include "radnet/model.hpp"
#include "radnet/positional.hpp"

namespace radnet {

/// Small MLP mapping an inter-layer embedding to n_layers + 1 logits; the last
/// class (index n_layers) means "go to the output layer".
template <typename Scalar>
struct RouterMLP {
  Matrix<Scalar> w1;  // [d_hidden x d_model]
  Vector<Scalar> b1;  // [d_hidden]
  Matrix<Scalar> w2;  // [(n_layers + 1) x d_hidden]
  Vector<Scalar> b2;  // [n_layers + 1]
  Activation act = Activation::relu;

  std::size_t d_model() const { return std::size_t(w1.cols()); }
  std::size_t d_hidden() const { return std::size_t(w1.rows()); }
  std::size_t n_classes() const { return std::size_t(w2.rows()); }
  std::size_t n_layers() const { return n_classes() - 1; }
  std::size_t output_class() const { return n_layers(); }

  void validate() const {
    if (w1.rows() == 0 || w1.cols() == 0 || w2.rows() < 1 || b1.size() != w1.rows() || w2.cols() != w1.rows() ||
        b2.size() != w2.rows()) {
      throw Error(Errc::config, "router parameter shapes are inconsistent");
    }
  }

  template <typename Derived>
  Vector<Scalar> logits(const Eigen::MatrixBase<Derived>& e) const {
    if (std::size_t(e.size()) != d_model()) {
      throw Error(Errc::dimension, "router expects embeddings of width " + std::to_string(d_model()) + ", got " +
                                       std::to_string(e.size()));
    }
    const Vector<Scalar> h = activation(Vector<Scalar>(w1 * e + b1), act);
    return w2 * h + b2;
  }

  template <typename Other>
  RouterMLP<Other> cast() const {
    return {w1.template cast<Other>(), b1.template cast<Other>(), w2.template cast<Other>(),
            b2.template cast<Other>(), act};
  }

  /// Training init: random first layer, zero output layer, so logits start uniform.
  static RouterMLP init(std::size_t d_model, std::size_t d_hidden, std::size_t n_layers, Activation act,
                        std::uint64_t seed) {
    RouterMLP r;
    r.act = act;
    r.w1 = random_matrix(d_hidden, d_model, seed, "router.fc1.weight", 1.0 / std::sqrt(double(d_model)));
    r.b1 = Vector<Scalar>::Zero(Eigen::Index(d_hidden));
    r.w2 = Matrix<Scalar>::Zero(Eigen::Index(n_layers + 1), Eigen::Index(d_hidden));
    r.b2 = Vector<Scalar>::Zero(Eigen::Index(n_layers + 1));
    return r;
  }

  /// Every parameter random; `bias_scale` widens the output biases.
  static RouterMLP random(std::size_t d_model, std::size_t d_hidden, std::size_t n_layers, Activation act,
                          std::uint64_t seed, double bias_scale = 0.1) {
    RouterMLP r;
    r.act = act;
    r.w1 = random_matrix(d_hidden, d_model, seed, "router.fc1.weight", 1.0 / std::sqrt(double(d_model)));
    r.b1 = random_matrix(d_hidden, 1, seed, "router.fc1.bias", 0.1);
    r.w2 = random_matrix(n_layers + 1, d_hidden, seed, "router.fc2.weight", 1.0 / std::sqrt(double(d_hidden)));
    r.b2 = random_matrix(n_layers + 1, 1, seed, "router.fc2.bias", bias_scale);
    return r;
  }

  bool operator==(const RouterMLP& o) const {
    return act == o.act && w1 == o.w1 && b1 == o.b1 && w2 == o.w2 && b2 == o.b2;
  }

 private:
  static Matrix<Scalar> random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, const char* name,
                                      double stddev) {
    NamedStream rng(seed, name);
    Matrix<Scalar> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = Scalar(stddev * rng.next_normal());
    return m;
  }
};

template <typename Scalar>
struct RouteChoice {
  std::size_t choice = 0;
  Vector<Scalar> probabilities;
};

/// z = router(e); p = softmax(z); choice = argmax(p), lowest index on ties.
template <typename Scalar, typename Derived>
RouteChoice<Scalar> route_step(const RouterMLP<Scalar>& router, const Eigen::MatrixBase<Derived>& e) {
  RouteChoice<Scalar> out;
  out.probabilities = softmax(router.logits(e));
  out.choice = std::size_t(argmax(out.probabilities));
  return out;
}

/// Anything that picks the next layer from the current embedding and step.
template <typename P, typename Scalar>
concept RoutingPolicy = requires(const P& p, const Vector<Scalar>& e, std::size_t step) {
  { p.route(e, step) } -> std::same_as<RouteChoice<Scalar>>;
  { p.n_layers() } -> std::convertible_to<std::size_t>;
};

template <typename Scalar>
struct MlpPolicy {
  const RouterMLP<Scalar>& router;
  RouteChoice<Scalar> route(const Vector<Scalar>& e, std::size_t) const { return route_step(router, e); }
  std::size_t n_layers() const { return router.n_layers(); }
};

/// Plays back a fixed layer sequence, then picks the output class.
template <typename Scalar>
struct ScriptedPolicy {
  std::vector<std::size_t> sequence;
  std::size_t layers = 0;

  static ScriptedPolicy sequential(std::size_t n_layers) {
    ScriptedPolicy p;
    p.layers = n_layers;
    for (std::size_t l = 0; l < n_layers; ++l) p.sequence.push_back(l);
    return p;
  }

  RouteChoice<Scalar> route(const Vector<Scalar>&, std::size_t step) const {
    RouteChoice<Scalar> out;
    out.choice = step < sequence.size() ? sequence[step] : layers;
    out.probabilities = Vector<Scalar>::Zero(Eigen::Index(layers + 1));
    out.probabilities(Eigen::Index(out.choice)) = Scalar(1);
    return out;
  }
  std::size_t n_layers() const { return layers; }
};

enum class CacheScope { global, layer_scoped };
enum class PositionalMode { sinusoidal, none };

inline CacheScope parse_cache_scope(std::string_view s) {
  if (s == "global") return CacheScope::global;
  if (s == "layer_scoped") return CacheScope::layer_scoped;
  throw Error(Errc::config, "unknown cache scope '" + std::string(s) + "' (expected global|layer_scoped)");
}

inline PositionalMode parse_positional_mode(std::string_view s) {
  if (s == "sinusoidal") return PositionalMode::sinusoidal;
  if (s == "none") return PositionalMode::none;
  throw Error(Errc::config, "unknown positional mode '" + std::string(s) + "' (expected sinusoidal|none)");
}

struct RadialConfig {
  std::size_t max_layers = 8;
  CacheScope cache_scope = CacheScope::global;
  PositionalMode positional = PositionalMode::sinusoidal;

  void validate() const {
    if (max_layers < 1) throw Error(Errc::config, "max_layers must be >= 1");
  }
};

/// Global append-only key/value store shared by all layers and iterations.
template <typename Scalar>
class UnifiedCache {
 public:
  struct Entry {
    Vector<Scalar> key;
    Vector<Scalar> value;
    std::size_t position;
    std::size_t layer;
    std::size_t token;
  };

  /// Next value of the per-sequence position counter.
  std::size_t next_position() const { return next_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }

  void append(Entry e) {
    if (e.position < next_) {
      throw Error(Errc::cache_consistency, "unified cache positions must strictly increase (got " +
                                               std::to_string(e.position) + ", next is " + std::to_string(next_) + ")");
    }
    next_ = e.position + 1;
    entries_.push_back(std::move(e));
  }

 private:
  std::vector<Entry> entries_;
  std::size_t next_ = 0;
};

struct AttendOptions {
  std::size_t n_heads = 1;
  PositionalMode positional = PositionalMode::none;
  std::size_t query_position = 0;
};

/// Scaled dot-product attention of a (pre-scaled) query over the visible
/// cache entries: all of them under global scope, only `current_layer`'s under
/// layer_scoped. With sinusoidal mode, PE(position) is added to the query and
/// to every key before scoring.
template <typename Scalar>
Vector<Scalar> unified_attend(const Vector<Scalar>& query, const UnifiedCache<Scalar>& cache, CacheScope scope,
                              std::size_t current_layer, const AttendOptions& opts = {}) {
  const auto& all = cache.entries();
  std::vector<const typename UnifiedCache<Scalar>::Entry*> visible;
  visible.reserve(all.size());
  for (const auto& e : all) {
    if (scope == CacheScope::global || e.layer == current_layer) visible.push_back(&e);
  }
  if (visible.empty()) {
    throw Error(Errc::attention_domain, "no cache entries visible to layer " + std::to_string(current_layer));
  }
  const auto width = std::size_t(query.size());
  if (opts.n_heads == 0 || width % opts.n_heads != 0) {
    throw Error(Errc::config, "query width is not divisible by the head count");
  }
  if (opts.positional == PositionalMode::none) {
    return multi_head_attend<Scalar>(
        query, visible.size(), [&](std::size_t j) -> const Vector<Scalar>& { return visible[j]->key; },
        [&](std::size_t j) -> const Vector<Scalar>& { return visible[j]->value; }, opts.n_heads);
  }
  const Scalar scaling = Scalar(1) / std::sqrt(Scalar(width / opts.n_heads));
  const Vector<Scalar> q = query + scaling * positional_embedding<Scalar>(opts.query_position, width);
  std::vector<Vector<Scalar>> keys;
  keys.reserve(visible.size());
  for (const auto* e : visible) keys.push_back(e->key + positional_embedding<Scalar>(e->position, width));
  return multi_head_attend<Scalar>(
      q, visible.size(), [&](std::size_t j) -> const Vector<Scalar>& { return keys[j]; },
      [&](std::size_t j) -> const Vector<Scalar>& { return visible[j]->value; }, opts.n_heads);
}

enum class ExitReason { output_class, forced };

inline std::string_view exit_reason_name(ExitReason r) {
  return r == ExitReason::output_class ? "output_class" : "forced";
}

template <typename Scalar>
struct RadialResult {
  Vector<Scalar> embedding;
  std::vector<std::size_t> path;
  ExitReason exit = ExitReason::output_class;
};

/// Routes one token embedding through full layers (ATT then FFN) chosen by
/// the policy until it picks the output class or `max_layers` layers ran.
/// Each executed ATT appends one entry tagged (position, layer, token).
template <typename Scalar, typename Policy>
  requires RoutingPolicy<Policy, Scalar>
RadialResult<Scalar> radial_forward(const Model<Scalar>& model, const Policy& policy, const Vector<Scalar>& e0,
                                    const RadialConfig& cfg, UnifiedCache<Scalar>& cache, std::size_t token_index) {
  cfg.validate();
  const std::size_t n_layers = model.n_layers();
  if (policy.n_layers() != n_layers) {
    throw Error(Errc::config, "router has " + std::to_string(policy.n_layers() + 1) + " outputs, model needs " +
                                  std::to_string(n_layers + 1));
  }
  RadialResult<Scalar> out;
  out.embedding = e0;
  auto& e = out.embedding;
  while (true) {
    if (out.path.size() >= cfg.max_layers) {
      out.exit = ExitReason::forced;
      break;
    }
    const std::size_t layer = policy.route(e, out.path.size()).choice;
    if (layer >= n_layers) {
      out.exit = ExitReason::output_class;
      break;
    }
    auto proj = model.project_qkv(e, layer);
    const std::size_t pos = cache.next_position();
    cache.append({std::move(proj.key), std::move(proj.value), pos, layer, token_index});
    const Vector<Scalar> attended = unified_attend(
        proj.query, cache, cfg.cache_scope, layer, AttendOptions{model.config().n_heads, cfg.positional, pos});
    e = model.combine(e, model.attention_output(attended, layer), {layer, BlockKind::att}, Decision::keep);
    e = model.combine(e, model.ffn_block(e, layer), {layer, BlockKind::ffn}, Decision::keep);
    out.path.push_back(layer);
  }
  if (!all_finite(e)) throw Error(Errc::numeric, "non-finite radial embedding for token " + std::to_string(token_index));
  return out;
}

struct TokenPath {
  std::size_t token_index = 0;
  std::vector<std::size_t> path;
  ExitReason exit = ExitReason::output_class;
};

template <typename Scalar>
struct RadialSequence {
  Matrix<Scalar> hidden;
  Matrix<Scalar> logits;
  std::vector<TokenPath> paths;
  UnifiedCache<Scalar> cache;
};

/// Teacher-forced radial pass over a token sequence sharing one unified cache.
template <typename Scalar, typename Policy>
  requires RoutingPolicy<Policy, Scalar>
RadialSequence<Scalar> radial_sequence(const Model<Scalar>& model, const Policy& policy,
                                       std::span<const TokenId> tokens, const RadialConfig& cfg,
                                       std::size_t token_offset = 0, bool compute_logits = true) {
  model.check_sequence(tokens);
  RadialSequence<Scalar> out;
  const auto T = Eigen::Index(tokens.size());
  out.hidden.resize(T, Eigen::Index(model.config().d_model));
  if (compute_logits) out.logits.resize(T, Eigen::Index(model.config().vocab_size));
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto r = radial_forward(model, policy, model.embed(tokens[t], t), cfg, out.cache, t);
    out.hidden.row(Eigen::Index(t)) = r.embedding.transpose();
    if (compute_logits) out.logits.row(Eigen::Index(t)) = model.head(r.embedding).transpose();
    out.paths.push_back({token_offset + t, std::move(r.path), r.exit});
  }
  return out;
}

/// JSON array with one {token_index, path, exit} object per token.
nlohmann::json paths_json(std::span<const TokenPath> paths);

TensorArchive router_archive(const RouterMLP<float>& router);
RouterMLP<float> router_from_archive(const TensorArchive& archive);
void save_router(const RouterMLP<float>& router, const std::filesystem::path& path);
RouterMLP<float> load_router(const std::filesystem::path& path);

}  // namespace radnet
