#pragma once

#include <cmath>
#include <cstddef>
#include <iosfwd>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "radnet/model.hpp"
#include "radnet/profiler.hpp"

namespace radnet {

struct OracleConfig {
  double threshold = 0.05;
  /// Skipped ATT blocks still append their K/V (the oracle ran the branch).
  bool cache_skipped_kv = true;

  void validate() const {
    if (!(threshold >= 0)) throw Error(Errc::config, "oracle threshold must be >= 0");
  }
};

/// Sentinel threshold that skips every non-degenerate block.
inline constexpr double kSkipAll = std::numeric_limits<double>::infinity();

/// Skip iff ratio < threshold (strict), so threshold 0 never skips.
inline Decision oracle_decision(double ratio, double threshold) {
  return ratio < threshold ? Decision::skip : Decision::keep;
}

struct TraceEntry {
  BlockId block;
  Decision decision = Decision::keep;
  double ratio = 0.0;  // +inf when the node was degenerate (always kept)
  bool degenerate = false;

  bool operator==(const TraceEntry&) const = default;
};

struct TokenTrace {
  std::size_t token_index = 0;
  std::vector<TraceEntry> entries;  // 2 * n_layers, linear block order
};

struct RoutingTrace {
  std::size_t n_layers = 0;
  double threshold = 0.0;
  std::string run_digest;
  std::vector<TokenTrace> tokens;
};

/// Raw inter-layer embeddings of one oracle run: for each token, the residual
/// stream entering layers 0..n_layers-1 followed by the final hidden state.
struct EmbeddingRecord {
  std::string run_digest;
  std::vector<std::size_t> token_indices;
  std::vector<std::vector<Vector<double>>> layer_inputs;
};

template <typename Scalar>
struct OracleRun {
  ForwardResult<Scalar> forward;
  RoutingTrace trace;
  EmbeddingRecord embeddings;
};

std::string oracle_run_digest(const ModelConfig& config, std::span<const TokenId> tokens, std::size_t token_offset,
                              const OracleConfig& cfg);

/// Runs every branch, computes its ratio and skips the addition when the ratio
/// falls below the threshold. Each ratio is taken at the actual (possibly
/// already modified) x at that node.
template <typename Scalar>
OracleRun<Scalar> oracle_forward(const Model<Scalar>& model, std::span<const TokenId> tokens, const OracleConfig& cfg,
                                 std::size_t token_offset = 0, bool record_embeddings = false,
                                 bool compute_logits = true) {
  cfg.validate();
  const auto n_layers = model.n_layers();
  OracleRun<Scalar> run;
  run.trace.n_layers = n_layers;
  run.trace.threshold = cfg.threshold;
  run.trace.run_digest = oracle_run_digest(model.config(), tokens, token_offset, cfg);
  run.trace.tokens.resize(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    run.trace.tokens[t].token_index = token_offset + t;
    run.trace.tokens[t].entries.reserve(2 * n_layers);
  }
  if (record_embeddings) {
    run.embeddings.run_digest = run.trace.run_digest;
    for (std::size_t t = 0; t < tokens.size(); ++t) run.embeddings.token_indices.push_back(token_offset + t);
    run.embeddings.layer_inputs.assign(tokens.size(), std::vector<Vector<double>>(n_layers + 1));
  }

  BlockHook<Scalar> hook = [&](const BlockEvent<Scalar>& e) {
    TraceEntry entry{e.block, Decision::keep, 0.0, false};
    try {
      entry.ratio = residual_ratio(e.r, e.x);
      entry.decision = oracle_decision(entry.ratio, cfg.threshold);
    } catch (const Error& err) {
      if (err.code() != Errc::degenerate_input) throw;
      entry.ratio = std::numeric_limits<double>::infinity();
      entry.degenerate = true;
    }
    run.trace.tokens[e.token_index].entries.push_back(entry);
    if (record_embeddings && e.block.kind == BlockKind::att) {
      run.embeddings.layer_inputs[e.token_index][e.block.layer] = e.x.template cast<double>();
    }
    return entry.decision;
  };

  ForwardOptions opts;
  opts.keep_skipped_kv = cfg.cache_skipped_kv;
  opts.compute_logits = compute_logits;
  run.forward = model.forward(tokens, hook, opts);
  if (record_embeddings) {
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      run.embeddings.layer_inputs[t][n_layers] = run.forward.hidden.row(Eigen::Index(t)).transpose().template cast<double>();
    }
  }
  return run;
}

/// Number of kept blocks for a token.
std::size_t dynamic_depth(const RoutingTrace& trace, std::size_t token_index);

using TraceMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Rows in token order, columns in linear block order; true = keep.
TraceMatrix trace_matrix(const RoutingTrace& trace);

/// (token_index, linear block index) pairs that were skipped.
std::set<std::pair<std::size_t, std::size_t>> skip_set(const RoutingTrace& trace);

struct DepthStats {
  std::size_t n_blocks = 0;
  double mean = 0.0;
  std::size_t min = 0;
  std::size_t max = 0;
  std::vector<std::size_t> depth_histogram;  // index = depth, 0..n_blocks
  std::vector<double> skip_fraction_by_block;
};

DepthStats depth_stats(const RoutingTrace& trace);
nlohmann::json to_json(const DepthStats& stats);

/// CSV `token_index,layer,kind,ratio,decision`.
void write_trace_csv(std::ostream& out, const RoutingTrace& trace);
nlohmann::json trace_matrix_json(const RoutingTrace& trace);

}  // namespace radnet
