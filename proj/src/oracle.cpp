#include "radnet/oracle.hpp"

#include <algorithm>
#include <ostream>

namespace radnet {

std::string oracle_run_digest(const ModelConfig& config, std::span<const TokenId> tokens, std::size_t token_offset,
                              const OracleConfig& cfg) {
  nlohmann::json j{{"config", config_digest(config)},
                   {"tokens", std::vector<TokenId>(tokens.begin(), tokens.end())},
                   {"offset", token_offset},
                   {"threshold", format_real(cfg.threshold)},
                   {"cache_skipped_kv", cfg.cache_skipped_kv}};
  return hex64(fnv1a64(j.dump()));
}

std::size_t dynamic_depth(const RoutingTrace& trace, std::size_t token_index) {
  auto it = std::find_if(trace.tokens.begin(), trace.tokens.end(),
                         [&](const TokenTrace& t) { return t.token_index == token_index; });
  if (it == trace.tokens.end()) {
    throw Error(Errc::lookup, "token " + std::to_string(token_index) + " is not in the trace");
  }
  return std::size_t(std::count_if(it->entries.begin(), it->entries.end(),
                                   [](const TraceEntry& e) { return e.decision == Decision::keep; }));
}

TraceMatrix trace_matrix(const RoutingTrace& trace) {
  const auto cols = Eigen::Index(2 * trace.n_layers);
  TraceMatrix m = TraceMatrix::Constant(Eigen::Index(trace.tokens.size()), cols, false);
  for (std::size_t t = 0; t < trace.tokens.size(); ++t) {
    for (const auto& e : trace.tokens[t].entries) {
      m(Eigen::Index(t), Eigen::Index(e.block.index())) = e.decision == Decision::keep;
    }
  }
  return m;
}

std::set<std::pair<std::size_t, std::size_t>> skip_set(const RoutingTrace& trace) {
  std::set<std::pair<std::size_t, std::size_t>> s;
  for (const auto& t : trace.tokens) {
    for (const auto& e : t.entries) {
      if (e.decision == Decision::skip) s.emplace(t.token_index, e.block.index());
    }
  }
  return s;
}

DepthStats depth_stats(const RoutingTrace& trace) {
  DepthStats s;
  s.n_blocks = 2 * trace.n_layers;
  s.depth_histogram.assign(s.n_blocks + 1, 0);
  s.skip_fraction_by_block.assign(s.n_blocks, 0.0);
  if (trace.tokens.empty()) return s;
  s.min = s.n_blocks;
  double total = 0.0;
  for (const auto& t : trace.tokens) {
    std::size_t depth = 0;
    for (const auto& e : t.entries) {
      if (e.decision == Decision::keep) {
        ++depth;
      } else {
        s.skip_fraction_by_block[e.block.index()] += 1.0;
      }
    }
    s.depth_histogram[depth]++;
    s.min = std::min(s.min, depth);
    s.max = std::max(s.max, depth);
    total += double(depth);
  }
  const double n = double(trace.tokens.size());
  s.mean = total / n;
  for (auto& f : s.skip_fraction_by_block) f /= n;
  return s;
}

nlohmann::json to_json(const DepthStats& s) {
  return {{"n_blocks", s.n_blocks},
          {"mean_depth", s.mean},
          {"min_depth", s.min},
          {"max_depth", s.max},
          {"depth_histogram", s.depth_histogram},
          {"skip_fraction_by_block", s.skip_fraction_by_block}};
}

void write_trace_csv(std::ostream& out, const RoutingTrace& trace) {
  out << "token_index,layer,kind,ratio,decision\n";
  for (const auto& t : trace.tokens) {
    for (const auto& e : t.entries) {
      out << t.token_index << ',' << e.block.layer << ',' << block_kind_name(e.block.kind) << ','
          << format_real(e.ratio) << ',' << (e.decision == Decision::keep ? "keep" : "skip") << '\n';
    }
  }
}

nlohmann::json trace_matrix_json(const RoutingTrace& trace) {
  nlohmann::json columns = nlohmann::json::array();
  for (std::size_t b = 0; b < 2 * trace.n_layers; ++b) {
    const auto id = BlockId::from_index(b);
    columns.push_back("L" + std::to_string(id.layer) + "." + std::string(block_kind_name(id.kind)));
  }
  const auto m = trace_matrix(trace);
  nlohmann::json rows = nlohmann::json::array();
  nlohmann::json token_indices = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<int> row(std::size_t(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[std::size_t(c)] = m(r, c) ? 1 : 0;
    rows.push_back(row);
    token_indices.push_back(trace.tokens[std::size_t(r)].token_index);
  }
  return {{"n_layers", trace.n_layers},
          {"threshold", std::isinf(trace.threshold) ? nlohmann::json("inf") : nlohmann::json(trace.threshold)},
          {"columns", columns},
          {"token_indices", token_indices},
          {"keep", rows}};
}

}  // namespace radnet
