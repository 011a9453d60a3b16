#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <variant>
#include <vector>

#include "radnet/oracle.hpp"
#include "radnet/profiler.hpp"
#include "radnet/radial.hpp"

namespace radnet {

struct SequentialMode {};

struct OracleMode {
  OracleConfig config;
};

template <typename Scalar>
struct RadialMode {
  const RouterMLP<Scalar>* router = nullptr;
  RadialConfig config;
};

template <typename Scalar>
using GenerateMode = std::variant<SequentialMode, OracleMode, RadialMode<Scalar>>;

/// Records of the forward pass whose logits produced `token`.
struct GenerationStep {
  TokenId token = 0;
  std::size_t position = 0;             // position that was decoded to produce `token`
  std::vector<ResidualRecord> records;  // sequential mode
  std::vector<TraceEntry> trace;        // oracle mode
  TokenPath path;                       // radial mode
};

struct Generation {
  std::vector<TokenId> tokens;  // generated tokens only
  std::vector<GenerationStep> steps;
};

/// Greedy decoding. The prompt plus the generated tokens must fit in max_seq_len.
template <typename Scalar>
Generation generate(const Model<Scalar>& model, std::span<const TokenId> prompt, std::size_t steps,
                    const GenerateMode<Scalar>& mode) {
  if (prompt.empty()) throw Error(Errc::input, "generation needs a non-empty prompt");
  if (steps == 0) throw Error(Errc::input, "generation needs steps >= 1");
  if (prompt.size() + steps > model.config().max_seq_len) {
    throw Error(Errc::sequence_length, "prompt (" + std::to_string(prompt.size()) + ") + steps (" +
                                           std::to_string(steps) + ") exceeds max_seq_len " +
                                           std::to_string(model.config().max_seq_len));
  }
  for (auto t : prompt) model.check_token(t);

  Generation out;
  LayerKVCache<Scalar> layer_cache(model.n_layers());
  UnifiedCache<Scalar> unified;
  GenerationStep current;

  BlockHook<Scalar> hook;
  ForwardOptions opts;
  if (std::holds_alternative<SequentialMode>(mode)) {
    hook = [&current](const BlockEvent<Scalar>& e) {
      try {
        current.records.push_back({e.token_index, e.block, residual_ratio(e.r, e.x)});
      } catch (const Error& err) {
        if (err.code() != Errc::degenerate_input) throw;
      }
      return Decision::keep;
    };
  } else if (const auto* om = std::get_if<OracleMode>(&mode)) {
    om->config.validate();
    opts.keep_skipped_kv = om->config.cache_skipped_kv;
    const double threshold = om->config.threshold;
    hook = [&current, threshold](const BlockEvent<Scalar>& e) {
      TraceEntry entry{e.block, Decision::keep, std::numeric_limits<double>::infinity(), true};
      try {
        entry.ratio = residual_ratio(e.r, e.x);
        entry.degenerate = false;
        entry.decision = oracle_decision(entry.ratio, threshold);
      } catch (const Error& err) {
        if (err.code() != Errc::degenerate_input) throw;
      }
      current.trace.push_back(entry);
      return entry.decision;
    };
  } else {
    const auto& rm = std::get<RadialMode<Scalar>>(mode);
    if (!rm.router) throw Error(Errc::config, "radial generation needs a router");
    rm.config.validate();
  }

  auto run_position = [&](TokenId token, std::size_t pos) -> Vector<Scalar> {
    current = GenerationStep{};
    current.position = pos;
    if (const auto* rm = std::get_if<RadialMode<Scalar>>(&mode)) {
      auto r = radial_forward(model, MlpPolicy<Scalar>{*rm->router}, model.embed(token, pos), rm->config, unified, pos);
      current.path = {pos, std::move(r.path), r.exit};
      return r.embedding;
    }
    return model.step(token, pos, layer_cache, hook, opts);
  };

  std::size_t pos = 0;
  Vector<Scalar> hidden;
  for (; pos < prompt.size(); ++pos) hidden = run_position(prompt[pos], pos);
  while (true) {
    const TokenId next = TokenId(argmax(model.head(hidden)));
    current.token = next;
    out.tokens.push_back(next);
    out.steps.push_back(std::move(current));
    if (out.tokens.size() == steps) break;
    hidden = run_position(next, pos);
    ++pos;
  }
  return out;
}

}  // namespace radnet
