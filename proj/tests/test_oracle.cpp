#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "radnet/oracle.hpp"
#include "support/oracles.hpp"

using namespace radnet;

TEST(OracleDecision, StrictThreshold) {
  EXPECT_EQ(oracle_decision(0.04, 0.05), Decision::skip);
  EXPECT_EQ(oracle_decision(0.05, 0.05), Decision::keep);
  for (double r : {0.0, 1e-300, 0.3, 5.0}) EXPECT_EQ(oracle_decision(r, 0.0), Decision::keep);
  EXPECT_EQ(oracle_decision(1e9, kSkipAll), Decision::skip);
}

TEST(OracleConfig, NegativeThresholdRejected) {
  OracleConfig cfg;
  cfg.threshold = -0.1;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(OracleForward, ZeroThresholdEqualsSequential) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto c = ref::random_config(seed);
    Model<float> model(init_synthetic(c, seed, 0.5));
    const auto tokens = ref::random_tokens(16, c.vocab_size, seed);
    const auto run = oracle_forward(model, tokens, OracleConfig{0.0});
    const auto expected = model.reference_forward(tokens);
    EXPECT_LE(ref::max_rel_diff(run.forward.logits, expected.logits), 1e-6);
    for (const auto& tok : run.trace.tokens) {
      EXPECT_EQ(tok.entries.size(), 2 * c.n_layers);
      for (const auto& e : tok.entries) EXPECT_EQ(e.decision, Decision::keep);
    }
  }
}

TEST(OracleForward, SkipAllEqualsEmptyStack) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = ref::random_config(seed + 10);
    c.pre_norm = true;  // post-norm renormalizes even after a skipped addition
    const auto ck = init_synthetic(c, seed, 0.5);
    auto bare_cfg = c;
    bare_cfg.n_layers = 0;
    Checkpoint bare = init_synthetic(bare_cfg, 999, 1.0);
    for (auto& [name, t] : bare.tensors) t = ck.tensors.at(name);
    const auto tokens = ref::random_tokens(10, c.vocab_size, seed);
    const auto run = oracle_forward(Model<double>(ck), tokens, OracleConfig{kSkipAll});
    const auto expected = Model<double>(bare).forward(tokens, nullptr);
    EXPECT_LE(ref::max_rel_diff(run.forward.logits, expected.logits), 1e-12);
    for (std::size_t t = 0; t < tokens.size(); ++t) EXPECT_EQ(dynamic_depth(run.trace, t), 0u);
  }
}

TEST(OracleForward, ZeroScaleSkipsEverythingWithoutChangingOutput) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = ref::random_config(seed + 20);
    c.pre_norm = true;
    Model<float> model(init_synthetic(c, seed, 0.0));
    const auto tokens = ref::random_tokens(10, c.vocab_size, seed);
    const auto run = oracle_forward(model, tokens, OracleConfig{0.05});
    EXPECT_EQ(run.forward.logits, model.reference_forward(tokens).logits);
    for (const auto& tok : run.trace.tokens) {
      for (const auto& e : tok.entries) {
        EXPECT_EQ(e.ratio, 0.0);
        EXPECT_EQ(e.decision, Decision::skip);
      }
    }
  }
}

TEST(OracleForward, SkipSetsAreMonotoneInThreshold) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto c = ref::random_config(seed + 30);
    Model<float> model(init_synthetic(c, seed, 0.3));
    const auto tokens = ref::random_tokens(16, c.vocab_size, seed);
    std::set<std::pair<std::size_t, std::size_t>> prev;
    for (double tau : {0.0, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, kSkipAll}) {
      const auto s = skip_set(oracle_forward(model, tokens, OracleConfig{tau}).trace);
      EXPECT_TRUE(std::includes(s.begin(), s.end(), prev.begin(), prev.end())) << "seed " << seed << " tau " << tau;
      prev = s;
    }
  }
}

TEST(OracleForward, DecisionMatchesRatioAndDepthMatchesMatrix) {
  const auto c = ref::random_config(5);
  Model<float> model(init_synthetic(c, 5, 0.3));
  const auto tokens = ref::random_tokens(20, c.vocab_size, 5);
  const auto run = oracle_forward(model, tokens, OracleConfig{0.1});
  const auto m = trace_matrix(run.trace);
  ASSERT_EQ(std::size_t(m.rows()), tokens.size());
  ASSERT_EQ(std::size_t(m.cols()), c.n_blocks());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto& tok = run.trace.tokens[t];
    std::size_t kept = 0;
    for (std::size_t b = 0; b < tok.entries.size(); ++b) {
      const auto& e = tok.entries[b];
      EXPECT_EQ(e.block, BlockId::from_index(b));
      EXPECT_EQ(e.decision == Decision::skip, e.ratio < 0.1);
      kept += e.decision == Decision::keep;
    }
    EXPECT_EQ(dynamic_depth(run.trace, t), kept);
    EXPECT_EQ(std::size_t(m.row(Eigen::Index(t)).count()), kept);
  }
  EXPECT_THROW(
      {
        try {
          dynamic_depth(run.trace, 999);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), Errc::lookup);
          throw;
        }
      },
      Error);
}

TEST(OracleForward, AllKeepTraceIsAllTrueAndFullDepth) {
  auto c = ref::random_config(6);
  Model<float> model(init_synthetic(c, 6, 0.5));
  const auto tokens = ref::random_tokens(4, c.vocab_size, 6);
  const auto run = oracle_forward(model, tokens, OracleConfig{0.0});
  EXPECT_TRUE(trace_matrix(run.trace).all());
  for (std::size_t t = 0; t < tokens.size(); ++t) EXPECT_EQ(dynamic_depth(run.trace, t), c.n_blocks());
  const auto stats = depth_stats(run.trace);
  EXPECT_EQ(stats.mean, double(c.n_blocks()));
  EXPECT_EQ(stats.depth_histogram.back(), tokens.size());
}

TEST(OracleForward, SkippedKvFlagChangesOnlyLaterTokens) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto c = ref::random_config(seed + 50);
    Model<double> model(init_synthetic(c, seed, 0.3));
    const auto tokens = ref::random_tokens(12, c.vocab_size, seed);
    OracleConfig keep{0.3, true}, drop{0.3, false};
    const auto a = oracle_forward(model, tokens, keep);
    const auto b = oracle_forward(model, tokens, drop);
    // Token 0 sees only itself in either case.
    EXPECT_EQ(a.forward.logits.row(0), b.forward.logits.row(0));
    bool any_att_skip = false;
    for (const auto& tok : a.trace.tokens) {
      for (const auto& e : tok.entries) any_att_skip |= e.block.kind == BlockKind::att && e.decision == Decision::skip;
    }
    if (!any_att_skip) EXPECT_EQ(a.forward.logits, b.forward.logits);
  }
}

TEST(OracleForward, EmbeddingsRecordLayerInputs) {
  const auto c = ref::random_config(7);
  Model<double> model(init_synthetic(c, 7, 0.5));
  const auto tokens = ref::random_tokens(5, c.vocab_size, 7);
  const auto run = oracle_forward(model, tokens, OracleConfig{0.0}, 0, true);
  ASSERT_EQ(run.embeddings.layer_inputs.size(), tokens.size());
  EXPECT_EQ(run.embeddings.run_digest, run.trace.run_digest);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    EXPECT_EQ(run.embeddings.layer_inputs[t].size(), c.n_layers + 1);
    EXPECT_EQ(run.embeddings.layer_inputs[t][0], model.embed(tokens[t], t));
    EXPECT_EQ(run.embeddings.layer_inputs[t][c.n_layers], run.forward.hidden.row(Eigen::Index(t)).transpose());
  }
}

TEST(TraceExport, CsvHeaderAndRows) {
  const auto c = ref::random_config(9);
  Model<float> model(init_synthetic(c, 9, 0.5));
  const auto tokens = ref::random_tokens(3, c.vocab_size, 9);
  const auto run = oracle_forward(model, tokens, OracleConfig{0.05});
  std::stringstream ss;
  write_trace_csv(ss, run.trace);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "token_index,layer,kind,ratio,decision");
  std::size_t rows = 0;
  while (std::getline(ss, line)) ++rows;
  EXPECT_EQ(rows, tokens.size() * c.n_blocks());
  const auto j = trace_matrix_json(run.trace);
  EXPECT_TRUE(j.is_object());
}
