#include <gtest/gtest.h>

#include <fstream>

#include "radnet/checkpoint.hpp"
#include "radnet/model.hpp"
#include "support/oracles.hpp"

using namespace radnet;
namespace fs = std::filesystem;

namespace {

template <typename Fn>
Errc error_code(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::usage;
}

ModelConfig two_layer() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 30;
  c.max_seq_len = 24;
  return c;
}

std::string f16_bytes(std::initializer_list<std::uint16_t> halves) {
  std::string s;
  for (auto h : halves) {
    s.push_back(char(h & 0xff));
    s.push_back(char(h >> 8));
  }
  return s;
}

}  // namespace

TEST(Archive, ModelRoundTripOverSeeds) {
  const auto dir = ref::scratch_dir("ckpt_roundtrip");
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ck = init_synthetic(ref::random_config(seed), seed, 0.7);
    save_model(ck, dir / "m.rnck");
    EXPECT_EQ(load_model(dir / "m.rnck"), ck) << "seed " << seed;
  }
}

TEST(Archive, IndexArraysRoundTrip) {
  TensorArchive a;
  a.header = {{"kind", "test"}};
  a.tensors["x"] = Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6});
  a.index_arrays["labels"] = {3, -1, 7};
  EXPECT_EQ(decode_archive(encode_archive(a)), a);
}

TEST(Archive, CorruptedMagicIsFormatError) {
  const auto ck = init_synthetic(two_layer(), 1, 1.0);
  TensorArchive a;
  a.tensors = ck.tensors;
  auto bytes = encode_archive(a);
  bytes[0] = 'X';
  EXPECT_EQ(error_code([&] { decode_archive(bytes); }), Errc::format);
  EXPECT_EQ(error_code([&] { decode_archive(std::vector<char>{'R', 'A'}); }), Errc::format);
}

TEST(Archive, ShortPayloadIsTruncation) {
  TensorArchive a;
  a.tensors["big"] = Tensor<float>({768, 768});
  auto bytes = encode_archive(a);
  bytes.resize(bytes.size() - 4);
  EXPECT_EQ(error_code([&] { decode_archive(bytes); }), Errc::truncation);
}

TEST(Archive, PayloadShapeDisagreementIsShapeMismatch) {
  TensorArchive a;
  a.tensors["t"] = Tensor<float>({2, 2}, {1, 2, 3, 4});
  auto bytes = encode_archive(a);
  // The last 8 + 16 bytes are the payload length and payload; declare 12 bytes instead of 16.
  const std::size_t len_at = bytes.size() - 16 - 8;
  const std::uint64_t wrong = 12;
  std::memcpy(bytes.data() + len_at, &wrong, 8);
  EXPECT_EQ(error_code([&] { decode_archive(bytes); }), Errc::shape_mismatch);
}

TEST(Archive, DistinctErrorKinds) {
  EXPECT_NE(Errc::format, Errc::truncation);
  EXPECT_NE(Errc::truncation, Errc::shape_mismatch);
  EXPECT_EQ(errc_name(Errc::truncation), std::string("truncation"));
}

TEST(Checkpoint, ValidationNamesGapsAndShapes) {
  auto ck = init_synthetic(two_layer(), 2, 1.0);
  ck.tensors.erase("layers.1.ffn.fc2.bias");
  try {
    validate_checkpoint(ck);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::mapping);
    EXPECT_NE(std::string(e.what()).find("layers.1.ffn.fc2.bias"), std::string::npos);
  }
  auto bad = init_synthetic(two_layer(), 2, 1.0);
  bad.tensors["layers.0.attn.q_proj.weight"] = Tensor<float>({16, 15});
  EXPECT_EQ(error_code([&] { validate_checkpoint(bad); }), Errc::shape_mismatch);
}

TEST(PublicFile, HandcraftedTwoByTwo) {
  const auto dir = ref::scratch_dir("public_min");
  ref::PublicFileBuilder b;
  b.add_f32("w", {2, 2}, {1.5f, -2.0f, 3.25f, 0.0f});
  b.header["__metadata__"] = {{"format", "pt"}};
  b.write(dir / "t.bin");
  const auto m = read_public_tensor_file(dir / "t.bin");
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m.at("w"), Tensor<float>({2, 2}, {1.5f, -2.0f, 3.25f, 0.0f}));
}

TEST(PublicFile, HalfPrecisionWidens) {
  const auto dir = ref::scratch_dir("public_half");
  ref::PublicFileBuilder b;
  b.add_raw("h", "F16", {3}, f16_bytes({0x3c00, 0xc000, 0x3555}));  // 1, -2, ~1/3
  b.add_raw("b", "BF16", {2}, f16_bytes({0x3f80, 0x4049}));          // 1, ~3.140625
  b.write(dir / "t.bin");
  const auto m = read_public_tensor_file(dir / "t.bin");
  EXPECT_EQ(m.at("h").data[0], 1.0f);
  EXPECT_EQ(m.at("h").data[1], -2.0f);
  EXPECT_NEAR(m.at("h").data[2], 1.0 / 3, 1e-3);
  EXPECT_EQ(m.at("b").data[0], 1.0f);
  EXPECT_EQ(m.at("b").data[1], 3.140625f);
}

TEST(PublicFile, HeaderLongerThanFileIsFormatError) {
  const auto dir = ref::scratch_dir("public_hdr");
  ref::PublicFileBuilder b;
  b.add_f32("w", {1}, {1.0f});
  b.write(dir / "t.bin", 1'000'000);
  EXPECT_EQ(error_code([&] { read_public_tensor_file(dir / "t.bin"); }), Errc::format);
}

TEST(PublicFile, OverlapAndOutOfBoundsAreFormatErrors) {
  const auto dir = ref::scratch_dir("public_offsets");
  ref::PublicFileBuilder overlap;
  overlap.add_f32("a", {2}, {1, 2});
  overlap.add_f32("b", {2}, {3, 4});
  overlap.header["b"]["data_offsets"] = {4, 12};
  overlap.write(dir / "overlap.bin");
  EXPECT_EQ(error_code([&] { read_public_tensor_file(dir / "overlap.bin"); }), Errc::format);

  ref::PublicFileBuilder oob;
  oob.add_f32("a", {2}, {1, 2});
  oob.header["a"]["data_offsets"] = {4, 12};
  oob.write(dir / "oob.bin");
  EXPECT_EQ(error_code([&] { read_public_tensor_file(dir / "oob.bin"); }), Errc::format);
}

TEST(PublicFile, UnsupportedDtypeListsTheName) {
  const auto dir = ref::scratch_dir("public_dtype");
  ref::PublicFileBuilder b;
  b.add_f32("fine", {1}, {1});
  b.add_raw("ids", "I64", {1}, std::string(8, '\0'));
  b.write(dir / "t.bin");
  try {
    read_public_tensor_file(dir / "t.bin");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::unsupported_dtype);
    EXPECT_NE(std::string(e.what()).find("ids"), std::string::npos);
  }
}

TEST(PublicFile, LoadsThroughNameMapAndReportsGaps) {
  const auto dir = ref::scratch_dir("public_map");
  const auto cfg = two_layer();
  const auto ck = init_synthetic(cfg, 3, 1.0);
  ref::PublicFileBuilder b;
  NameMap map;
  for (const auto& [name, t] : ck.tensors) {
    b.add_f32("src." + name, t.shape, t.data);
    map["src." + name] = name;
  }
  b.add_f32("extra.thing", {1}, {0});
  b.write(dir / "t.bin");
  std::ofstream(dir / "config.json") << nlohmann::json(cfg).dump();

  const auto loaded = load_public_tensor_file(dir / "t.bin", map, dir / "config.json");
  EXPECT_EQ(loaded.tensors, ck.tensors);
  EXPECT_EQ(loaded.unmapped, std::vector<std::string>{"extra.thing"});

  map.erase("src.layers.0.attn.k_proj.bias");
  try {
    load_public_tensor_file(dir / "t.bin", map, dir / "config.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::mapping);
    EXPECT_NE(std::string(e.what()).find("layers.0.attn.k_proj.bias"), std::string::npos);
  }
}

TEST(PublicFile, OptConfigAndNameMap) {
  const nlohmann::json hf = {{"model_type", "opt"},
                             {"num_hidden_layers", 2},
                             {"hidden_size", 16},
                             {"num_attention_heads", 2},
                             {"ffn_dim", 32},
                             {"vocab_size", 30},
                             {"max_position_embeddings", 24},
                             {"activation_function", "relu"},
                             {"do_layer_norm_before", true},
                             {"word_embed_proj_dim", 16},
                             {"eos_token_id", 2}};
  const auto c = parse_sidecar_config(hf, 26);
  EXPECT_EQ(c.pos_offset, 2u);
  EXPECT_EQ(c.n_layers, 2u);
  EXPECT_TRUE(c.pre_norm);

  const auto map = opt_name_map(2, "model.decoder.");
  EXPECT_EQ(map.at("model.decoder.layers.1.self_attn.out_proj.weight"), "layers.1.attn.out_proj.weight");
  EXPECT_EQ(map.at("model.decoder.layers.0.final_layer_norm.bias"), "layers.0.ffn_norm.bias");
  std::set<std::string> targets;
  for (const auto& [_, v] : map) targets.insert(v);
  auto cfg = c;
  cfg.tied_embeddings = false;
  for (const auto& [name, _] : required_parameters(cfg)) EXPECT_TRUE(targets.count(name)) << name;
}

TEST(Synthetic, DeterministicPerSeed) {
  const auto cfg = two_layer();
  EXPECT_EQ(init_synthetic(cfg, 7, 0.5), init_synthetic(cfg, 7, 0.5));
  EXPECT_NE(init_synthetic(cfg, 7, 0.5).tensors, init_synthetic(cfg, 8, 0.5).tensors);
}

TEST(Synthetic, ZeroScaleZeroesEveryBranch) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto cfg = ref::random_config(seed);
    Model<float> model(init_synthetic(cfg, seed, 0.0));
    const auto tokens = ref::random_tokens(6, cfg.vocab_size, seed);
    std::size_t seen = 0;
    model.forward(tokens, [&](const BlockEvent<float>& e) {
      ++seen;
      EXPECT_TRUE(e.r.isZero(0));
      return Decision::keep;
    });
    EXPECT_EQ(seen, 2 * cfg.n_layers * tokens.size());
  }
}

TEST(Synthetic, NamedStreamsAreIndependentOfOrder) {
  NamedStream a(5, "alpha"), b(5, "beta"), a2(5, "alpha");
  const auto first = a.next_u64();
  b.next_u64();
  EXPECT_EQ(first, a2.next_u64());
  NamedStream u(1, "u");
  for (int i = 0; i < 1000; ++i) {
    const double v = u.next_uniform();
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

// Tiny OPT decoder and logits produced by the Hugging Face implementation
// (tools/make_opt_fixture.py); an implementation-independent reference.
TEST(OptReference, LogitsMatchHuggingFace) {
  const fs::path dir = RADNET_FIXTURE_DIR "/opt_tiny";
  const auto expected = nlohmann::json::parse(ref::slurp(dir / "expected.json"));
  const auto tokens = expected["tokens"].get<std::vector<TokenId>>();
  const auto want = expected["logits"].get<std::vector<std::vector<double>>>();

  const auto ck = load_public_tensor_file(dir / "model.safetensors", opt_name_map(3, "model.decoder."),
                                          dir / "config.json");
  EXPECT_EQ(ck.config.pos_offset, 2u);
  EXPECT_EQ(ck.metadata.at("eos_token_id"), "2");
  EXPECT_TRUE(ck.unmapped.empty());
  Model<double> model(ck);
  const auto got = model.forward(tokens, nullptr).logits;
  Matrix<double> ref_logits(Eigen::Index(want.size()), Eigen::Index(want[0].size()));
  for (std::size_t i = 0; i < want.size(); ++i) {
    for (std::size_t j = 0; j < want[i].size(); ++j) ref_logits(Eigen::Index(i), Eigen::Index(j)) = want[i][j];
  }
  EXPECT_LE(ref::max_rel_diff(got, ref_logits), 1e-5);
}
