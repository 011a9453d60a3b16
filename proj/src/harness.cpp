#include "radnet/harness.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "radnet/checkpoint.hpp"
#include "radnet/corpus.hpp"
#include "radnet/distill.hpp"
#include "radnet/model.hpp"
#include "radnet/oracle.hpp"
#include "radnet/profiler.hpp"
#include "radnet/radial.hpp"

namespace fs = std::filesystem;

namespace radnet {

namespace {

struct CommonOptions {
  std::string model_path;
  std::string tensor_file;
  std::string config_path;
  std::string name_map_path;
  std::string tokens_path;
  std::string text_path;
  std::size_t seq_len = 256;
  std::optional<std::size_t> separator;
  std::size_t max_blocks = 0;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool dump_logits = false;
};

struct SynthOptions {
  std::size_t layers = 2;
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t d_ff = 64;
  std::size_t vocab = 256;
  std::size_t max_seq = 256;
  std::string activation = "relu";
  std::string pos_embedding = "learned";
  double scale = 0.5;
  std::string output;
};

struct ProfileOptions {
  std::size_t bins = 50;
};

struct OracleOptions {
  double threshold = 0.05;
  bool drop_skipped_kv = false;
};

struct RadialOptions {
  std::string router_path;
  std::size_t router_hidden = 0;
  std::size_t max_layers = 0;
  std::string cache_scope = "global";
  std::string positional = "sinusoidal";
};

struct DistillOptions {
  double threshold = 0.05;
  std::size_t epochs = 100;
  double lr = 0.1;
  std::size_t batch = 32;
  std::size_t d_hidden = 0;
  std::string activation = "relu";
};

void add_common(CLI::App* cmd, CommonOptions& o, bool needs_corpus) {
  cmd->add_option("--model", o.model_path, "native checkpoint");
  cmd->add_option("--tensor-file", o.tensor_file, "public tensor file (header-length + JSON header + payload)");
  cmd->add_option("--config", o.config_path, "sidecar config for --tensor-file");
  cmd->add_option("--name-map", o.name_map_path, "JSON object mapping source names to canonical names");
  if (needs_corpus) {
    cmd->add_option("--tokens", o.tokens_path, "pre-tokenized documents (JSON)");
    cmd->add_option("--text", o.text_path, "plain text, byte-level tokens");
    cmd->add_option("--seq-len", o.seq_len, "packed block length")->capture_default_str();
    cmd->add_option("--separator", o.separator, "document separator token (default: eos_token_id)");
    cmd->add_option("--max-blocks", o.max_blocks, "use at most this many packed blocks (0 = all)");
    cmd->add_flag("--dump-logits", o.dump_logits, "write logits.bin (f32 LE, blocks x seq_len x vocab)");
  }
  cmd->add_option("--out-dir", o.out_dir, std::string("output directory (env ") + kOutDirEnv + ")");
  cmd->add_option("--seed", o.seed, "single source of randomness")->capture_default_str();
}

fs::path resolve_out_dir(const CommonOptions& o) {
  fs::path dir = "out";
  if (!o.out_dir.empty()) {
    dir = o.out_dir;
  } else if (const char* env = std::getenv(kOutDirEnv); env && *env) {
    dir = env;
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(Errc::io, "cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::io, "cannot write '" + path.string() + "'");
  f << text;
}

struct Manifest {
  nlohmann::json j;
  Manifest(const std::string& command, const std::vector<std::string>& args, std::uint64_t seed) {
    j = {{"tool", "radnet"},
         {"version", kToolVersion},
         {"command", command},
         {"argv", std::vector<std::string>(args.begin() + 1, args.end())},
         {"seed", seed},
         {"inputs", nlohmann::json::array()},
         {"outputs", nlohmann::json::array()}};
  }
  void input(const fs::path& p) { j["inputs"].push_back({{"path", p.string()}, {"digest", file_digest(p)}}); }
  void output(const std::string& name) { j["outputs"].push_back(name); }
  void write(const fs::path& dir) {
    output("manifest.json");
    write_text(dir / "manifest.json", j.dump(2) + "\n");
  }
};

Checkpoint load_checkpoint(const CommonOptions& o, Manifest& m) {
  if (!o.model_path.empty() == !o.tensor_file.empty()) {
    throw Error(Errc::usage, "pass exactly one of --model or --tensor-file");
  }
  if (!o.model_path.empty()) {
    m.input(o.model_path);
    return load_model(o.model_path);
  }
  if (o.config_path.empty()) throw Error(Errc::usage, "--tensor-file needs --config");
  m.input(o.tensor_file);
  m.input(o.config_path);
  NameMap names;
  if (!o.name_map_path.empty()) {
    m.input(o.name_map_path);
    std::ifstream f(o.name_map_path);
    if (!f) throw Error(Errc::io, "cannot open name map '" + o.name_map_path + "'");
    try {
      names = nlohmann::json::parse(f).get<NameMap>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::config, std::string("name map: ") + e.what());
    }
  } else {
    std::ifstream f(o.config_path);
    nlohmann::json cfg;
    try {
      cfg = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::config, std::string("config: ") + e.what());
    }
    const std::size_t n_layers = cfg.contains("num_hidden_layers") ? cfg["num_hidden_layers"].get<std::size_t>()
                                                                  : cfg.at("n_layers").get<std::size_t>();
    // OPT checkpoints come with or without the "model." prefix.
    const auto source = read_public_tensor_names(o.tensor_file);
    const bool full = std::find(source.begin(), source.end(), "model.decoder.embed_tokens.weight") != source.end();
    const std::string prefix = full ? "model.decoder." : "decoder.";
    names = opt_name_map(n_layers, prefix);
  }
  auto ckpt = load_public_tensor_file(o.tensor_file, names, o.config_path);
  m.j["unmapped_tensors"] = ckpt.unmapped;
  return ckpt;
}

PackedCorpus load_corpus(const CommonOptions& o, const Checkpoint& ckpt, Manifest& m, std::ostream& err) {
  if (!o.tokens_path.empty() == !o.text_path.empty()) throw Error(Errc::usage, "pass exactly one of --tokens or --text");
  std::vector<TokenList> docs;
  fs::path src;
  if (!o.tokens_path.empty()) {
    src = o.tokens_path;
    docs = read_token_file(src);
  } else {
    src = o.text_path;
    std::ifstream f(src, std::ios::binary);
    if (!f) throw Error(Errc::io, "cannot open text file '" + src.string() + "'");
    const std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    docs.push_back(byte_tokenize(text));
  }
  m.input(src);
  TokenId sep = 0;
  if (o.separator) {
    sep = *o.separator;
  } else if (auto it = ckpt.metadata.find("eos_token_id"); it != ckpt.metadata.end()) {
    sep = std::stoull(it->second);
  }
  auto corpus = pack_sequences(docs, o.seq_len, sep);
  corpus.provenance.push_back(file_digest(src));
  if (corpus.warning) err << "warning: " << *corpus.warning << "\n";
  if (o.max_blocks && corpus.blocks.size() > o.max_blocks) corpus.blocks.resize(o.max_blocks);
  m.j["corpus"] = {{"seq_len", corpus.seq_len},
                   {"separator", corpus.separator},
                   {"blocks", corpus.blocks.size()},
                   {"dropped_tokens", corpus.dropped},
                   {"provenance", corpus.provenance}};
  return corpus;
}

void append_logits(std::ofstream& f, const Matrix<float>& logits) {
  f.write(reinterpret_cast<const char*>(logits.data()), std::streamsize(logits.size() * sizeof(float)));
}

std::ofstream open_logits(const fs::path& dir, Manifest& m) {
  std::ofstream f(dir / "logits.bin", std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::io, "cannot write logits.bin");
  m.output("logits.bin");
  return f;
}

int cmd_synth(const SynthOptions& s, const CommonOptions& o, const std::vector<std::string>& args, std::ostream& out) {
  Manifest m("synth", args, o.seed);
  ModelConfig c;
  c.n_layers = s.layers;
  c.d_model = s.d_model;
  c.n_heads = s.heads;
  c.d_ff = s.d_ff;
  c.vocab_size = s.vocab;
  c.max_seq_len = s.max_seq;
  c.activation = parse_activation(s.activation);
  if (s.pos_embedding == "learned") {
    c.pos_embedding = PosEmbedding::learned;
  } else if (s.pos_embedding == "sinusoidal") {
    c.pos_embedding = PosEmbedding::sinusoidal;
  } else {
    throw Error(Errc::config, "unknown --pos-embedding '" + s.pos_embedding + "'");
  }
  const auto ckpt = init_synthetic(c, o.seed, s.scale);
  const fs::path dir = resolve_out_dir(o);
  const fs::path file = s.output.empty() ? dir / "model.rnck" : fs::path(s.output);
  save_model(ckpt, file);
  m.j["config_digest"] = config_digest(c);
  m.j["parameters"] = {{"scale", s.scale}};
  m.output(file.filename().string());
  m.write(dir);
  out << file.string() << "\n";
  return 0;
}

int cmd_profile(const ProfileOptions& p, const CommonOptions& o, const std::vector<std::string>& args,
                std::ostream& out, std::ostream& err) {
  Manifest m("profile", args, o.seed);
  const auto ckpt = load_checkpoint(o, m);
  const Model<float> model(ckpt);
  const auto corpus = load_corpus(o, ckpt, m, err);
  const fs::path dir = resolve_out_dir(o);

  ProfileRun all;
  std::ofstream logits;
  if (o.dump_logits) logits = open_logits(dir, m);
  ForwardOptions opts;
  opts.compute_logits = o.dump_logits;
  for (std::size_t b = 0; b < corpus.blocks.size(); ++b) {
    ForwardResult<float> fwd;
    auto run = profile_run(model, std::span<const TokenId>(corpus.blocks[b]), b * corpus.seq_len, &fwd, opts);
    all.records.insert(all.records.end(), run.records.begin(), run.records.end());
    all.degenerate.insert(all.degenerate.end(), run.degenerate.begin(), run.degenerate.end());
    if (o.dump_logits) append_logits(logits, fwd.logits);
  }

  std::ofstream csv(dir / "records.csv", std::ios::binary | std::ios::trunc);
  write_records_csv(csv, all.records);
  m.output("records.csv");
  const std::string digest = config_digest(ckpt.config);
  if (!all.records.empty()) {
    auto report = to_json(summarize(all.records, p.bins, digest, all.degenerate.size()));
    write_text(dir / "report.json", report.dump(2) + "\n");
    m.output("report.json");
    out << "records " << all.records.size() << " median " << format_real(report["median"].get<double>()) << "\n";
  } else {
    out << "records 0\n";
  }
  m.j["config_digest"] = digest;
  m.j["parameters"] = {{"bins", p.bins}};
  m.write(dir);
  return 0;
}

int cmd_oracle(const OracleOptions& q, const CommonOptions& o, const std::vector<std::string>& args,
               std::ostream& out, std::ostream& err) {
  Manifest m("oracle", args, o.seed);
  const auto ckpt = load_checkpoint(o, m);
  const Model<float> model(ckpt);
  const auto corpus = load_corpus(o, ckpt, m, err);
  const fs::path dir = resolve_out_dir(o);
  OracleConfig cfg{q.threshold, !q.drop_skipped_kv};

  RoutingTrace merged;
  merged.n_layers = model.n_layers();
  merged.threshold = cfg.threshold;
  std::ofstream logits;
  if (o.dump_logits) logits = open_logits(dir, m);
  std::vector<std::string> digests;
  for (std::size_t b = 0; b < corpus.blocks.size(); ++b) {
    auto run = oracle_forward(model, std::span<const TokenId>(corpus.blocks[b]), cfg, b * corpus.seq_len, false,
                              o.dump_logits);
    digests.push_back(run.trace.run_digest);
    for (auto& t : run.trace.tokens) merged.tokens.push_back(std::move(t));
    if (o.dump_logits) append_logits(logits, run.forward.logits);
  }
  merged.run_digest = hex64(fnv1a64(nlohmann::json(digests).dump()));

  std::ofstream csv(dir / "trace.csv", std::ios::binary | std::ios::trunc);
  write_trace_csv(csv, merged);
  m.output("trace.csv");
  write_text(dir / "trace_matrix.json", trace_matrix_json(merged).dump() + "\n");
  m.output("trace_matrix.json");
  const auto stats = depth_stats(merged);
  write_text(dir / "depth.json", to_json(stats).dump(2) + "\n");
  m.output("depth.json");
  m.j["config_digest"] = config_digest(ckpt.config);
  m.j["run_digest"] = merged.run_digest;
  m.j["parameters"] = {{"threshold", cfg.threshold}, {"cache_skipped_kv", cfg.cache_skipped_kv}};
  m.write(dir);
  out << "tokens " << merged.tokens.size() << " mean_depth " << format_real(stats.mean) << " of " << stats.n_blocks
      << "\n";
  return 0;
}

int cmd_radial(const RadialOptions& r, const CommonOptions& o, const std::vector<std::string>& args,
               std::ostream& out, std::ostream& err) {
  Manifest m("radial", args, o.seed);
  const auto ckpt = load_checkpoint(o, m);
  const Model<float> model(ckpt);
  const auto corpus = load_corpus(o, ckpt, m, err);
  const fs::path dir = resolve_out_dir(o);

  RouterMLP<float> router;
  if (!r.router_path.empty()) {
    m.input(r.router_path);
    router = load_router(r.router_path);
  } else {
    const std::size_t hidden = r.router_hidden ? r.router_hidden : std::max<std::size_t>(1, model.config().d_model / 4);
    router = RouterMLP<float>::random(model.config().d_model, hidden, model.n_layers(), Activation::relu, o.seed);
  }
  RadialConfig cfg;
  cfg.max_layers = r.max_layers ? r.max_layers : std::max<std::size_t>(1, 2 * model.n_layers());
  cfg.cache_scope = parse_cache_scope(r.cache_scope);
  cfg.positional = parse_positional_mode(r.positional);

  std::vector<TokenPath> paths;
  std::ofstream logits;
  if (o.dump_logits) logits = open_logits(dir, m);
  std::size_t executed = 0;
  for (std::size_t b = 0; b < corpus.blocks.size(); ++b) {
    auto seq = radial_sequence(model, MlpPolicy<float>{router}, std::span<const TokenId>(corpus.blocks[b]), cfg,
                               b * corpus.seq_len, o.dump_logits);
    executed += seq.cache.size();
    paths.insert(paths.end(), seq.paths.begin(), seq.paths.end());
    if (o.dump_logits) append_logits(logits, seq.logits);
  }
  write_text(dir / "paths.json", paths_json(paths).dump() + "\n");
  m.output("paths.json");
  m.j["config_digest"] = config_digest(ckpt.config);
  m.j["parameters"] = {{"max_layers", cfg.max_layers},
                       {"cache_scope", r.cache_scope},
                       {"positional", r.positional},
                       {"router", r.router_path.empty() ? "random" : r.router_path}};
  m.write(dir);
  out << "tokens " << paths.size() << " executed_layers " << executed << "\n";
  return 0;
}

int cmd_distill(const DistillOptions& d, const CommonOptions& o, const std::vector<std::string>& args,
                std::ostream& out, std::ostream& err) {
  Manifest m("distill", args, o.seed);
  const auto ckpt = load_checkpoint(o, m);
  const Model<float> model(ckpt);
  const auto corpus = load_corpus(o, ckpt, m, err);
  const fs::path dir = resolve_out_dir(o);
  const OracleConfig ocfg{d.threshold, true};

  DistillDataset data;
  data.n_layers = model.n_layers();
  data.d_model = model.config().d_model;
  for (std::size_t b = 0; b < corpus.blocks.size(); ++b) {
    const auto run = oracle_forward(model, std::span<const TokenId>(corpus.blocks[b]), ocfg, b * corpus.seq_len,
                                    true, false);
    data.append(build_dataset(run.trace, run.embeddings));
  }
  TrainConfig tcfg;
  tcfg.learning_rate = d.lr;
  tcfg.epochs = d.epochs;
  tcfg.batch_size = d.batch;
  tcfg.seed = o.seed;
  tcfg.d_hidden = d.d_hidden;
  tcfg.activation = parse_activation(d.activation);
  const auto trained = train_router(data, tcfg);
  const auto router = trained.router.cast<float>();
  const double agreement = eval_router(router, data);

  save_dataset(data, dir / "dataset.rnds");
  m.output("dataset.rnds");
  save_router(router, dir / "router.rnck");
  m.output("router.rnck");
  nlohmann::json summary{{"examples", data.size()},
                         {"n_classes", data.n_classes()},
                         {"loss_history", trained.loss_history},
                         {"agreement", agreement}};
  write_text(dir / "distill.json", summary.dump(2) + "\n");
  m.output("distill.json");
  m.j["config_digest"] = config_digest(ckpt.config);
  m.j["parameters"] = {{"threshold", d.threshold}, {"epochs", d.epochs},     {"learning_rate", d.lr},
                       {"batch_size", d.batch},    {"d_hidden", tcfg.hidden_width(data.d_model)},
                       {"activation", d.activation}};
  m.write(dir);
  out << "examples " << data.size() << " agreement " << format_real(agreement) << "\n";
  return 0;
}

void report_error(std::ostream& err, std::string_view kind, const std::string& message) {
  err << nlohmann::json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << "\n";
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"radnet: residual-ratio profiling, oracle layer skipping and radial routing"};
  app.require_subcommand(1);

  CommonOptions common;
  SynthOptions synth;
  ProfileOptions profile;
  OracleOptions oracle;
  RadialOptions radial;
  DistillOptions distill;

  auto* synth_cmd = app.add_subcommand("synth", "write a seeded synthetic checkpoint");
  add_common(synth_cmd, common, false);
  synth_cmd->add_option("--layers", synth.layers)->capture_default_str();
  synth_cmd->add_option("--d-model", synth.d_model)->capture_default_str();
  synth_cmd->add_option("--heads", synth.heads)->capture_default_str();
  synth_cmd->add_option("--d-ff", synth.d_ff)->capture_default_str();
  synth_cmd->add_option("--vocab", synth.vocab)->capture_default_str();
  synth_cmd->add_option("--max-seq", synth.max_seq)->capture_default_str();
  synth_cmd->add_option("--activation", synth.activation)->capture_default_str();
  synth_cmd->add_option("--pos-embedding", synth.pos_embedding, "learned|sinusoidal")->capture_default_str();
  synth_cmd->add_option("--scale", synth.scale, "residual-branch weight scale")->capture_default_str();
  synth_cmd->add_option("--output", synth.output, "checkpoint path (default <out-dir>/model.rnck)");

  auto* profile_cmd = app.add_subcommand("profile", "residual ratios at every addition node");
  add_common(profile_cmd, common, true);
  profile_cmd->add_option("--bins", profile.bins, "histogram bins on [0,1]")->capture_default_str();

  auto* oracle_cmd = app.add_subcommand("oracle", "threshold-oracle layer skipping");
  add_common(oracle_cmd, common, true);
  oracle_cmd->add_option("--threshold", oracle.threshold, "skip when ratio < threshold")->capture_default_str();
  oracle_cmd->add_flag("--drop-skipped-kv", oracle.drop_skipped_kv, "do not cache K/V of skipped ATT blocks");

  auto* radial_cmd = app.add_subcommand("radial", "router-driven execution with a unified cache");
  add_common(radial_cmd, common, true);
  radial_cmd->add_option("--router", radial.router_path, "router checkpoint (default: random router from --seed)");
  radial_cmd->add_option("--router-hidden", radial.router_hidden, "hidden width of the random router");
  radial_cmd->add_option("--max-layers", radial.max_layers, "path bound per token (default 2*n_layers)");
  radial_cmd->add_option("--cache-scope", radial.cache_scope, "global|layer_scoped")->capture_default_str();
  radial_cmd->add_option("--positional", radial.positional, "sinusoidal|none")->capture_default_str();

  auto* distill_cmd = app.add_subcommand("distill", "distill a router from oracle traces");
  add_common(distill_cmd, common, true);
  distill_cmd->add_option("--threshold", distill.threshold)->capture_default_str();
  distill_cmd->add_option("--epochs", distill.epochs)->capture_default_str();
  distill_cmd->add_option("--lr", distill.lr)->capture_default_str();
  distill_cmd->add_option("--batch", distill.batch)->capture_default_str();
  distill_cmd->add_option("--d-hidden", distill.d_hidden, "0 = d_model/4")->capture_default_str();
  distill_cmd->add_option("--activation", distill.activation)->capture_default_str();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    report_error(err, errc_name(Errc::usage), e.what());
    return 2;
  }

  try {
    if (*synth_cmd) return cmd_synth(synth, common, args, out);
    if (*profile_cmd) return cmd_profile(profile, common, args, out, err);
    if (*oracle_cmd) return cmd_oracle(oracle, common, args, out, err);
    if (*radial_cmd) return cmd_radial(radial, common, args, out, err);
    if (*distill_cmd) return cmd_distill(distill, common, args, out, err);
  } catch (const Error& e) {
    report_error(err, e.kind(), e.what());
    return e.code() == Errc::usage ? 2 : 1;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return 1;
  }
  return 1;
}

}  // namespace radnet
