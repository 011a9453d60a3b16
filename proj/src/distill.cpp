#include "radnet/distill.hpp"

#include <algorithm>
#include <numeric>

namespace radnet {

void DistillDataset::validate() const {
  for (const auto& ex : examples) {
    if (ex.label > n_layers) {
      throw Error(Errc::input, "label " + std::to_string(ex.label) + " exceeds arity " + std::to_string(n_classes()));
    }
    if (std::size_t(ex.embedding.size()) != d_model) {
      throw Error(Errc::dimension, "example embedding width " + std::to_string(ex.embedding.size()) +
                                       " != d_model " + std::to_string(d_model));
    }
  }
}

void DistillDataset::append(const DistillDataset& other) {
  if (empty() && run_digests.empty()) {
    n_layers = other.n_layers;
    d_model = other.d_model;
  } else if (other.n_layers != n_layers || other.d_model != d_model) {
    throw Error(Errc::config, "cannot merge datasets with different arity or width");
  }
  run_digests.insert(run_digests.end(), other.run_digests.begin(), other.run_digests.end());
  examples.insert(examples.end(), other.examples.begin(), other.examples.end());
}

DistillDataset build_dataset(const RoutingTrace& trace, const EmbeddingRecord& embeddings) {
  if (trace.run_digest.empty() || trace.run_digest != embeddings.run_digest) {
    throw Error(Errc::provenance, "trace digest '" + trace.run_digest + "' does not match embedding digest '" +
                                      embeddings.run_digest + "'");
  }
  if (embeddings.layer_inputs.size() != trace.tokens.size()) {
    throw Error(Errc::provenance, "trace and embeddings cover different token counts");
  }
  DistillDataset data;
  data.n_layers = trace.n_layers;
  data.run_digests.push_back(trace.run_digest);
  for (std::size_t t = 0; t < trace.tokens.size(); ++t) {
    const auto& row = trace.tokens[t];
    const auto& inputs = embeddings.layer_inputs[t];
    if (embeddings.token_indices[t] != row.token_index || inputs.size() != trace.n_layers + 1) {
      throw Error(Errc::provenance, "embedding record does not line up with trace token " +
                                        std::to_string(row.token_index));
    }
    std::vector<bool> kept(trace.n_layers, false);
    for (const auto& e : row.entries) {
      if (e.decision == Decision::keep) kept[e.block.layer] = true;
    }
    data.d_model = std::size_t(inputs.back().size());
    for (std::size_t l = 0; l < trace.n_layers; ++l) {
      if (kept[l]) data.examples.push_back({inputs[l], l});
    }
    data.examples.push_back({inputs[trace.n_layers], trace.n_layers});
  }
  data.validate();
  return data;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw Error(Errc::config, "learning_rate must be > 0");
  if (epochs == 0) throw Error(Errc::config, "epochs must be >= 1");
  if (batch_size == 0) throw Error(Errc::config, "batch_size must be >= 1");
}

std::vector<std::size_t> dataset_labels(const DistillDataset& data) {
  std::vector<std::size_t> labels;
  labels.reserve(data.size());
  for (const auto& ex : data.examples) labels.push_back(ex.label);
  return labels;
}

TrainResult train_router(const DistillDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw Error(Errc::domain, "cannot train a router on an empty dataset");
  data.validate();

  const Matrix<double> inputs = stack_embeddings<double>(data);
  const auto labels = dataset_labels(data);
  TrainResult out;
  out.router = RouterMLP<double>::init(data.d_model, cfg.hidden_width(data.d_model), data.n_layers, cfg.activation,
                                       cfg.seed);
  auto& r = out.router;
  out.loss_history.push_back(router_loss(r, inputs, labels));

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  NamedStream shuffler(cfg.seed, "router.shuffle");
  Matrix<double> batch;
  std::vector<std::size_t> batch_labels;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) {
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[shuffler.next_u64() % i]);
      }
    }
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      batch.resize(Eigen::Index(n), inputs.cols());
      batch_labels.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        batch.row(Eigen::Index(i)) = inputs.row(Eigen::Index(order[start + i]));
        batch_labels[i] = labels[order[start + i]];
      }
      const auto lg = router_loss_and_gradient(r, batch, batch_labels);
      if (!std::isfinite(lg.loss)) {
        throw Error(Errc::divergence, "loss became non-finite at step " + std::to_string(step) + " (epoch " +
                                          std::to_string(epoch) + ")");
      }
      r.w1 -= cfg.learning_rate * lg.grad.w1;
      r.b1 -= cfg.learning_rate * lg.grad.b1;
      r.w2 -= cfg.learning_rate * lg.grad.w2;
      r.b2 -= cfg.learning_rate * lg.grad.b2;
      ++step;
    }
    const double loss = router_loss(r, inputs, labels);
    if (!std::isfinite(loss)) {
      throw Error(Errc::divergence, "loss became non-finite after step " + std::to_string(step));
    }
    out.loss_history.push_back(loss);
  }
  return out;
}

void save_dataset(const DistillDataset& data, const std::filesystem::path& path) {
  data.validate();
  TensorArchive a;
  a.header = {{"kind", "distill_dataset"},
              {"n_layers", data.n_layers},
              {"d_model", data.d_model},
              {"run_digests", data.run_digests}};
  a.tensors["embeddings"] = Tensor<float>::from(stack_embeddings<float>(data));
  a.tensors["embeddings"].shape = {data.size(), data.d_model};
  auto& labels = a.index_arrays["labels"];
  for (const auto& ex : data.examples) labels.push_back(std::int32_t(ex.label));
  write_archive(a, path);
}

DistillDataset load_dataset(const std::filesystem::path& path) {
  const auto a = read_archive(path);
  if (a.header.value("kind", "") != "distill_dataset") throw Error(Errc::format, "archive is not a distill dataset");
  DistillDataset data;
  try {
    data.n_layers = a.header.at("n_layers").get<std::size_t>();
    data.d_model = a.header.at("d_model").get<std::size_t>();
    data.run_digests = a.header.at("run_digests").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, std::string("dataset header: ") + e.what());
  }
  auto emb = a.tensors.find("embeddings");
  auto lab = a.index_arrays.find("labels");
  if (emb == a.tensors.end() || lab == a.index_arrays.end()) {
    throw Error(Errc::format, "dataset needs 'embeddings' and 'labels' sections");
  }
  const auto& labels = lab->second;
  if (emb->second.shape != Shape{labels.size(), data.d_model}) {
    throw Error(Errc::shape_mismatch, "embeddings shape " + shape_string(emb->second.shape) + " does not match " +
                                          std::to_string(labels.size()) + " labels of width " +
                                          std::to_string(data.d_model));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw Error(Errc::format, "negative label in dataset");
    const float* row = emb->second.data.data() + i * data.d_model;
    Vector<double> e = Eigen::Map<const Vector<float>>(row, Eigen::Index(data.d_model)).cast<double>();
    data.examples.push_back({std::move(e), std::size_t(labels[i])});
  }
  data.validate();
  return data;
}

}  // namespace radnet
