#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "radnet/oracle.hpp"
#include "radnet/radial.hpp"

namespace radnet {

struct DistillExample {
  Vector<double> embedding;
  std::size_t label = 0;  // layer index, or n_layers for the output class
};

struct DistillDataset {
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::vector<std::string> run_digests;
  std::vector<DistillExample> examples;

  std::size_t n_classes() const { return n_layers + 1; }
  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  void validate() const;
  /// Appends another dataset with the same arity and width.
  void append(const DistillDataset& other);
};

/// Supervision from one oracle run. A layer counts as kept when either of its
/// blocks was kept; per token the labels walk the kept layers in order and end
/// with the output class, each paired with the embedding entering that layer.
DistillDataset build_dataset(const RoutingTrace& trace, const EmbeddingRecord& embeddings);

struct TrainConfig {
  double learning_rate = 0.1;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t d_hidden = 0;  // 0 selects d_model / 4
  Activation activation = Activation::relu;
  bool shuffle = true;

  void validate() const;
  std::size_t hidden_width(std::size_t d_model) const {
    return d_hidden != 0 ? d_hidden : std::max<std::size_t>(1, d_model / 4);
  }
};

template <typename Scalar>
struct RouterGradients {
  Matrix<Scalar> w1;
  Vector<Scalar> b1;
  Matrix<Scalar> w2;
  Vector<Scalar> b2;
};

template <typename Scalar>
struct LossAndGradient {
  Scalar loss;
  RouterGradients<Scalar> grad;
};

/// Mean softmax cross-entropy of the router over rows of `inputs`.
template <typename Scalar>
Scalar router_loss(const RouterMLP<Scalar>& r, const Matrix<Scalar>& inputs, std::span<const std::size_t> labels) {
  const Matrix<Scalar> a1 = (inputs * r.w1.transpose()).rowwise() + r.b1.transpose();
  const Matrix<Scalar> h = activation(a1, r.act);
  const Matrix<Scalar> z = (h * r.w2.transpose()).rowwise() + r.b2.transpose();
  Scalar total = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const Scalar peak = z.row(i).maxCoeff();
    const Scalar lse = peak + std::log((z.row(i).array() - peak).exp().sum());
    total += lse - z(i, Eigen::Index(labels[std::size_t(i)]));
  }
  return total / Scalar(z.rows());
}

/// Loss plus its gradient, derived by hand:
///   dZ = (softmax(Z) - onehot(y)) / B,  dW2 = dZ^T H,  db2 = sum dZ,
///   dA1 = (dZ W2) * act'(A1),           dW1 = dA1^T X, db1 = sum dA1.
template <typename Scalar>
LossAndGradient<Scalar> router_loss_and_gradient(const RouterMLP<Scalar>& r, const Matrix<Scalar>& inputs,
                                                 std::span<const std::size_t> labels) {
  const auto B = inputs.rows();
  const Matrix<Scalar> a1 = (inputs * r.w1.transpose()).rowwise() + r.b1.transpose();
  const Matrix<Scalar> h = activation(a1, r.act);
  const Matrix<Scalar> z = (h * r.w2.transpose()).rowwise() + r.b2.transpose();

  Matrix<Scalar> dz(z.rows(), z.cols());
  Scalar total = 0;
  for (Eigen::Index i = 0; i < B; ++i) {
    const Scalar peak = z.row(i).maxCoeff();
    const auto e = (z.row(i).array() - peak).exp();
    const Scalar sum = e.sum();
    const auto y = Eigen::Index(labels[std::size_t(i)]);
    total += peak + std::log(sum) - z(i, y);
    dz.row(i) = e / sum;
    dz(i, y) -= Scalar(1);
  }
  dz /= Scalar(B);

  LossAndGradient<Scalar> out;
  out.loss = total / Scalar(B);
  out.grad.w2 = dz.transpose() * h;
  out.grad.b2 = dz.colwise().sum().transpose();
  const Matrix<Scalar> da1 = ((dz * r.w2).array() * activation_derivative(a1, r.act).array()).matrix();
  out.grad.w1 = da1.transpose() * inputs;
  out.grad.b1 = da1.colwise().sum().transpose();
  return out;
}

template <typename Scalar>
Matrix<Scalar> stack_embeddings(const DistillDataset& data) {
  Matrix<Scalar> m(Eigen::Index(data.size()), Eigen::Index(data.d_model));
  for (std::size_t i = 0; i < data.size(); ++i) {
    m.row(Eigen::Index(i)) = data.examples[i].embedding.transpose().template cast<Scalar>();
  }
  return m;
}

std::vector<std::size_t> dataset_labels(const DistillDataset& data);

struct TrainResult {
  RouterMLP<double> router;
  /// Full-dataset loss before training, then after every epoch.
  std::vector<double> loss_history;
};

/// Mini-batch gradient descent on mean softmax cross-entropy. Deterministic
/// given (dataset order, seed, cfg).
TrainResult train_router(const DistillDataset& data, const TrainConfig& cfg);

/// Fraction of examples where the router's choice equals the label.
template <typename Scalar>
double eval_router(const RouterMLP<Scalar>& router, const DistillDataset& data) {
  if (data.empty()) throw Error(Errc::domain, "cannot evaluate a router on an empty dataset");
  if (router.n_layers() != data.n_layers) throw Error(Errc::config, "router arity does not match the dataset");
  std::size_t agree = 0;
  for (const auto& ex : data.examples) {
    if (route_step(router, ex.embedding.template cast<Scalar>()).choice == ex.label) ++agree;
  }
  return double(agree) / double(data.size());
}

void save_dataset(const DistillDataset& data, const std::filesystem::path& path);
DistillDataset load_dataset(const std::filesystem::path& path);

}  // namespace radnet
