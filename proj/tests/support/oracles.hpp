#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance suite. Nothing here calls into the kernels it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "radnet/checkpoint.hpp"
#include "radnet/config.hpp"
#include "radnet/distill.hpp"
#include "radnet/radial.hpp"

namespace radnet::ref {

/// sqrt(sum x_i^2) by a plain loop in long double.
template <typename Derived>
long double brute_norm(const Eigen::MatrixBase<Derived>& x) {
  long double acc = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const long double v = static_cast<long double>(x(i));
    acc += v * v;
  }
  return std::sqrt(acc);
}

inline double brute_ratio(const Vector<double>& r, const Vector<double>& x) {
  return static_cast<double>(brute_norm(r) / brute_norm(x));
}

/// max |a - b| / max(max |b|, tiny): relative error of a against reference b.
template <typename DA, typename DB>
double max_rel_diff(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  const auto ad = a.template cast<double>().eval();
  const auto bd = b.template cast<double>().eval();
  if (ad.rows() != bd.rows() || ad.cols() != bd.cols()) return INFINITY;
  const double scale = std::max(bd.cwiseAbs().maxCoeff(), 1e-30);
  return (ad - bd).cwiseAbs().maxCoeff() / scale;
}

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Central finite differences of `loss` with respect to every router
/// parameter, returned in the same layout as RouterGradients.
inline RouterGradients<double> finite_difference_gradient(const RouterMLP<double>& router,
                                                          const std::function<double(const RouterMLP<double>&)>& loss,
                                                          double h = 1e-5) {
  RouterMLP<double> probe = router;
  auto sweep = [&](auto member) {
    auto& param = probe.*member;
    typename std::remove_reference_t<decltype(param)> grad(param.rows(), param.cols());
    for (Eigen::Index i = 0; i < param.size(); ++i) {
      const double saved = param.data()[i];
      param.data()[i] = saved + h;
      const double up = loss(probe);
      param.data()[i] = saved - h;
      const double down = loss(probe);
      param.data()[i] = saved;
      grad.data()[i] = (up - down) / (2 * h);
    }
    return grad;
  };
  RouterGradients<double> g;
  g.w1 = sweep(&RouterMLP<double>::w1);
  g.b1 = sweep(&RouterMLP<double>::b1);
  g.w2 = sweep(&RouterMLP<double>::w2);
  g.b2 = sweep(&RouterMLP<double>::b2);
  return g;
}

inline double max_gradient_error(const RouterGradients<double>& a, const RouterGradients<double>& n) {
  double worst = 0;
  auto cmp = [&](const auto& x, const auto& y) {
    for (Eigen::Index i = 0; i < x.size(); ++i) worst = std::max(worst, rel_error(x.data()[i], y.data()[i]));
  };
  cmp(a.w1, n.w1);
  cmp(a.b1, n.b1);
  cmp(a.w2, n.w2);
  cmp(a.b2, n.b2);
  return worst;
}

/// Perceptron with bias on labels {0, 1}. Reaching zero training errors is a
/// constructive certificate that the points are linearly separable.
inline bool perceptron_separable(const std::vector<Vector<double>>& xs, const std::vector<std::size_t>& ys,
                                 std::size_t max_epochs = 10000) {
  if (xs.empty()) return true;
  Vector<double> w = Vector<double>::Zero(xs.front().size());
  double b = 0;
  for (std::size_t epoch = 0; epoch < max_epochs; ++epoch) {
    std::size_t mistakes = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double y = ys[i] == 1 ? 1.0 : -1.0;
      if (y * (w.dot(xs[i]) + b) <= 0) {
        w += y * xs[i];
        b += y;
        ++mistakes;
      }
    }
    if (mistakes == 0) return true;
  }
  return false;
}

/// Two Gaussian blobs in d dimensions separated along a random direction with
/// a clear margin; balanced labels.
inline DistillDataset separable_toy(std::size_t n, std::size_t d, std::uint64_t seed, double margin = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector<double> dir(static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < dir.size(); ++i) dir(i) = normal(rng);
  dir.normalize();
  DistillDataset data;
  data.n_layers = 1;
  data.d_model = d;
  while (data.size() < n) {
    Vector<double> x(static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = normal(rng);
    const double proj = x.dot(dir);
    if (std::abs(proj) < margin) continue;
    const std::size_t label = proj > 0 ? 1 : 0;
    std::size_t count = 0;
    for (const auto& ex : data.examples) count += ex.label == label;
    if (count >= n / 2) continue;
    data.examples.push_back({x, label});
  }
  return data;
}

/// Small random model configuration for property sweeps.
inline ModelConfig random_config(std::uint64_t seed, std::size_t min_layers = 2, std::size_t max_layers = 6,
                                 std::size_t min_width = 32, std::size_t max_width = 128) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  ModelConfig c;
  c.n_layers = pick(min_layers, max_layers);
  c.n_heads = std::size_t(1) << pick(0, 2);
  const std::size_t step = 4 * c.n_heads;
  c.d_model = pick((min_width + step - 1) / step, max_width / step) * step;
  c.d_ff = c.d_model * pick(1, 4);
  c.vocab_size = pick(16, 96);
  c.max_seq_len = 64;
  c.activation = pick(0, 1) ? Activation::gelu : Activation::relu;
  c.pre_norm = pick(0, 3) != 0;
  c.final_norm = pick(0, 3) != 0;
  c.tied_embeddings = pick(0, 1) != 0;
  c.pos_embedding = pick(0, 1) ? PosEmbedding::sinusoidal : PosEmbedding::learned;
  return c;
}

inline std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dist(0, vocab - 1);
  std::vector<TokenId> t(n);
  for (auto& v : t) v = dist(rng);
  return t;
}

/// Byte-level builder for the public tensor-file layout, independent of the
/// reader: u64 LE header length, JSON header, raw payload.
struct PublicFileBuilder {
  nlohmann::json header = nlohmann::json::object();
  std::string payload;

  void add_raw(const std::string& name, const std::string& dtype, std::vector<std::size_t> shape,
               const std::string& bytes) {
    header[name] = {{"dtype", dtype}, {"shape", shape}, {"data_offsets", {payload.size(), payload.size() + bytes.size()}}};
    payload += bytes;
  }

  void add_f32(const std::string& name, std::vector<std::size_t> shape, const std::vector<float>& values) {
    std::string bytes(values.size() * 4, '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, &values[i], 4);
      for (int b = 0; b < 4; ++b) bytes[i * 4 + std::size_t(b)] = char((bits >> (8 * b)) & 0xff);
    }
    add_raw(name, "F32", std::move(shape), bytes);
  }

  std::string bytes(std::uint64_t header_len_override = 0) const {
    const std::string h = header.dump();
    const std::uint64_t len = header_len_override ? header_len_override : h.size();
    std::string out(8, '\0');
    for (int b = 0; b < 8; ++b) out[std::size_t(b)] = char((len >> (8 * b)) & 0xff);
    return out + h + payload;
  }

  void write(const std::filesystem::path& path, std::uint64_t header_len_override = 0) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    const std::string b = bytes(header_len_override);
    f.write(b.data(), std::streamsize(b.size()));
  }
};

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("radnet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace radnet::ref
