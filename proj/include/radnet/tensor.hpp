#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "radnet/error.hpp"

namespace radnet {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major array with an explicit shape. This is the storage type for
/// checkpoints and files; arithmetic goes through the Eigen views.
template <typename Scalar>
struct Tensor {
  Shape shape;
  std::vector<Scalar> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_size(shape), Scalar(0)) {}
  Tensor(Shape s, std::vector<Scalar> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_size(shape) != data.size()) {
      throw Error(Errc::shape_mismatch, "tensor shape " + shape_string(shape) + " holds " +
                                            std::to_string(shape_size(shape)) + " elements, got " +
                                            std::to_string(data.size()));
    }
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  Eigen::Map<const Matrix<Scalar>> matrix() const {
    require_rank(2);
    return {data.data(), Eigen::Index(shape[0]), Eigen::Index(shape[1])};
  }
  Eigen::Map<Matrix<Scalar>> matrix() {
    require_rank(2);
    return {data.data(), Eigen::Index(shape[0]), Eigen::Index(shape[1])};
  }
  Eigen::Map<const Vector<Scalar>> vector() const { return {data.data(), Eigen::Index(data.size())}; }
  Eigen::Map<Vector<Scalar>> vector() { return {data.data(), Eigen::Index(data.size())}; }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, std::vector<Other>(data.begin(), data.end()));
  }

  template <typename Derived>
  static Tensor from(const Eigen::DenseBase<Derived>& m) {
    Tensor t;
    if (m.cols() == 1) {
      t.shape = {std::size_t(m.rows())};
    } else {
      t.shape = {std::size_t(m.rows()), std::size_t(m.cols())};
    }
    t.data.resize(std::size_t(m.size()));
    Eigen::Map<Matrix<Scalar>>(t.data.data(), m.rows(), m.cols()) = m.template cast<Scalar>();
    return t;
  }

  bool operator==(const Tensor&) const = default;

 private:
  void require_rank(std::size_t r) const {
    if (shape.size() != r) {
      throw Error(Errc::dimension, "expected rank " + std::to_string(r) + " tensor, got shape " +
                                       shape_string(shape));
    }
  }
};

enum class Activation { relu, gelu };

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw Error(Errc::config, "unknown activation '" + std::string(name) + "' (expected relu|gelu)");
}

inline std::string_view activation_name(Activation a) {
  return a == Activation::relu ? "relu" : "gelu";
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.derived().array().isFinite().all();
}

template <typename DerivedA, typename DerivedB>
auto matmul(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.cols() != b.rows()) {
    throw Error(Errc::dimension, "matmul shape mismatch: [" + std::to_string(a.rows()) + "," +
                                     std::to_string(a.cols()) + "] x [" + std::to_string(b.rows()) +
                                     "," + std::to_string(b.cols()) + "]");
  }
  Matrix<Scalar> out = a * b;
  return out;
}

/// Max-subtracted softmax over a vector.
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  if (z.size() == 0) throw Error(Errc::domain, "softmax of an empty vector");
  if (!all_finite(z)) throw Error(Errc::domain, "softmax input contains non-finite values");
  const Scalar peak = z.maxCoeff();
  Vector<Scalar> e = (z.array() - peak).exp().matrix();
  return e / e.sum();
}

/// (x - mean) / sqrt(var + eps) * gamma + beta with population variance.
template <typename DX, typename DG, typename DB>
Vector<typename DX::Scalar> layer_norm(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DG>& gamma,
                                       const Eigen::MatrixBase<DB>& beta, double eps) {
  using Scalar = typename DX::Scalar;
  if (!(eps > 0)) throw Error(Errc::domain, "layer_norm eps must be > 0");
  if (gamma.size() != x.size() || beta.size() != x.size()) {
    throw Error(Errc::dimension, "layer_norm parameter width does not match input width " +
                                     std::to_string(x.size()));
  }
  const Scalar mean = x.mean();
  const Vector<Scalar> centered = x.array() - mean;
  const Scalar var = centered.squaredNorm() / Scalar(x.size());
  const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(eps));
  return (centered.array() * inv * gamma.array() + beta.array()).matrix();
}

template <typename Derived>
typename Derived::Scalar l2_norm(const Eigen::MatrixBase<Derived>& x) {
  return x.norm();
}

template <typename Scalar>
Scalar gelu(Scalar v) {
  return Scalar(0.5) * v * (Scalar(1) + std::erf(v / std::sqrt(Scalar(2))));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar v) {
  const Scalar pi = Scalar(3.14159265358979323846);
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v / std::sqrt(Scalar(2))));
  const Scalar pdf = std::exp(Scalar(-0.5) * v * v) / std::sqrt(Scalar(2) * pi);
  return cdf + v * pdf;
}

template <typename Derived>
typename Derived::PlainObject activation(const Eigen::MatrixBase<Derived>& x, Activation kind) {
  using Scalar = typename Derived::Scalar;
  if (kind == Activation::relu) return x.cwiseMax(Scalar(0));
  return x.unaryExpr([](Scalar v) { return gelu(v); });
}

/// Elementwise derivative of the activation evaluated at the pre-activation.
template <typename Derived>
typename Derived::PlainObject activation_derivative(const Eigen::MatrixBase<Derived>& x, Activation kind) {
  using Scalar = typename Derived::Scalar;
  if (kind == Activation::relu) {
    return x.unaryExpr([](Scalar v) { return v > Scalar(0) ? Scalar(1) : Scalar(0); });
  }
  return x.unaryExpr([](Scalar v) { return gelu_derivative(v); });
}

/// Index of the largest element; ties resolve to the lowest index.
template <typename Derived>
Eigen::Index argmax(const Eigen::MatrixBase<Derived>& x) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < x.size(); ++i) {
    if (x(i) > x(best)) best = i;
  }
  return best;
}

}  // namespace radnet
