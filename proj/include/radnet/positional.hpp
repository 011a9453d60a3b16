#pragma once

#include <cmath>
#include <cstddef>

#include "radnet/tensor.hpp"

namespace radnet {

/// Sinusoidal embedding: sin(p / 10000^(i/d)) at even i, cos(p / 10000^((i-1)/d)) at odd i.
template <typename Scalar = double>
Vector<Scalar> positional_embedding(std::size_t p, std::size_t d) {
  if (d == 0) throw Error(Errc::domain, "positional embedding width must be >= 1");
  Vector<Scalar> pe(static_cast<Eigen::Index>(d));
  const double pos = static_cast<double>(p);
  for (std::size_t i = 0; i < d; ++i) {
    const std::size_t even = i - (i % 2);
    const double angle = pos / std::pow(10000.0, static_cast<double>(even) / static_cast<double>(d));
    pe(Eigen::Index(i)) = static_cast<Scalar>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
  }
  return pe;
}

}  // namespace radnet
