#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "treetf/ops.hpp"
#include "treetf/tensor.hpp"

namespace treetf::testing {

inline std::vector<double> uniform(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  const auto n = static_cast<std::size_t>(numel_of(shape));
  return Tensor::from(std::move(shape), uniform(n, rng, lo, hi));
}

/// sum(y * w) for a fixed random w, so every output coordinate matters.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, 0.5, 1.5)));
}

}  // namespace treetf::testing
