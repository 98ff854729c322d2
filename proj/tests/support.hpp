#pragma once
// Shared helpers for the unit tests.

#include <cmath>
#include <random>
#include <vector>

#include "mmml/tensor.hpp"

namespace mmml::test {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, bool requires_grad = false, double spread = 1.0) {
  std::normal_distribution<double> normal(0.0, spread);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

inline std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mmml::test
