#pragma once

#include <cmath>

#include "tsi/rng.hpp"
#include "tsi/tensor.hpp"

namespace tsi {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// He-normal for a kernel whose fan-in is the product of all but the first dimension.
template <typename T>
Tensor<T> fan_in_normal(Shape shape, Rng& rng, double gain = 2.0) {
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  return normal_tensor<T>(std::move(shape), std::sqrt(gain / static_cast<double>(fan_in)), rng);
}

}  // namespace tsi
