#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "pvnet/common.hpp"

namespace pvnet::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor.
template <typename T>
struct BasicTensor {
  using value_type = T;
  Shape shape;
  std::vector<T> data;

  BasicTensor() = default;
  explicit BasicTensor(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
  BasicTensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) {
      throw Error("tensor: data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }
  }

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : data.size() / rows(); }

  T& operator[](std::size_t i) { return data[i]; }
  T operator[](std::size_t i) const { return data[i]; }

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape, std::vector<U>(data.begin(), data.end()));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;
};

/// Storage precision for parameters and reported values.
using Tensor = BasicTensor<double>;

}  // namespace pvnet::nn
