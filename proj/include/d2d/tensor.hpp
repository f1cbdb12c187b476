#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace d2d {

// Error hierarchy shared by every module.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct DomainError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// Raised when a non-finite value shows up during forward or backward.
struct NumericError : Error {
  NumericError(std::string what, std::size_t node)
      : Error(std::move(what)), node_id(node) {}
  std::size_t node_id;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles. Rank 0 is a scalar, rank 1 a vector,
/// rank 2 a matrix; nothing above rank 2 is needed here.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() : shape{}, data(1, 0.0) {}
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }
  static Tensor zeros(Shape s) {
    const auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor zeros_like(const Tensor& t) { return zeros(t.shape); }

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] std::size_t rank() const { return shape.size(); }
  [[nodiscard]] bool is_scalar() const { return data.size() == 1 && shape.size() <= 1; }
  [[nodiscard]] std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  [[nodiscard]] std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  [[nodiscard]] double item() const { return data.front(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  [[nodiscard]] bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const Tensor&) const = default;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

}  // namespace d2d
