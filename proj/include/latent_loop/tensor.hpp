#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "latent_loop/errors.hpp"
#include "latent_loop/rng.hpp"

namespace latent_loop {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Dense row-major array of doubles. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }
  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }
  static Tensor randn(Shape shape, SplitMix64& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.normal() * stddev;
    return t;
  }
  static Tensor uniform(Shape shape, SplitMix64& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = lo + (hi - lo) * rng.uniform();
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shapes " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Value-level kernels. The autograd ops call these for their forward pass,
/// and test oracles reuse them so that replays are bit-exact.
namespace kernels {

inline constexpr double kGeluCoeff = 0.044715;
inline const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c(Shape{m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

inline double gelu(double x) {
  const double inner = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

inline double gelu_derivative(double x) {
  const double inner = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

struct LayerNormResult {
  Tensor out;
  Tensor normalized;
  std::vector<double> inv_std;
};

// Normalizes over the last axis; every leading index is treated as a row.
inline LayerNormResult layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm width " + std::to_string(d) + " vs gamma " +
                         shape_string(gamma.shape()) + " / beta " + shape_string(beta.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm eps must be positive");
  const std::size_t rows = x.size() / d;
  LayerNormResult r{Tensor(x.shape()), Tensor(x.shape()), std::vector<double>(rows)};
  for (std::size_t i = 0; i < rows; ++i) {
    const double* in = x.data().data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    r.inv_std[i] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double xhat = (in[j] - mean) * inv;
      r.normalized[i * d + j] = xhat;
      r.out[i * d + j] = gamma[j] * xhat + beta[j];
    }
  }
  return r;
}

// Row softmax with max subtraction. `mask[i*n+j] == false` excludes entry j from row i.
inline Tensor softmax_rows(const Tensor& x, const std::vector<bool>* mask = nullptr) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.size() / n;
  if (mask && mask->size() != x.size()) {
    throw DimensionError("softmax mask has " + std::to_string(mask->size()) + " entries for " +
                         shape_string(x.shape()));
  }
  Tensor y(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* in = x.data().data() + i * n;
    double* out = y.data().data() + i * n;
    auto allowed = [&](std::size_t j) { return !mask || (*mask)[i * n + j]; };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (allowed(j)) mx = std::max(mx, in[j]);
    if (!std::isfinite(mx)) throw ContractError("softmax row " + std::to_string(i) + " has no attendable entry");
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = allowed(j) ? std::exp(in[j] - mx) : 0.0;
      total += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= total;
  }
  return y;
}

}  // namespace kernels
}  // namespace latent_loop
