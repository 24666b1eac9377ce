// Copyright 2026  The avsd Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "avsd/error.hpp"

namespace avsd {

using Shape = std::vector<std::size_t>;

inline std::size_t NumElements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string ShapeString(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor of doubles. Rank 0 is a scalar with one element.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(NumElements(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != NumElements(shape_))
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + ShapeString(shape_));
  }

  static Tensor Scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor(Shape{rows, cols}, fill);
  }
  static Tensor FromRows(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("Tensor::FromRows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
  }
  static Tensor Identity(std::size_t n) {
    Tensor t = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Rows/cols of a rank-2 tensor.
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("Tensor::item on non-scalar " + ShapeString(shape_));
    return data_[0];
  }

  std::span<double> row(std::size_t r) {
    return std::span<double>(data_).subspan(r * shape_[1], shape_[1]);
  }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
  }

  Tensor Reshaped(Shape shape) const {
    if (NumElements(shape) != data_.size())
      throw ShapeError("Tensor::Reshaped: " + ShapeString(shape_) + " -> " + ShapeString(shape));
    return Tensor(std::move(shape), data_);
  }

  void Fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool AllFinite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double MaxAbsDiff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("MaxAbsDiff: " + ShapeString(a.shape()) + " vs " + ShapeString(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace avsd
