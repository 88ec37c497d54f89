// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace flowsteer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Values are owned; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::initializer_list<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  /// Value of a one-element tensor of any rank.
  double item() const;

  Tensor reshaped(Shape shape) const;
  /// Rows [begin, end) of a rank-2 tensor.
  Tensor rows(std::size_t begin, std::size_t end) const;
  Tensor row(std::size_t r) const { return rows(r, r + 1); }

  bool all_finite() const;
  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_{0};
  std::vector<double> data_;
};

enum class ElementwiseOp { kAdd, kSub, kMul, kDiv };

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// Elementwise clamp to [lo, hi].
Tensor clamp(const Tensor& a, double lo, double hi);
/// a + s * b
Tensor axpy(const Tensor& a, double s, const Tensor& b);

/// Standard product of rank-2 tensors; every output accumulates in ascending k.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// a^T * b
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor identity(std::size_t n);

/// Adds bias[j] to every row of a [B, N] tensor.
Tensor add_row_bias(const Tensor& a, const Tensor& bias);
/// Column sums of a [B, N] tensor.
Tensor sum_rows(const Tensor& a);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);

double sum(const Tensor& a);
double mean(const Tensor& a);
double dot(const Tensor& a, const Tensor& b);
double squared_norm(const Tensor& a);
double norm(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
/// Cosine similarity; NaN when either vector is zero.
double cosine(const Tensor& a, const Tensor& b);

/// Same-size cross-correlation with reflect padding (edge not repeated).
/// img is [H, W]; kernel is [K, K] with K odd and K <= min(H, W).
Tensor conv2d(const Tensor& img, const Tensor& kernel);
/// Adjoint of conv2d with respect to img.
Tensor conv2d_adjoint(const Tensor& grad_out, const Tensor& kernel);
/// Non-overlapping block mean; factor must divide H and W.
Tensor avgpool(const Tensor& img, std::size_t factor);
/// Adjoint of avgpool: spreads each cell over its block divided by factor^2.
Tensor avgpool_adjoint(const Tensor& grad_out, std::size_t factor);
/// Nearest-neighbour upsampling (replicates each cell over a factor x factor block).
Tensor upsample_nearest(const Tensor& img, std::size_t factor);
/// Bilinear upsampling with pixel-centre alignment and edge clamping.
Tensor upsample_bilinear(const Tensor& img, std::size_t factor);

/// Reflect index into [0, n): -1 -> 1, n -> n - 2.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n);

/// FNV-1a over the raw little-endian bytes of shape and data.
std::uint64_t content_hash(const Tensor& t);

}  // namespace flowsteer
