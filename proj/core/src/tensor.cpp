// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>


namespace flowsteer {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* what) {
  if (a.rank() != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(a.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match " +
                                std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::vector(std::initializer_list<double> v) {
  return Tensor(Shape{v.size()}, std::vector<double>(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("Tensor::matrix: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw std::invalid_argument("Tensor::item: tensor of shape " + shape_str(shape_) + " is not a scalar");
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::rows(std::size_t begin, std::size_t end) const {
  require_rank(*this, 2, "rows");
  if (begin > end || end > shape_[0]) throw std::out_of_range("rows: range out of bounds");
  const std::size_t c = shape_[1];
  return Tensor(Shape{end - begin, c},
                std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                                    data_.begin() + static_cast<std::ptrdiff_t>(end * c)));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "elementwise");
  Tensor c(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto z = c.data();
  switch (op) {
    case ElementwiseOp::kAdd:
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
      break;
    case ElementwiseOp::kSub:
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] - y[i];
      break;
    case ElementwiseOp::kMul:
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * y[i];
      break;
    case ElementwiseOp::kDiv:
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] / y[i];
      break;
  }
  return c;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::kDiv, a, b); }

Tensor scale(const Tensor& a, double s) {
  Tensor c(a.shape());
  auto x = a.data();
  auto z = c.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = s * x[i];
  return c;
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  Tensor out = a;
  for (double& v : out.data()) v = std::clamp(v, lo, hi);
  return out;
}

Tensor axpy(const Tensor& a, double s, const Tensor& b) {
  require_same_shape(a, b, "axpy");
  Tensor c(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto z = c.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + s * y[i];
  return c;
}

namespace {

// c[m, n] = a[m, k] b[k, n] with c zero on entry. Every c[i][j] starts at 0
// and accumulates a[i][p] b[p][j] over ascending p, so the result equals the
// naive triple loop bit for bit; blocking only changes which elements are
// in flight together.
using v4d = double __attribute__((vector_size(32)));

void gemm_kernel(const double* pa, const double* pb, double* pc, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kRows = 4, kCols = 8;
  // Column strips of b are packed contiguously and reused across every row
  // block while they are still in cache.
  std::vector<double> strip(k * kCols);
  std::size_t j0 = 0;
  for (; j0 + kCols <= n; j0 += kCols) {
    for (std::size_t p = 0; p < k; ++p) std::memcpy(&strip[p * kCols], pb + p * n + j0, kCols * sizeof(double));
    std::size_t i0 = 0;
    for (; i0 + kRows <= m; i0 += kRows) {
      v4d acc[kRows][2] = {};
      for (std::size_t p = 0; p < k; ++p) {
        v4d b0, b1;
        std::memcpy(&b0, &strip[p * kCols], sizeof b0);
        std::memcpy(&b1, &strip[p * kCols + 4], sizeof b1);
        for (std::size_t r = 0; r < kRows; ++r) {
          const double av = pa[(i0 + r) * k + p];
          acc[r][0] += av * b0;
          acc[r][1] += av * b1;
        }
      }
      for (std::size_t r = 0; r < kRows; ++r) std::memcpy(pc + (i0 + r) * n + j0, acc[r], sizeof acc[r]);
    }
    for (; i0 < m; ++i0) {
      v4d acc[2] = {};
      for (std::size_t p = 0; p < k; ++p) {
        v4d b0, b1;
        std::memcpy(&b0, &strip[p * kCols], sizeof b0);
        std::memcpy(&b1, &strip[p * kCols + 4], sizeof b1);
        const double av = pa[i0 * k + p];
        acc[0] += av * b0;
        acc[1] += av * b1;
      }
      std::memcpy(pc + i0 * n + j0, acc, sizeof acc);
    }
  }
  if (j0 == n) return;
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner extents disagree " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  Tensor c(Shape{m, n});
  gemm_kernel(a.data().data(), b.data().data(), c.data().data(), m, k, n);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t k = a.dim(1);
  if (b.dim(1) != k) {
    throw std::invalid_argument("matmul_nt: inner extents disagree " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + "^T");
  }
  const std::size_t m = a.dim(0), n = b.dim(0);
  if (m >= 4) {
    // Same ascending-k accumulation as a dot product, but the inner loop runs
    // over contiguous output columns.
    return matmul(a, transpose(b));
  }
  // A few rows: direct dot products over contiguous rows of b, skipping the transpose.
  Tensor c(Shape{m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = pb + j * k;
      double acc[4] = {};
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t q = 0; q < 4; ++q) acc[q] += arow[p] * b0[q * k + p];
      for (std::size_t q = 0; q < 4; ++q) pc[i * n + j + q] = acc[q];
    }
    for (; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * pb[j * k + p];
      pc[i * n + j] = acc;
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_tn");
  require_rank(b, 2, "matmul_tn");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul_tn: inner extents disagree " + shape_str(a.shape()) + "^T x " +
                                shape_str(b.shape()));
  }
  Tensor c(Shape{m, n});
  const Tensor at = transpose(a);
  gemm_kernel(at.data().data(), b.data().data(), c.data().data(), m, k, n);
  return c;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor t(Shape{c, r});
  const double* src = a.data().data();
  double* dst = t.data().data();
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < r; i0 += kBlock)
    for (std::size_t j0 = 0; j0 < c; j0 += kBlock)
      for (std::size_t i = i0; i < std::min(r, i0 + kBlock); ++i)
        for (std::size_t j = j0; j < std::min(c, j0 + kBlock); ++j) dst[j * r + i] = src[i * c + j];
  return t;
}

Tensor identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  require_rank(a, 2, "add_row_bias");
  const std::size_t n = a.dim(1);
  if (bias.size() != n) {
    throw std::invalid_argument("add_row_bias: bias " + shape_str(bias.shape()) + " does not fit " +
                                shape_str(a.shape()));
  }
  Tensor c = a;
  auto z = c.data();
  auto b = bias.data();
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < n; ++j) z[i * n + j] += b[j];
  return c;
}

Tensor sum_rows(const Tensor& a) {
  require_rank(a, 2, "sum_rows");
  const std::size_t n = a.dim(1);
  Tensor s(Shape{n});
  auto x = a.data();
  auto z = s.data();
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < n; ++j) z[j] += x[i * n + j];
  return s;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  if (a.dim(0) != b.dim(0)) {
    throw std::invalid_argument("concat_cols: row counts disagree " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const std::size_t r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor c(Shape{r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < ca; ++j) c.at(i, j) = a.at(i, j);
    for (std::size_t j = 0; j < cb; ++j) c.at(i, ca + j) = b.at(i, j);
  }
  return c;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  if (begin > end || end > a.dim(1)) throw std::out_of_range("slice_cols: range out of bounds");
  const std::size_t r = a.dim(0);
  Tensor c(Shape{r, end - begin});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = begin; j < end; ++j) c.at(i, j - begin) = a.at(i, j);
  return c;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) return Tensor(Shape{0, 0});
  const std::size_t c = parts.front().dim(1);
  std::size_t r = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != c) throw std::invalid_argument("concat_rows: column counts disagree");
    r += p.dim(0);
  }
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor(Shape{r, c}, std::move(data));
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double mean(const Tensor& a) {
  if (a.empty()) throw std::invalid_argument("mean: empty tensor");
  return sum(a) / static_cast<double>(a.size());
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dot: size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double s = 0.0;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

double squared_norm(const Tensor& a) { return dot(a, a); }
double norm(const Tensor& a) { return std::sqrt(squared_norm(a)); }

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double cosine(const Tensor& a, const Tensor& b) {
  const double na = squared_norm(a);
  const double nb = squared_norm(b);
  if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  const double c = dot(a, b) / std::sqrt(na * nb);
  return std::clamp(c, -1.0, 1.0);
}

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto len = static_cast<std::ptrdiff_t>(n);
  if (len == 1) return 0;
  const std::ptrdiff_t period = 2 * (len - 1);
  i %= period;
  if (i < 0) i += period;
  if (i >= len) i = period - i;
  return static_cast<std::size_t>(i);
}

namespace {

void check_conv_args(const Tensor& img, const Tensor& kernel, const char* what) {
  require_rank(img, 2, what);
  require_rank(kernel, 2, what);
  const std::size_t k = kernel.dim(0);
  if (kernel.dim(1) != k) throw std::invalid_argument(std::string(what) + ": kernel must be square");
  if (k % 2 == 0) {
    throw std::invalid_argument(std::string(what) + ": kernel size " + std::to_string(k) + " is even");
  }
  if (k > std::min(img.dim(0), img.dim(1))) {
    throw std::invalid_argument(std::string(what) + ": kernel " + std::to_string(k) + " larger than image " +
                                shape_str(img.shape()));
  }
}

}  // namespace

Tensor conv2d(const Tensor& img, const Tensor& kernel) {
  check_conv_args(img, kernel, "conv2d");
  const std::size_t h = img.dim(0), w = img.dim(1), k = kernel.dim(0);
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out(Shape{h, w});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      double acc = 0.0;
      for (std::size_t a = 0; a < k; ++a) {
        const std::size_t ii = reflect_index(static_cast<std::ptrdiff_t>(i + a) - r, h);
        for (std::size_t b = 0; b < k; ++b) {
          const std::size_t jj = reflect_index(static_cast<std::ptrdiff_t>(j + b) - r, w);
          acc += kernel.at(a, b) * img.at(ii, jj);
        }
      }
      out.at(i, j) = acc;
    }
  }
  return out;
}

Tensor conv2d_adjoint(const Tensor& grad_out, const Tensor& kernel) {
  check_conv_args(grad_out, kernel, "conv2d_adjoint");
  const std::size_t h = grad_out.dim(0), w = grad_out.dim(1), k = kernel.dim(0);
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out(Shape{h, w});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double g = grad_out.at(i, j);
      for (std::size_t a = 0; a < k; ++a) {
        const std::size_t ii = reflect_index(static_cast<std::ptrdiff_t>(i + a) - r, h);
        for (std::size_t b = 0; b < k; ++b) {
          const std::size_t jj = reflect_index(static_cast<std::ptrdiff_t>(j + b) - r, w);
          out.at(ii, jj) += kernel.at(a, b) * g;
        }
      }
    }
  }
  return out;
}

Tensor avgpool(const Tensor& img, std::size_t factor) {
  require_rank(img, 2, "avgpool");
  if (factor == 0 || img.dim(0) % factor || img.dim(1) % factor) {
    throw std::invalid_argument("avgpool: factor " + std::to_string(factor) + " does not divide " +
                                shape_str(img.shape()));
  }
  const std::size_t h = img.dim(0) / factor, w = img.dim(1) / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  Tensor out(Shape{h, w});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      double acc = 0.0;
      for (std::size_t a = 0; a < factor; ++a)
        for (std::size_t b = 0; b < factor; ++b) acc += img.at(i * factor + a, j * factor + b);
      out.at(i, j) = acc * inv;
    }
  }
  return out;
}

Tensor avgpool_adjoint(const Tensor& grad_out, std::size_t factor) {
  require_rank(grad_out, 2, "avgpool_adjoint");
  if (factor == 0) throw std::invalid_argument("avgpool_adjoint: factor must be positive");
  const double inv = 1.0 / static_cast<double>(factor * factor);
  Tensor out(Shape{grad_out.dim(0) * factor, grad_out.dim(1) * factor});
  for (std::size_t i = 0; i < out.dim(0); ++i)
    for (std::size_t j = 0; j < out.dim(1); ++j) out.at(i, j) = grad_out.at(i / factor, j / factor) * inv;
  return out;
}

Tensor upsample_nearest(const Tensor& img, std::size_t factor) {
  return scale(avgpool_adjoint(img, factor), static_cast<double>(factor * factor));
}

Tensor upsample_bilinear(const Tensor& img, std::size_t factor) {
  if (img.rank() != 2 || factor == 0) throw std::invalid_argument("upsample_bilinear: expected [H, W] and factor >= 1");
  const std::size_t h = img.dim(0), w = img.dim(1);
  Tensor out(Shape{h * factor, w * factor});
  // Source coordinate of output pixel i is (i + 0.5) / factor - 0.5, clamped to the image.
  auto source = [factor](std::size_t i, std::size_t n, std::size_t& lo, std::size_t& hi, double& frac) {
    const double c = std::clamp((static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5, 0.0,
                                static_cast<double>(n - 1));
    lo = static_cast<std::size_t>(c);
    hi = std::min(lo + 1, n - 1);
    frac = c - static_cast<double>(lo);
  };
  for (std::size_t i = 0; i < h * factor; ++i) {
    std::size_t i0, i1;
    double fi;
    source(i, h, i0, i1, fi);
    for (std::size_t j = 0; j < w * factor; ++j) {
      std::size_t j0, j1;
      double fj;
      source(j, w, j0, j1, fj);
      const double top = (1.0 - fj) * img.at(i0, j0) + fj * img.at(i0, j1);
      const double bottom = (1.0 - fj) * img.at(i1, j0) + fj * img.at(i1, j1);
      out.at(i, j) = (1.0 - fi) * top + fi * bottom;
    }
  }
  return out;
}

std::uint64_t content_hash(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](std::uint64_t word) {
    for (int i = 0; i < 8; ++i) {
      h ^= (word >> (8 * i)) & 0xffU;
      h *= 1099511628211ULL;
    }
  };
  feed(t.rank());
  for (auto d : t.shape()) feed(d);
  for (double v : t.data()) feed(std::bit_cast<std::uint64_t>(v));
  return h;
}

}  // namespace flowsteer
