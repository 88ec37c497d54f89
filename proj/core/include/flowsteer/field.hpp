// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <memory>
#include <span>

#include "flowsteer/autodiff.hpp"
#include "flowsteer/rng.hpp"
#include "flowsteer/tensor.hpp"

namespace flowsteer {

/// A velocity field u(x, t, c) over batches of row vectors x: [B, dim].
///
/// Time convention: t = 1 is noise, t = 0 is data. The field points toward
/// data, so x_{t-dt} = x_t + dt * u and the one-shot clean estimate is
/// x0_hat = x_t + t * u.
class Field {
 public:
  virtual ~Field() = default;

  virtual std::size_t dim() const = 0;
  virtual bool conditional() const { return false; }
  virtual std::size_t num_classes() const { return 0; }

  /// labels is empty (unconditional / null label) or holds one entry per row.
  virtual Tensor eval(const Tensor& x, double t, std::span<const int> labels = {}) const = 0;
  /// Same field recorded on a tape; parameters enter as constants.
  virtual ad::Var eval(ad::Tape& tape, ad::Var x, double t, std::span<const int> labels = {}) const = 0;
};

/// u = c for every x and t.
class ConstantField final : public Field {
 public:
  explicit ConstantField(Tensor c);
  std::size_t dim() const override { return c_.size(); }
  Tensor eval(const Tensor& x, double t, std::span<const int> labels = {}) const override;
  ad::Var eval(ad::Tape& tape, ad::Var x, double t, std::span<const int> labels = {}) const override;
  const Tensor& value() const { return c_; }

 private:
  Tensor c_;
};

/// u = A x + b (rows: u = x A^T + b).
class AffineField final : public Field {
 public:
  AffineField(Tensor a, Tensor b);
  std::size_t dim() const override { return b_.size(); }
  Tensor eval(const Tensor& x, double t, std::span<const int> labels = {}) const override;
  ad::Var eval(ad::Tape& tape, ad::Var x, double t, std::span<const int> labels = {}) const override;
  const Tensor& a() const { return a_; }
  const Tensor& b() const { return b_; }

 private:
  Tensor a_, b_;
};

/// u = base(x, t) + omega * R x with R skew-symmetric: a rotational
/// perturbation that bends trajectories without changing their speed scale.
class RotationPerturbedField final : public Field {
 public:
  RotationPerturbedField(std::shared_ptr<const Field> base, Tensor generator, double omega);
  std::size_t dim() const override { return base_->dim(); }
  Tensor eval(const Tensor& x, double t, std::span<const int> labels = {}) const override;
  ad::Var eval(ad::Tape& tape, ad::Var x, double t, std::span<const int> labels = {}) const override;

 private:
  std::shared_ptr<const Field> base_;
  Tensor r_;
  double omega_;
};

/// Random skew-symmetric [n, n] matrix with Frobenius norm sqrt(n).
Tensor random_skew(Rng& rng, std::size_t n);

/// Batch of `rows` copies of a [D] vector as [rows, D].
Tensor tile_rows(const Tensor& v, std::size_t rows);

}  // namespace flowsteer
