// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/field.hpp"

#include <cmath>
#include <stdexcept>

namespace flowsteer {

namespace {

void check_batch(const Tensor& x, std::size_t dim, const char* who) {
  if (x.rank() != 2 || x.dim(1) != dim) {
    throw std::invalid_argument(std::string(who) + ": expected [B, " + std::to_string(dim) + "], got " +
                                shape_str(x.shape()));
  }
}

}  // namespace

Tensor tile_rows(const Tensor& v, std::size_t rows) {
  const std::size_t d = v.size();
  Tensor out(Shape{rows, d});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = v[j];
  return out;
}

ConstantField::ConstantField(Tensor c) : c_(c.reshaped(Shape{c.size()})) {}

Tensor ConstantField::eval(const Tensor& x, double, std::span<const int>) const {
  check_batch(x, dim(), "ConstantField");
  return tile_rows(c_, x.dim(0));
}

ad::Var ConstantField::eval(ad::Tape& tape, ad::Var x, double, std::span<const int>) const {
  check_batch(tape.value(x), dim(), "ConstantField");
  // 0 * x keeps the output connected to x so reverse mode yields an exact zero Jacobian.
  return tape.add_row_bias(tape.scale(x, 0.0), tape.constant(c_));
}

AffineField::AffineField(Tensor a, Tensor b) : a_(std::move(a)), b_(b.reshaped(Shape{b.size()})) {
  if (a_.rank() != 2 || a_.dim(0) != b_.size() || a_.dim(1) != b_.size()) {
    throw std::invalid_argument("AffineField: A must be square and match b, got A " + shape_str(a_.shape()) +
                                ", b " + shape_str(b_.shape()));
  }
}

Tensor AffineField::eval(const Tensor& x, double, std::span<const int>) const {
  check_batch(x, dim(), "AffineField");
  return add_row_bias(matmul_nt(x, a_), b_);
}

ad::Var AffineField::eval(ad::Tape& tape, ad::Var x, double, std::span<const int>) const {
  check_batch(tape.value(x), dim(), "AffineField");
  return tape.add_row_bias(tape.matmul_nt(x, tape.constant(a_)), tape.constant(b_));
}

RotationPerturbedField::RotationPerturbedField(std::shared_ptr<const Field> base, Tensor generator, double omega)
    : base_(std::move(base)), r_(std::move(generator)), omega_(omega) {
  if (!base_) throw std::invalid_argument("RotationPerturbedField: null base field");
  if (r_.rank() != 2 || r_.dim(0) != base_->dim() || r_.dim(1) != base_->dim()) {
    throw std::invalid_argument("RotationPerturbedField: generator must be [D, D], got " + shape_str(r_.shape()));
  }
}

Tensor RotationPerturbedField::eval(const Tensor& x, double t, std::span<const int> labels) const {
  return axpy(base_->eval(x, t, labels), omega_, matmul_nt(x, r_));
}

ad::Var RotationPerturbedField::eval(ad::Tape& tape, ad::Var x, double t, std::span<const int> labels) const {
  const ad::Var rot = tape.scale(tape.matmul_nt(x, tape.constant(r_)), omega_);
  return tape.add(base_->eval(tape, x, t, labels), rot);
}

Tensor random_skew(Rng& rng, std::size_t n) {
  Tensor q = gaussian(rng, Shape{n, n});
  Tensor r = sub(q, transpose(q));
  const double fro = norm(r);
  if (fro == 0.0) return r;
  return scale(r, std::sqrt(static_cast<double>(n)) / fro);
}

}  // namespace flowsteer
