// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flowsteer/tensor.hpp"

namespace flowsteer::ad {

enum class Op {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kMatmul,
  kMatmulNT,
  kAddRowBias,
  kSilu,
  kSin,
  kSquare,
  kSum,
  kMean,
  kLogSoftmax,
  kPickLabels,
  kConcatCols,
  kEmbedding,
  kConv2d,
  kAvgpool,
  kReshape,
};

const char* op_name(Op op);

/// x * sigmoid(x), shared by tape and plain evaluation.
double silu_value(double x);

/// Handle to a node on a Tape. Cheap to copy; meaningless on another tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

struct Node {
  Op op = Op::kLeaf;
  std::vector<int> inputs;
  Tensor value;
  bool requires_grad = false;
  // Saved non-differentiable state for the backward rule.
  double scalar = 0.0;
  std::size_t factor = 0;
  std::vector<int> labels;
};

/// Records primitive applications in topological order. Single owner.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var matmul(Var a, Var b);
  /// a * b^T
  Var matmul_nt(Var a, Var b);
  Var add_row_bias(Var a, Var bias);
  /// x * sigmoid(x)
  Var silu(Var a);
  Var sin(Var a);
  Var square(Var a);
  Var sum(Var a);
  Var mean(Var a);
  /// Row-wise log-softmax of a [B, K] tensor.
  Var log_softmax(Var a);
  /// out[b] = a[b, labels[b]] for a [B, K] tensor.
  Var pick_labels(Var a, std::vector<int> labels);
  Var concat_cols(Var a, Var b);
  /// out[b] = table[labels[b]] for a [V, E] table.
  Var embedding(Var table, std::vector<int> labels);
  /// Same-size reflect-padded cross-correlation of an [H, W] image.
  Var conv2d(Var img, Var kernel);
  Var avgpool(Var img, std::size_t factor);
  Var reshape(Var a, Shape shape);

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  const Node& node(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Recomputes every non-leaf node from its inputs. Returns true when every
  /// recomputed value is bit-identical to the recorded one.
  bool replay_matches() const;

 private:
  Var push(Node n);
  std::vector<Node> nodes_;
};

/// Gradients indexed by node id. Nodes the loss does not depend on hold zeros.
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> g) : g_(std::move(g)) {}
  const Tensor& operator[](Var v) const { return g_.at(static_cast<std::size_t>(v.id)); }
  std::size_t size() const { return g_.size(); }

 private:
  std::vector<Tensor> g_;
};

/// Reverse pass from a scalar loss (shape [] or [1]).
Gradients backward(const Tape& tape, Var loss);
/// Reverse pass seeded with an arbitrary cotangent of out's shape.
Gradients vjp(const Tape& tape, Var out, const Tensor& cotangent);

/// A scalar-valued function recorded on a tape from a single input.
using ScalarFn = std::function<Var(Tape&, Var)>;
using VectorFn = std::function<Var(Tape&, Var)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

inline constexpr std::size_t kJacobianGuard = 4096;

/// Dense Jacobian [m, n] of a vector function by m reverse passes.
Tensor jacobian(const VectorFn& f, const Tensor& x);

}  // namespace flowsteer::ad
