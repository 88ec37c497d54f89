// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace flowsteer::ad {

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor map(const Tensor& a, double (*f)(double)) {
  Tensor c(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = f(a[i]);
  return c;
}

double silu_fn(double x) { return silu_value(x); }
double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}
double sin_fn(double x) { return std::sin(x); }
double square_fn(double x) { return x * x; }

Tensor log_softmax_rows(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("log_softmax: expected [B, K], got " + shape_str(a.shape()));
  Tensor out(a.shape());
  const std::size_t k = a.dim(1);
  for (std::size_t b = 0; b < a.dim(0); ++b) {
    double m = a.at(b, 0);
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, a.at(b, j));
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(a.at(b, j) - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out.at(b, j) = a.at(b, j) - lse;
  }
  return out;
}

void check_labels(const std::vector<int>& labels, std::size_t rows, std::size_t classes, const char* what) {
  if (labels.size() != rows) {
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(rows) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw std::out_of_range(std::string(what) + ": label " + std::to_string(l) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
  }
}

// Forward rule shared by recording and replay.
Tensor compute(const Node& n, const std::vector<Node>& nodes) {
  auto in = [&](std::size_t i) -> const Tensor& { return nodes[static_cast<std::size_t>(n.inputs[i])].value; };
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      return n.value;
    case Op::kAdd:
      return flowsteer::add(in(0), in(1));
    case Op::kSub:
      return flowsteer::sub(in(0), in(1));
    case Op::kMul:
      return flowsteer::mul(in(0), in(1));
    case Op::kScale:
      return flowsteer::scale(in(0), n.scalar);
    case Op::kAddScalar: {
      Tensor c = in(0);
      for (auto& v : c.data()) v += n.scalar;
      return c;
    }
    case Op::kMatmul:
      return flowsteer::matmul(in(0), in(1));
    case Op::kMatmulNT:
      return flowsteer::matmul_nt(in(0), in(1));
    case Op::kAddRowBias:
      return flowsteer::add_row_bias(in(0), in(1));
    case Op::kSilu:
      return map(in(0), silu_fn);
    case Op::kSin:
      return map(in(0), sin_fn);
    case Op::kSquare:
      return map(in(0), square_fn);
    case Op::kSum:
      return Tensor::scalar(flowsteer::sum(in(0)));
    case Op::kMean:
      return Tensor::scalar(flowsteer::mean(in(0)));
    case Op::kLogSoftmax:
      return log_softmax_rows(in(0));
    case Op::kPickLabels: {
      const Tensor& a = in(0);
      Tensor out(Shape{a.dim(0)});
      for (std::size_t b = 0; b < a.dim(0); ++b) out[b] = a.at(b, static_cast<std::size_t>(n.labels[b]));
      return out;
    }
    case Op::kConcatCols:
      return flowsteer::concat_cols(in(0), in(1));
    case Op::kEmbedding: {
      const Tensor& table = in(0);
      const std::size_t e = table.dim(1);
      Tensor out(Shape{n.labels.size(), e});
      for (std::size_t b = 0; b < n.labels.size(); ++b)
        for (std::size_t j = 0; j < e; ++j) out.at(b, j) = table.at(static_cast<std::size_t>(n.labels[b]), j);
      return out;
    }
    case Op::kConv2d:
      return flowsteer::conv2d(in(0), in(1));
    case Op::kAvgpool:
      return flowsteer::avgpool(in(0), n.factor);
    case Op::kReshape:
      return in(0).reshaped(n.value.shape());
  }
  throw std::logic_error("autodiff: unknown op");
}

void accumulate(Tensor& dst, const Tensor& g) {
  if (dst.empty() && !g.empty()) {
    dst = g;
    return;
  }
  auto d = dst.data();
  auto s = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Gradient of conv2d with respect to its kernel.
Tensor conv2d_kernel_grad(const Tensor& img, const Tensor& grad_out, std::size_t k) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  Tensor gk(Shape{k, k});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double g = grad_out.at(i, j);
      for (std::size_t a = 0; a < k; ++a) {
        const std::size_t ii = reflect_index(static_cast<std::ptrdiff_t>(i + a) - r, h);
        for (std::size_t b = 0; b < k; ++b) {
          const std::size_t jj = reflect_index(static_cast<std::ptrdiff_t>(j + b) - r, w);
          gk.at(a, b) += g * img.at(ii, jj);
        }
      }
    }
  }
  return gk;
}

}  // namespace

double silu_value(double x) { return x * sigmoid(x); }

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMatmul: return "matmul";
    case Op::kMatmulNT: return "matmul_nt";
    case Op::kAddRowBias: return "add_row_bias";
    case Op::kSilu: return "silu";
    case Op::kSin: return "sin";
    case Op::kSquare: return "square";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kPickLabels: return "pick_labels";
    case Op::kConcatCols: return "concat_cols";
    case Op::kEmbedding: return "embedding";
    case Op::kConv2d: return "conv2d";
    case Op::kAvgpool: return "avgpool";
    case Op::kReshape: return "reshape";
  }
  return "?";
}

const Node& Tape::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::out_of_range("Tape: var " + std::to_string(v.id) + " does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::push(Node n) {
  bool rg = false;
  for (int id : n.inputs) {
    node(Var{id});
    rg = rg || nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  n.value = compute(n, nodes_);
  n.requires_grad = rg;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

namespace {
Node make(Op op, std::vector<int> inputs) {
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  return n;
}
}  // namespace

Var Tape::add(Var a, Var b) { return push(make(Op::kAdd, {a.id, b.id})); }
Var Tape::sub(Var a, Var b) { return push(make(Op::kSub, {a.id, b.id})); }
Var Tape::mul(Var a, Var b) { return push(make(Op::kMul, {a.id, b.id})); }

Var Tape::scale(Var a, double s) {
  Node n = make(Op::kScale, {a.id});
  n.scalar = s;
  return push(std::move(n));
}

Var Tape::add_scalar(Var a, double s) {
  Node n = make(Op::kAddScalar, {a.id});
  n.scalar = s;
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) { return push(make(Op::kMatmul, {a.id, b.id})); }
Var Tape::matmul_nt(Var a, Var b) { return push(make(Op::kMatmulNT, {a.id, b.id})); }
Var Tape::add_row_bias(Var a, Var bias) { return push(make(Op::kAddRowBias, {a.id, bias.id})); }
Var Tape::silu(Var a) { return push(make(Op::kSilu, {a.id})); }
Var Tape::sin(Var a) { return push(make(Op::kSin, {a.id})); }
Var Tape::square(Var a) { return push(make(Op::kSquare, {a.id})); }
Var Tape::sum(Var a) { return push(make(Op::kSum, {a.id})); }
Var Tape::mean(Var a) { return push(make(Op::kMean, {a.id})); }
Var Tape::log_softmax(Var a) { return push(make(Op::kLogSoftmax, {a.id})); }

Var Tape::pick_labels(Var a, std::vector<int> labels) {
  const Tensor& v = value(a);
  if (v.rank() != 2) throw std::invalid_argument("pick_labels: expected [B, K], got " + shape_str(v.shape()));
  check_labels(labels, v.dim(0), v.dim(1), "pick_labels");
  Node n = make(Op::kPickLabels, {a.id});
  n.labels = std::move(labels);
  return push(std::move(n));
}

Var Tape::concat_cols(Var a, Var b) { return push(make(Op::kConcatCols, {a.id, b.id})); }

Var Tape::embedding(Var table, std::vector<int> labels) {
  const Tensor& v = value(table);
  if (v.rank() != 2) throw std::invalid_argument("embedding: table must be [V, E], got " + shape_str(v.shape()));
  check_labels(labels, labels.size(), v.dim(0), "embedding");
  Node n = make(Op::kEmbedding, {table.id});
  n.labels = std::move(labels);
  return push(std::move(n));
}

Var Tape::conv2d(Var img, Var kernel) { return push(make(Op::kConv2d, {img.id, kernel.id})); }

Var Tape::avgpool(Var img, std::size_t factor) {
  Node n = make(Op::kAvgpool, {img.id});
  n.factor = factor;
  return push(std::move(n));
}

Var Tape::reshape(Var a, Shape shape) {
  if (shape_numel(shape) != value(a).size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(value(a).shape()) + " as " + shape_str(shape));
  }
  Node n = make(Op::kReshape, {a.id});
  // The target shape travels in value until compute() fills it.
  n.value = Tensor(std::move(shape));
  return push(std::move(n));
}

bool Tape::replay_matches() const {
  std::vector<Node> replayed;
  replayed.reserve(nodes_.size());
  for (const auto& n : nodes_) {
    Node r = n;
    r.value = compute(n, replayed);
    if (r.value.shape() != n.value.shape() || r.value.values() != n.value.values()) return false;
    replayed.push_back(std::move(r));
  }
  return true;
}

Gradients vjp(const Tape& tape, Var out, const Tensor& cotangent) {
  const auto& nodes = tape.nodes();
  const Node& root = tape.node(out);
  if (cotangent.size() != root.value.size()) {
    throw std::invalid_argument("vjp: cotangent " + shape_str(cotangent.shape()) + " does not match output " +
                                shape_str(root.value.shape()));
  }
  std::vector<Tensor> g(nodes.size());
  g[static_cast<std::size_t>(out.id)] = cotangent.reshaped(root.value.shape());

  for (int id = out.id; id >= 0; --id) {
    const Node& n = nodes[static_cast<std::size_t>(id)];
    Tensor& gy = g[static_cast<std::size_t>(id)];
    if (gy.empty() || !n.requires_grad || n.inputs.empty()) continue;
    auto in = [&](std::size_t i) -> const Tensor& { return nodes[static_cast<std::size_t>(n.inputs[i])].value; };
    auto send = [&](std::size_t i, const Tensor& gi) {
      const auto idx = static_cast<std::size_t>(n.inputs[i]);
      if (nodes[idx].requires_grad) accumulate(g[idx], gi);
    };
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd:
        send(0, gy);
        send(1, gy);
        break;
      case Op::kSub:
        send(0, gy);
        send(1, flowsteer::scale(gy, -1.0));
        break;
      case Op::kMul:
        send(0, flowsteer::mul(gy, in(1)));
        send(1, flowsteer::mul(gy, in(0)));
        break;
      case Op::kScale:
        send(0, flowsteer::scale(gy, n.scalar));
        break;
      case Op::kAddScalar:
      case Op::kReshape:
        send(0, gy.reshaped(in(0).shape()));
        break;
      case Op::kMatmul:
        send(0, flowsteer::matmul_nt(gy, in(1)));
        send(1, flowsteer::matmul_tn(in(0), gy));
        break;
      case Op::kMatmulNT:
        // y = a b^T: da = gy b, db = gy^T a
        send(0, flowsteer::matmul(gy, in(1)));
        send(1, flowsteer::matmul_tn(gy, in(0)));
        break;
      case Op::kAddRowBias:
        send(0, gy);
        send(1, flowsteer::sum_rows(gy).reshaped(in(1).shape()));
        break;
      case Op::kSilu: {
        Tensor d(gy.shape());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = gy[i] * silu_grad(in(0)[i]);
        send(0, d);
        break;
      }
      case Op::kSin: {
        Tensor d(gy.shape());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = gy[i] * std::cos(in(0)[i]);
        send(0, d);
        break;
      }
      case Op::kSquare: {
        Tensor d(gy.shape());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = 2.0 * in(0)[i] * gy[i];
        send(0, d);
        break;
      }
      case Op::kSum:
        send(0, Tensor(in(0).shape(), gy.item()));
        break;
      case Op::kMean:
        send(0, Tensor(in(0).shape(), gy.item() / static_cast<double>(in(0).size())));
        break;
      case Op::kLogSoftmax: {
        // dx = gy - softmax * rowsum(gy)
        const Tensor& y = n.value;
        Tensor d(gy.shape());
        for (std::size_t b = 0; b < y.dim(0); ++b) {
          double s = 0.0;
          for (std::size_t j = 0; j < y.dim(1); ++j) s += gy.at(b, j);
          for (std::size_t j = 0; j < y.dim(1); ++j) d.at(b, j) = gy.at(b, j) - std::exp(y.at(b, j)) * s;
        }
        send(0, d);
        break;
      }
      case Op::kPickLabels: {
        Tensor d(in(0).shape());
        for (std::size_t b = 0; b < n.labels.size(); ++b) d.at(b, static_cast<std::size_t>(n.labels[b])) = gy[b];
        send(0, d);
        break;
      }
      case Op::kConcatCols: {
        const std::size_t ca = in(0).dim(1);
        send(0, flowsteer::slice_cols(gy, 0, ca));
        send(1, flowsteer::slice_cols(gy, ca, gy.dim(1)));
        break;
      }
      case Op::kEmbedding: {
        Tensor d(in(0).shape());
        const std::size_t e = d.dim(1);
        for (std::size_t b = 0; b < n.labels.size(); ++b)
          for (std::size_t j = 0; j < e; ++j) d.at(static_cast<std::size_t>(n.labels[b]), j) += gy.at(b, j);
        send(0, d);
        break;
      }
      case Op::kConv2d:
        send(0, flowsteer::conv2d_adjoint(gy, in(1)));
        send(1, conv2d_kernel_grad(in(0), gy, in(1).dim(0)));
        break;
      case Op::kAvgpool:
        send(0, flowsteer::avgpool_adjoint(gy, n.factor));
        break;
    }
  }

  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i].empty() && !nodes[i].value.empty()) g[i] = Tensor::zeros_like(nodes[i].value);
  }
  return Gradients(std::move(g));
}

Gradients backward(const Tape& tape, Var loss) {
  const Tensor& v = tape.value(loss);
  if (v.size() != 1 || v.rank() > 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(v.shape()));
  }
  return vjp(tape, loss, Tensor(v.shape(), 1.0));
}

GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double h) {
  Tape tape;
  const Var xv = tape.leaf(x);
  const Var y = f(tape, xv);
  const Tensor analytic = backward(tape, y)[xv];

  auto eval = [&](const Tensor& p) {
    Tape t;
    return t.value(f(t, t.leaf(p))).item();
  };

  GradCheckResult res;
  Tensor p = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[i] = x[i] + h;
    const double fp = eval(p);
    p[i] = x[i] - h;
    const double fm = eval(p);
    p[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::domain_error("grad_check: non-finite function value at coordinate " + std::to_string(i));
    }
    const double fd = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
    }
  }
  return res;
}

Tensor jacobian(const VectorFn& f, const Tensor& x) {
  if (x.size() > kJacobianGuard) {
    std::ostringstream os;
    os << "jacobian: input size " << x.size() << " exceeds guard " << kJacobianGuard
       << "; use vector-Jacobian products (vjp) instead";
    throw std::length_error(os.str());
  }
  Tape tape;
  const Var xv = tape.leaf(x);
  const Var y = f(tape, xv);
  const Tensor& yv = tape.value(y);
  const std::size_t m = yv.size(), n = x.size();
  Tensor jac(Shape{m, n});
  Tensor seed(yv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    seed[i] = 1.0;
    const Tensor row = vjp(tape, y, seed)[xv];
    seed[i] = 0.0;
    for (std::size_t j = 0; j < n; ++j) jac.at(i, j) = row[j];
  }
  return jac;
}

}  // namespace flowsteer::ad
