// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace flowsteer {

namespace {

Tensor silu(const Tensor& a) {
  Tensor c(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = ad::silu_value(a[i]);
  return c;
}

}  // namespace

Mlp::Mlp(const std::vector<std::size_t>& widths, Rng& rng, bool zero_init) {
  if (widths.size() < 2) throw std::invalid_argument("Mlp: need at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::size_t in = widths[i], out = widths[i + 1];
    if (in == 0 || out == 0) throw std::invalid_argument("Mlp: zero width layer");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weights.push_back(zero_init ? Tensor(Shape{out, in}) : uniform(rng, Shape{out, in}, -bound, bound));
    biases.push_back(zero_init ? Tensor(Shape{out}) : uniform(rng, Shape{out}, -bound, bound));
  }
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) n += weights[i].size() + biases[i].size();
  return n;
}

// Must round exactly like the tape path so that tape and plain evaluation agree bit for bit.
Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    h = add_row_bias(matmul_nt(h, weights[i]), biases[i]);
    if (i + 1 < weights.size()) h = silu(h);
  }
  return h;
}

Mlp::Bound Mlp::bind(ad::Tape& tape, bool trainable) const {
  Bound b;
  for (const auto& w : weights) b.weights.push_back(trainable ? tape.leaf(w) : tape.constant(w));
  for (const auto& bias : biases) b.biases.push_back(trainable ? tape.leaf(bias) : tape.constant(bias));
  return b;
}

ad::Var Mlp::forward(ad::Tape& tape, const Bound& p, ad::Var x) {
  ad::Var h = x;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    h = tape.add_row_bias(tape.matmul_nt(h, p.weights[i]), p.biases[i]);
    if (i + 1 < p.weights.size()) h = tape.silu(h);
  }
  return h;
}

std::vector<Tensor*> Mlp::parameters() {
  std::vector<Tensor*> out;
  for (auto& w : weights) out.push_back(&w);
  for (auto& b : biases) out.push_back(&b);
  return out;
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

Optimizer::Optimizer(OptimizerKind kind, double lr, AdamConfig adam) : kind_(kind), lr_(lr), adam_(adam) {
  if (!(lr > 0.0)) throw std::invalid_argument("Optimizer: learning rate must be positive");
}

void Optimizer::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("Optimizer: params/grads count mismatch");
  ++t_;
  if (kind_ == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->data();
      auto g = grads[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr_ * g[j];
    }
    return;
  }
  if (m_.empty()) {
    for (auto* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("Optimizer: slot count changed between steps");
  const double bc1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    if (p.size() != m.size()) throw std::invalid_argument("Optimizer: slot shape changed between steps");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = adam_.beta1 * m[j] + (1.0 - adam_.beta1) * g[j];
      v[j] = adam_.beta2 * v[j] + (1.0 - adam_.beta2) * g[j] * g[j];
      p[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + adam_.eps);
    }
  }
}

void Optimizer::step(Tensor& param, const Tensor& grad) { step(std::vector<Tensor*>{&param}, std::vector<Tensor>{grad}); }

}  // namespace flowsteer
