// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "flowsteer/autodiff.hpp"
#include "flowsteer/rng.hpp"
#include "flowsteer/tensor.hpp"

namespace flowsteer {

/// Fully connected stack with SiLU between layers and a linear head.
/// weights[i] is [out_i, in_i]; biases[i] is [out_i].
struct Mlp {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  Mlp() = default;
  /// widths = {in, hidden..., out}. Uniform(+-1/sqrt(fan_in)) init, or zeros.
  Mlp(const std::vector<std::size_t>& widths, Rng& rng, bool zero_init = false);

  std::size_t in_dim() const { return weights.front().dim(1); }
  std::size_t out_dim() const { return weights.back().dim(0); }
  std::size_t layer_count() const { return weights.size(); }
  std::size_t parameter_count() const;

  Tensor forward(const Tensor& x) const;

  /// Tape handles for the parameters, in the order weights..., biases...
  struct Bound {
    std::vector<ad::Var> weights;
    std::vector<ad::Var> biases;
  };
  Bound bind(ad::Tape& tape, bool trainable) const;
  static ad::Var forward(ad::Tape& tape, const Bound& p, ad::Var x);

  /// Pointers to every parameter tensor in bind() order.
  std::vector<Tensor*> parameters();
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind parse_optimizer(const std::string& s);
const char* optimizer_name(OptimizerKind k);

/// First-order optimizer over a fixed list of parameter slots. State is kept
/// per slot and survives across step() calls.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, AdamConfig adam = {});

  /// params[i] -= update(grads[i]) for every slot.
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);
  /// Single-slot convenience.
  void step(Tensor& param, const Tensor& grad);

  OptimizerKind kind() const { return kind_; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  long steps() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_;
  AdamConfig adam_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace flowsteer
