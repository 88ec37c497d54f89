// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "flowsteer/autodiff.hpp"
#include "flowsteer/rng.hpp"

namespace flowsteer::testing {

/// A primitive recorded from leaf inputs.
struct PrimitiveCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)> build;
};

struct DotProductResult {
  std::string name;
  double forward_side = 0.0;  // <J v, w> by extrapolated central differences
  double reverse_side = 0.0;  // <v, J^T w> by the backward rule
  double rel_error = 0.0;
};

inline Tensor record_value(const PrimitiveCase& c, const std::vector<Tensor>& xs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& x : xs) vars.push_back(tape.leaf(x, false));
  return tape.value(c.build(tape, vars));
}

/// <J v, w> = <v, J^T w> for random v and w. The directional derivative uses
/// central differences with two rounds of Richardson extrapolation (O(h^6)).
inline DotProductResult dot_product_test(const PrimitiveCase& c, Rng& rng) {
  std::vector<Tensor> v;
  for (const auto& x : c.inputs) v.push_back(gaussian(rng, x.shape()));

  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& x : c.inputs) vars.push_back(tape.leaf(x));
  const ad::Var out = c.build(tape, vars);
  const Tensor w = gaussian(rng, tape.value(out).shape());
  const ad::Gradients g = ad::vjp(tape, out, w);

  DotProductResult r;
  r.name = c.name;
  for (std::size_t i = 0; i < v.size(); ++i) r.reverse_side += dot(v[i], g[vars[i]]);

  auto central = [&](double h) {
    std::vector<Tensor> plus, minus;
    for (std::size_t i = 0; i < v.size(); ++i) {
      plus.push_back(axpy(c.inputs[i], h, v[i]));
      minus.push_back(axpy(c.inputs[i], -h, v[i]));
    }
    return (dot(record_value(c, plus), w) - dot(record_value(c, minus), w)) / (2.0 * h);
  };
  const double h = 1e-2;
  const double d1 = central(h), d2 = central(h / 2), d3 = central(h / 4);
  const double r1 = (4.0 * d2 - d1) / 3.0, r2 = (4.0 * d3 - d2) / 3.0;
  r.forward_side = (16.0 * r2 - r1) / 15.0;
  r.rel_error = std::abs(r.forward_side - r.reverse_side) / std::max(1.0, std::abs(r.reverse_side));
  return r;
}

/// Every differentiable primitive with small random inputs.
inline std::vector<PrimitiveCase> primitive_cases(Rng& rng) {
  using V = const std::vector<ad::Var>&;
  auto g = [&](Shape s) { return gaussian(rng, s); };
  std::vector<PrimitiveCase> cs;
  cs.push_back({"add", {g({3, 4}), g({3, 4})}, [](ad::Tape& t, V x) { return t.add(x[0], x[1]); }});
  cs.push_back({"sub", {g({3, 4}), g({3, 4})}, [](ad::Tape& t, V x) { return t.sub(x[0], x[1]); }});
  cs.push_back({"mul", {g({3, 4}), g({3, 4})}, [](ad::Tape& t, V x) { return t.mul(x[0], x[1]); }});
  cs.push_back({"scale", {g({5})}, [](ad::Tape& t, V x) { return t.scale(x[0], -1.7); }});
  cs.push_back({"add_scalar", {g({5})}, [](ad::Tape& t, V x) { return t.add_scalar(x[0], 0.3); }});
  cs.push_back({"matmul", {g({3, 5}), g({5, 2})}, [](ad::Tape& t, V x) { return t.matmul(x[0], x[1]); }});
  cs.push_back({"matmul_nt", {g({3, 5}), g({4, 5})}, [](ad::Tape& t, V x) { return t.matmul_nt(x[0], x[1]); }});
  cs.push_back({"add_row_bias", {g({3, 4}), g({4})}, [](ad::Tape& t, V x) { return t.add_row_bias(x[0], x[1]); }});
  cs.push_back({"silu", {g({3, 4})}, [](ad::Tape& t, V x) { return t.silu(x[0]); }});
  cs.push_back({"sin", {g({3, 4})}, [](ad::Tape& t, V x) { return t.sin(x[0]); }});
  cs.push_back({"square", {g({3, 4})}, [](ad::Tape& t, V x) { return t.square(x[0]); }});
  cs.push_back({"sum", {g({3, 4})}, [](ad::Tape& t, V x) { return t.sum(x[0]); }});
  cs.push_back({"mean", {g({3, 4})}, [](ad::Tape& t, V x) { return t.mean(x[0]); }});
  cs.push_back({"log_softmax", {g({3, 5})}, [](ad::Tape& t, V x) { return t.log_softmax(x[0]); }});
  cs.push_back({"pick_labels", {g({3, 5})}, [](ad::Tape& t, V x) { return t.pick_labels(x[0], {4, 0, 2}); }});
  cs.push_back({"concat_cols", {g({3, 2}), g({3, 4})}, [](ad::Tape& t, V x) { return t.concat_cols(x[0], x[1]); }});
  cs.push_back({"embedding", {g({4, 3})}, [](ad::Tape& t, V x) { return t.embedding(x[0], {1, 3, 1, 0, 2}); }});
  cs.push_back({"conv2d", {g({6, 7}), g({3, 3})}, [](ad::Tape& t, V x) { return t.conv2d(x[0], x[1]); }});
  cs.push_back({"avgpool", {g({6, 4})}, [](ad::Tape& t, V x) { return t.avgpool(x[0], 2); }});
  cs.push_back({"reshape", {g({3, 4})}, [](ad::Tape& t, V x) { return t.reshape(x[0], Shape{2, 6}); }});
  return cs;
}

}  // namespace flowsteer::testing
