// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "flowsteer/flow_model.hpp"
#include "flowsteer/guidance.hpp"

namespace flowsteer {
namespace {

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = gaussian(rng, Shape{n, n}), b = gaussian(rng, Shape{n, n});
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

VelocityField shapes_sized_field() {
  VelocityFieldSpec spec;
  spec.data_dim = 256;
  spec.hidden = {256, 256};
  Rng rng(2);
  return VelocityField(spec, rng);
}

void BM_FieldEval(benchmark::State& state) {
  const VelocityField f = shapes_sized_field();
  Rng rng(3);
  const Tensor x = gaussian(rng, Shape{static_cast<std::size_t>(state.range(0)), 256});
  for (auto _ : state) benchmark::DoNotOptimize(f.eval(x, 0.5));
}
BENCHMARK(BM_FieldEval)->Arg(1)->Arg(64);

// One outer guidance step: gradient skipping against reverse mode through the field.
void BM_GuidanceStep(benchmark::State& state) {
  const VelocityField f = shapes_sized_field();
  Rng rng(4);
  const Tensor x = gaussian(rng, Shape{1, 256});
  auto op = std::make_shared<const DegradationOp>(DegradationOp::centered_box_mask(16, 16, 6));
  const CostFunction cost = CostFunction::degraded(op, op->apply(gaussian(rng, Shape{1, 256})), 1e-4);
  const bool skip = state.range(0) == 0;
  for (auto _ : state) {
    EvalCounters c;
    if (skip) {
      Optimizer sgd(OptimizerKind::kSgd, 0.05);
      benchmark::DoNotOptimize(flowchef_step(f, x, 0.5, 0.005, cost, 1, &sgd, c));
    } else {
      const Tensor g = stepwise_gradient(f, x, 0.5, cost);
      benchmark::DoNotOptimize(axpy(x, 0.005, f.eval(axpy(x, -0.05, g), 0.5)));
    }
  }
  state.SetLabel(skip ? "gradient-skipping" : "stepwise-backprop");
}
BENCHMARK(BM_GuidanceStep)->Arg(0)->Arg(1);

void BM_FullChainGradient(benchmark::State& state) {
  const VelocityField f = shapes_sized_field();
  Rng rng(5);
  const Tensor x = gaussian(rng, Shape{1, 256});
  const CostFunction cost = CostFunction::mse(gaussian(rng, Shape{1, 256}));
  const int T = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(full_chain_gradient(f, x, T, cost));
}
BENCHMARK(BM_FullChainGradient)->Arg(10)->Arg(40);

}  // namespace
}  // namespace flowsteer

BENCHMARK_MAIN();
