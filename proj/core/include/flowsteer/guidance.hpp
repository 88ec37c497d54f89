// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowsteer/classifier.hpp"
#include "flowsteer/field.hpp"
#include "flowsteer/nn.hpp"
#include "flowsteer/trace.hpp"

namespace flowsteer {

// ---------------------------------------------------------------------------
// Degradations

enum class DegradationKind { kBoxMask, kGaussianBlur, kDownsample, kAdditiveNoise, kCompose };

const char* degradation_name(DegradationKind k);

/// Forward operator on [H, W] images (batches are rows of H*W values).
/// Additive noise is part of apply() but not of apply_linear()/adjoint().
struct DegradationOp {
  DegradationKind kind = DegradationKind::kBoxMask;
  std::size_t height = 0, width = 0;
  // box-mask: rectangle that is zeroed
  std::size_t top = 0, left = 0, box_h = 0, box_w = 0;
  // gaussian-blur
  Tensor kernel;
  // downsample
  std::size_t factor = 1;
  // additive-noise
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
  std::vector<DegradationOp> children;

  static DegradationOp box_mask(std::size_t h, std::size_t w, std::size_t top, std::size_t left, std::size_t box_h,
                                std::size_t box_w);
  static DegradationOp centered_box_mask(std::size_t h, std::size_t w, std::size_t box);
  static DegradationOp gaussian_blur(std::size_t h, std::size_t w, std::size_t k, double sigma);
  static DegradationOp downsample(std::size_t h, std::size_t w, std::size_t factor);
  static DegradationOp additive_noise(std::size_t h, std::size_t w, double sigma, std::uint64_t seed);
  static DegradationOp compose(std::vector<DegradationOp> ops);

  std::size_t out_height() const;
  std::size_t out_width() const;
  bool changes_shape() const { return out_height() != height || out_width() != width; }

  Tensor apply_image(const Tensor& img, std::uint64_t stream = 0) const;
  Tensor apply_linear_image(const Tensor& img) const;
  Tensor adjoint_image(const Tensor& g) const;

  /// Row-wise versions over [B, H*W]; row b uses noise stream b.
  Tensor apply(const Tensor& batch) const;
  Tensor apply_linear(const Tensor& batch) const;
  Tensor adjoint(const Tensor& batch) const;
  /// Maps an observation back to image size for display and PSNR baselines
  /// (bilinear upsampling for downsample, identity otherwise).
  Tensor lift(const Tensor& batch) const;
};

/// Normalized K x K Gaussian kernel.
Tensor gaussian_kernel(std::size_t k, double sigma);

// ---------------------------------------------------------------------------
// Costs

enum class CostKind { kMseToTarget, kDegradedMse, kMaskedMse, kClassifierNll };

const char* cost_name(CostKind k);

struct CostEval {
  double value = 0.0;
  Tensor grad;  // d value / d x0_hat
  /// Squared residual without the weight; NaN for the classifier cost.
  double energy = kMissing;
};

/// Costs sum over every row and coordinate, times `weight`.
struct CostFunction {
  CostKind kind = CostKind::kMseToTarget;
  Tensor target;  // reference [B, D], or the observation [B, D'] for degraded-mse
  std::shared_ptr<const DegradationOp> degradation;
  Tensor mask;  // [B, D]; 1 where the residual counts
  std::shared_ptr<const Classifier> classifier;
  std::vector<int> classes;
  double weight = 1.0;

  static CostFunction mse(Tensor target, double weight = 1.0);
  static CostFunction degraded(std::shared_ptr<const DegradationOp> op, Tensor observation, double weight = 1.0);
  static CostFunction masked(Tensor target, Tensor mask, double weight = 1.0);
  static CostFunction classifier_nll(std::shared_ptr<const Classifier> clf, std::vector<int> classes,
                                     double weight = 1.0);

  CostEval evaluate(const Tensor& x0_hat) const;
  /// Starting point used by noise blending: reference, lifted observation, or zeros.
  Tensor initial_guess(const Shape& shape) const;
};

// ---------------------------------------------------------------------------
// Steering

enum class SteerMode { kFlowchef, kStepwiseBackprop, kFullChainBackprop, kUnguided };

const char* steer_mode_name(SteerMode m);
SteerMode parse_steer_mode(const std::string& s);

struct SteeringConfig {
  SteerMode mode = SteerMode::kFlowchef;
  int T = 200;
  /// Inner optimizer updates per outer step; 0 disables guidance.
  int N = 1;
  double guidance_scale = 500.0;
  double learning_rate = 1.0;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  AdamConfig adam;
  /// Editing gates in outer-step units; min_T < 0 means T.
  int min_T = -1;
  int max_full_steps_T = 0;
  /// Velocity blend factor s for editing.
  double edit_scale = 0.0;
  /// Full-chain mode: outer optimization iterations and noise blend.
  int chain_iterations = 20;
  double chain_blend = 0.0;
  long max_stored_states = 4096;
  int snapshot_stride = 0;

  /// Per-update step size s' = learning_rate * guidance_scale.
  double step_size() const { return learning_rate * guidance_scale; }
  int resolved_min_T() const { return min_T < 0 ? T : min_T; }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Raised when a state or update becomes non-finite. Carries the trace
/// recorded up to the failing step.
class NumericAbort : public std::runtime_error {
 public:
  NumericAbort(const std::string& what, int step, double grad_norm)
      : std::runtime_error(what), step(step), grad_norm(grad_norm) {}
  int step;
  double grad_norm;
  TrajectoryTrace partial;
};

struct SteerResult {
  Tensor x0;
  TrajectoryTrace trace;
};

/// Details of one flowchef_step for tracing.
struct StepReport {
  CostEval first;  // cost at the unmodified x0_hat
  Tensor x0_hat;   // x_t + t v before any update
};

/// One outer step of gradient-skipping guidance: v = u(x_t, t) once, N
/// optimizer updates on x_t with the cost gradient taken at x0_hat = x_t + t v,
/// then x_t + dt v. Exactly one field evaluation and no backward pass.
Tensor flowchef_step(const Field& field, const Tensor& x_t, double t, double dt, const CostFunction& cost, int N,
                     Optimizer* opt, EvalCounters& counters, std::span<const int> labels = {},
                     StepReport* report = nullptr, int step_index = 0);

/// Gradient-skipping guidance over the descending grid.
SteerResult steer(const Field& field, const Tensor& x_T, const CostFunction& cost, const SteeringConfig& cfg,
                  std::span<const int> labels = {});

/// Baseline: cost gradient with respect to x_t by reverse mode through
/// x0_hat = x_t + t u(x_t, t), re-evaluating the field every inner update.
SteerResult steer_backprop_stepwise(const Field& field, const Tensor& x_T, const CostFunction& cost,
                                    const SteeringConfig& cfg, std::span<const int> labels = {});

/// d cost(x0_hat) / d x_t at a single point, with x0_hat = x_t + t u(x_t, t).
Tensor stepwise_gradient(const Field& field, const Tensor& x_t, double t, const CostFunction& cost,
                         std::span<const int> labels = {});

/// Baseline: optimizes x_T by differentiating the whole T-step Euler chain.
SteerResult steer_backprop_full_chain(const Field& field, const Tensor& x_T, const CostFunction& cost,
                                      const SteeringConfig& cfg, std::span<const int> labels = {});

/// d cost(x_0) / d x_T through the full chain from x_T.
Tensor full_chain_gradient(const Field& field, const Tensor& x_T, int T, const CostFunction& cost,
                           std::span<const int> labels = {});

/// Dispatches on cfg.mode; kUnguided is plain Euler sampling with cost tracing.
SteerResult run_steering(const Field& field, const Tensor& x_T, const CostFunction& cost, const SteeringConfig& cfg,
                         std::span<const int> labels = {});

/// Masked editing with velocity blending.
///
/// mask is 1 on the region to preserve and 0 on the region free to change.
/// Per step: v = v_edit + (1 - mask) (v_edit - v_base) s. Guidance runs on
/// steps k >= T - min_T, and uses an all-ones mask on steps k < max_full_steps_T:
///
///   k:      0 ........ T-min_T ........ T-1
///   guide:  off        on ............. on
///   mask:   ones while k < max_full_steps_T, then `mask`
SteerResult edit(const Field& field, const Tensor& x_T, const Tensor& reference, const Tensor& mask, int base_label,
                 int edit_label, const SteeringConfig& cfg, double cost_weight = 1.0);

}  // namespace flowsteer
