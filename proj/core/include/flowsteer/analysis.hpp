// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "flowsteer/field.hpp"
#include "flowsteer/guidance.hpp"
#include "flowsteer/rng.hpp"
#include "flowsteer/trace.hpp"

namespace flowsteer {

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// Ordinary least squares y = slope * x + intercept.
LinearFit least_squares(std::span<const double> x, std::span<const double> y);

struct DecayFit {
  double slope = 0.0;  // d ln E / d(elapsed time)
  double intercept = 0.0;
  double r2 = 0.0;
  int window_begin = 0;
  int window_end = 0;  // exclusive
};

/// Elapsed time runs from 0 at t = 1 to 1 at t = 0, so decaying error gives a
/// negative slope.
struct ErrorDynamics {
  DecayFit fit;
  std::vector<double> elapsed;   // interval midpoints
  std::vector<double> dE_dt;     // finite difference per interval
  std::vector<double> residual;  // dE/dt + 4 s E at the midpoint
  double residual_rms = 0.0;
  double mean_abs_dE_dt = 0.0;
};

/// Fits ln E over trace rows [window_begin, window_end) (end < 0: all rows),
/// skipping rows with E < 1e-12. The trace must come from mse-to-target guidance.
ErrorDynamics error_dynamics(const TrajectoryTrace& trace, double s, int window_begin = 0, int window_end = -1);

struct GradientSimilarity {
  std::vector<double> t;
  /// cos(grad wrt x_t, grad wrt x0_hat); NaN where either gradient is zero.
  std::vector<double> cosine;
  /// ||t J^T g|| / ||g||; NaN when the state exceeds kCorrectionGuard values.
  std::vector<double> correction;
};

inline constexpr std::size_t kCorrectionGuard = 64;

/// Follows the gradient-skipping trajectory of cfg and compares both gradients
/// at every step, ending with the t = 0 row.
GradientSimilarity gradient_similarity(const Field& field, const Tensor& x_T, const CostFunction& cost,
                                       const SteeringConfig& cfg, std::span<const int> labels = {});

/// Mean over chains, steps and coordinates of (v_k - (x_0 - x_T))^2.
double straightness(const Field& field, Rng& rng, std::size_t chains, int T, std::span<const int> labels = {});

struct ConvergenceFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  /// Every error is at rounding level; slope and intercept are not meaningful.
  bool exact = false;
  std::vector<int> step_counts;
  std::vector<double> errors;  // relative endpoint errors
};

/// Euler endpoint error at T, 2T, 4T, 8T against the extrapolated reference
/// 2 x(16T) - x(8T); slope of ln error against ln dt.
ConvergenceFit convergence_order(const Field& field, const Tensor& x_T, int T, std::span<const int> labels = {});

inline constexpr double kPsnrCap = 99.0;

double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);
/// Mean SSIM over valid 7x7 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03, L 1).
double ssim(const Tensor& a, const Tensor& b);

struct MetricReport {
  std::vector<double> psnr;
  std::vector<double> ssim;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

/// Per-row metrics for image batches [B, H*W].
MetricReport image_metrics(const Tensor& output, const Tensor& reference, std::size_t height, std::size_t width);

/// PSNR restricted to coordinates where mask is 1.
double masked_psnr(const Tensor& a, const Tensor& b, const Tensor& mask, double peak = 1.0);

}  // namespace flowsteer
