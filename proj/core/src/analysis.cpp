// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "flowsteer/flow_model.hpp"

namespace flowsteer {

LinearFit least_squares(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("least_squares: need two or more pairs");
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("least_squares: x has no spread");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (f.slope * x[i] + f.intercept);
    ss_res += r * r;
  }
  f.r2 = syy == 0.0 ? (ss_res == 0.0 ? 1.0 : 0.0) : std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
  return f;
}

ErrorDynamics error_dynamics(const TrajectoryTrace& trace, double s, int window_begin, int window_end) {
  const int rows = static_cast<int>(trace.rows.size());
  if (window_end < 0 || window_end > rows) window_end = rows;
  if (window_begin < 0) window_begin = 0;
  if (window_end - window_begin < 4) throw std::invalid_argument("error_dynamics: need at least 4 steps");
  for (int k = window_begin; k < window_end; ++k) {
    if (std::isnan(trace.rows[static_cast<std::size_t>(k)].energy)) {
      throw std::invalid_argument("error_dynamics: step " + std::to_string(k) + " has no E(t)");
    }
  }

  ErrorDynamics out;
  out.fit.window_begin = window_begin;
  out.fit.window_end = window_end;
  std::vector<double> xs, ys;
  for (int k = window_begin; k < window_end; ++k) {
    const auto& r = trace.rows[static_cast<std::size_t>(k)];
    if (r.energy < 1e-12) continue;
    xs.push_back(1.0 - r.t);
    ys.push_back(std::log(r.energy));
  }
  if (xs.size() >= 2) {
    const LinearFit lf = least_squares(xs, ys);
    out.fit.slope = lf.slope;
    out.fit.intercept = lf.intercept;
    out.fit.r2 = lf.r2;
  }

  double sq = 0.0, abs_sum = 0.0;
  for (int k = window_begin; k + 1 < window_end; ++k) {
    const auto& a = trace.rows[static_cast<std::size_t>(k)];
    const auto& b = trace.rows[static_cast<std::size_t>(k + 1)];
    const double h = a.t - b.t;
    const double d = (b.energy - a.energy) / h;
    const double e_mid = 0.5 * (a.energy + b.energy);
    const double res = d + 4.0 * s * e_mid;
    out.elapsed.push_back(1.0 - 0.5 * (a.t + b.t));
    out.dE_dt.push_back(d);
    out.residual.push_back(res);
    sq += res * res;
    abs_sum += std::abs(d);
  }
  const auto m = static_cast<double>(out.residual.size());
  out.residual_rms = std::sqrt(sq / m);
  out.mean_abs_dE_dt = abs_sum / m;
  return out;
}

namespace {

double correction_norm(const Field& field, const Tensor& x, double t, const Tensor& g, std::span<const int> labels) {
  if (x.size() > kCorrectionGuard) return kMissing;
  const Shape shape = x.shape();
  const Tensor jac = ad::jacobian(
      [&](ad::Tape& tape, ad::Var flat) {
        const ad::Var u = field.eval(tape, tape.reshape(flat, shape), t, labels);
        return tape.reshape(u, Shape{x.size()});
      },
      x.reshaped(Shape{x.size()}));
  const double gn = norm(g);
  if (gn == 0.0) return kMissing;
  // t J^T g with J = du/dx over the flattened state.
  const Tensor jt_g = matmul_tn(jac, g.reshaped(Shape{g.size(), 1}));
  return std::abs(t) * norm(jt_g) / gn;
}

}  // namespace

GradientSimilarity gradient_similarity(const Field& field, const Tensor& x_T, const CostFunction& cost,
                                       const SteeringConfig& cfg, std::span<const int> labels) {
  cfg.validate();
  GradientSimilarity out;
  std::unique_ptr<Optimizer> opt;
  if (cfg.N > 0 && cfg.step_size() > 0.0) opt = std::make_unique<Optimizer>(cfg.optimizer, cfg.step_size(), cfg.adam);
  EvalCounters scratch;
  Tensor x = x_T;
  const double dt = 1.0 / cfg.T;
  auto record = [&](const Tensor& state, double t) {
    const CostEval ce = cost.evaluate(estimate_x0(field, state, t, labels));
    const Tensor gx = stepwise_gradient(field, state, t, cost, labels);
    out.t.push_back(t);
    out.cosine.push_back(cosine(gx, ce.grad));
    out.correction.push_back(correction_norm(field, state, t, ce.grad, labels));
  };
  for (int k = 0; k < cfg.T; ++k) {
    const double t = static_cast<double>(cfg.T - k) / cfg.T;
    record(x, t);
    x = flowchef_step(field, x, t, dt, cost, cfg.N, opt.get(), scratch, labels, nullptr, k);
  }
  record(x, 0.0);
  return out;
}

double straightness(const Field& field, Rng& rng, std::size_t chains, int T, std::span<const int> labels) {
  if (chains == 0) throw std::invalid_argument("straightness: need at least one chain");
  if (T < 1) throw std::invalid_argument("straightness: T must be at least 1");
  const Tensor x_T = gaussian(rng, Shape{chains, field.dim()});
  Tensor x = x_T;
  const double dt = 1.0 / T;
  std::vector<Tensor> vs;
  vs.reserve(static_cast<std::size_t>(T));
  for (int k = 0; k < T; ++k) {
    const double t = static_cast<double>(T - k) / T;
    vs.push_back(field.eval(x, t, labels));
    x = axpy(x, dt, vs.back());
  }
  const Tensor chord = sub(x, x_T);
  double acc = 0.0;
  for (const auto& v : vs) acc += squared_norm(sub(v, chord));
  return acc / (static_cast<double>(T) * static_cast<double>(chord.size()));
}

ConvergenceFit convergence_order(const Field& field, const Tensor& x_T, int T, std::span<const int> labels) {
  if (T < 1) throw std::invalid_argument("convergence_order: T must be at least 1");
  auto solve = [&](int steps) { return euler_sample(field, x_T, steps, labels, false).x0; };
  const Tensor fine = solve(16 * T);
  const Tensor ref = axpy(scale(fine, 2.0), -1.0, solve(8 * T));
  if (!ref.all_finite()) throw std::domain_error("convergence_order: reference solution is not finite");
  const double ref_norm = std::max(norm(ref), 1e-300);

  ConvergenceFit out;
  std::vector<double> lx, ly;
  bool all_tiny = true;
  for (int m : {1, 2, 4, 8}) {
    const int steps = m * T;
    const double err = norm(sub(solve(steps), ref)) / ref_norm;
    out.step_counts.push_back(steps);
    out.errors.push_back(err);
    if (err > 1e-13) all_tiny = false;
    lx.push_back(std::log(1.0 / steps));
    ly.push_back(std::log(std::max(err, 1e-300)));
  }
  if (all_tiny) {
    out.exact = true;
    out.slope = kMissing;
    out.intercept = kMissing;
    out.r2 = kMissing;
    return out;
  }
  const LinearFit f = least_squares(lx, ly);
  out.slope = f.slope;
  out.intercept = f.intercept;
  out.r2 = f.r2;
  return out;
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("psnr: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  if (a.empty()) throw std::invalid_argument("psnr: empty images");
  const double mse = squared_norm(sub(a, b)) / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double masked_psnr(const Tensor& a, const Tensor& b, const Tensor& mask, double peak) {
  if (a.shape() != b.shape() || a.shape() != mask.shape()) throw std::invalid_argument("masked_psnr: shape mismatch");
  double se = 0.0, count = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mask[i] == 0.0) continue;
    se += (a[i] - b[i]) * (a[i] - b[i]);
    count += 1.0;
  }
  if (count == 0.0) throw std::invalid_argument("masked_psnr: empty mask");
  if (se == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / (se / count)));
}

double ssim(const Tensor& a, const Tensor& b) {
  constexpr std::size_t kWin = 7;
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("ssim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.rank() != 2 || a.dim(0) < kWin || a.dim(1) < kWin) {
    throw std::invalid_argument("ssim: need a grayscale image of side >= 7, got " + shape_str(a.shape()));
  }
  static const Tensor w = gaussian_kernel(kWin, 1.5);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const std::size_t h = a.dim(0) - kWin + 1, wd = a.dim(1) - kWin + 1;
  double total = 0.0;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < wd; ++j) {
      double ma = 0.0, mb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
      for (std::size_t p = 0; p < kWin; ++p) {
        for (std::size_t q = 0; q < kWin; ++q) {
          const double g = w.at(p, q);
          const double x = a.at(i + p, j + q), y = b.at(i + p, j + q);
          ma += g * x;
          mb += g * y;
          saa += g * x * x;
          sbb += g * y * y;
          sab += g * x * y;
        }
      }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  }
  return total / static_cast<double>(h * wd);
}

MetricReport image_metrics(const Tensor& output, const Tensor& reference, std::size_t height, std::size_t width) {
  if (output.shape() != reference.shape() || output.rank() != 2 || output.dim(1) != height * width) {
    throw std::invalid_argument("image_metrics: expected matching [B, H*W] batches");
  }
  MetricReport r;
  for (std::size_t b = 0; b < output.dim(0); ++b) {
    const Tensor x = output.row(b).reshaped(Shape{height, width});
    const Tensor y = reference.row(b).reshaped(Shape{height, width});
    r.psnr.push_back(psnr(x, y));
    r.ssim.push_back(ssim(x, y));
  }
  if (!r.psnr.empty()) {
    for (double v : r.psnr) r.mean_psnr += v;
    for (double v : r.ssim) r.mean_ssim += v;
    r.mean_psnr /= static_cast<double>(r.psnr.size());
    r.mean_ssim /= static_cast<double>(r.ssim.size());
  }
  return r;
}

}  // namespace flowsteer
