// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/guidance.hpp"

#include <cmath>
#include <sstream>

#include "flowsteer/flow_model.hpp"

namespace flowsteer {

// ---------------------------------------------------------------------------
// Degradations

const char* degradation_name(DegradationKind k) {
  switch (k) {
    case DegradationKind::kBoxMask: return "box-mask";
    case DegradationKind::kGaussianBlur: return "gaussian-blur";
    case DegradationKind::kDownsample: return "downsample";
    case DegradationKind::kAdditiveNoise: return "additive-noise";
    case DegradationKind::kCompose: return "compose";
  }
  return "?";
}

Tensor gaussian_kernel(std::size_t k, double sigma) {
  if (k % 2 == 0) throw std::invalid_argument("gaussian_kernel: size " + std::to_string(k) + " is even");
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  Tensor ker(Shape{k, k});
  const double c = static_cast<double>(k / 2);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
      ker.at(i, j) = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
      total += ker.at(i, j);
    }
  }
  return scale(ker, 1.0 / total);
}

DegradationOp DegradationOp::box_mask(std::size_t h, std::size_t w, std::size_t top, std::size_t left,
                                      std::size_t box_h, std::size_t box_w) {
  if (top + box_h > h || left + box_w > w) {
    std::ostringstream os;
    os << "box-mask: rectangle (" << top << ',' << left << ") + " << box_h << 'x' << box_w << " exceeds image "
       << h << 'x' << w;
    throw std::out_of_range(os.str());
  }
  DegradationOp op;
  op.kind = DegradationKind::kBoxMask;
  op.height = h;
  op.width = w;
  op.top = top;
  op.left = left;
  op.box_h = box_h;
  op.box_w = box_w;
  return op;
}

DegradationOp DegradationOp::centered_box_mask(std::size_t h, std::size_t w, std::size_t box) {
  if (box > h || box > w) throw std::out_of_range("box-mask: box larger than image");
  return box_mask(h, w, (h - box) / 2, (w - box) / 2, box, box);
}

DegradationOp DegradationOp::gaussian_blur(std::size_t h, std::size_t w, std::size_t k, double sigma) {
  if (k > std::min(h, w)) throw std::invalid_argument("gaussian-blur: kernel larger than image");
  DegradationOp op;
  op.kind = DegradationKind::kGaussianBlur;
  op.height = h;
  op.width = w;
  op.kernel = gaussian_kernel(k, sigma);
  return op;
}

DegradationOp DegradationOp::downsample(std::size_t h, std::size_t w, std::size_t factor) {
  if (factor == 0 || h % factor || w % factor) {
    throw std::invalid_argument("downsample: factor " + std::to_string(factor) + " does not divide " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  DegradationOp op;
  op.kind = DegradationKind::kDownsample;
  op.height = h;
  op.width = w;
  op.factor = factor;
  return op;
}

DegradationOp DegradationOp::additive_noise(std::size_t h, std::size_t w, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("additive-noise: sigma must be non-negative");
  DegradationOp op;
  op.kind = DegradationKind::kAdditiveNoise;
  op.height = h;
  op.width = w;
  op.noise_sigma = sigma;
  op.noise_seed = seed;
  return op;
}

DegradationOp DegradationOp::compose(std::vector<DegradationOp> ops) {
  if (ops.empty()) throw std::invalid_argument("compose: empty operator list");
  for (std::size_t i = 1; i < ops.size(); ++i) {
    if (ops[i].height != ops[i - 1].out_height() || ops[i].width != ops[i - 1].out_width()) {
      throw std::invalid_argument("compose: operator " + std::to_string(i) + " does not accept the previous output");
    }
  }
  DegradationOp op;
  op.kind = DegradationKind::kCompose;
  op.height = ops.front().height;
  op.width = ops.front().width;
  op.children = std::move(ops);
  return op;
}

std::size_t DegradationOp::out_height() const {
  if (kind == DegradationKind::kDownsample) return height / factor;
  if (kind == DegradationKind::kCompose) return children.back().out_height();
  return height;
}

std::size_t DegradationOp::out_width() const {
  if (kind == DegradationKind::kDownsample) return width / factor;
  if (kind == DegradationKind::kCompose) return children.back().out_width();
  return width;
}

namespace {

void check_image(const Tensor& img, std::size_t h, std::size_t w, const char* who) {
  if (img.rank() != 2 || img.dim(0) != h || img.dim(1) != w) {
    throw std::invalid_argument(std::string(who) + ": expected " + std::to_string(h) + "x" + std::to_string(w) +
                                " image, got " + shape_str(img.shape()));
  }
}

Tensor zero_box(const DegradationOp& op, const Tensor& img) {
  Tensor out = img;
  for (std::size_t i = op.top; i < op.top + op.box_h; ++i)
    for (std::size_t j = op.left; j < op.left + op.box_w; ++j) out.at(i, j) = 0.0;
  return out;
}

Tensor apply_impl(const DegradationOp& op, const Tensor& img, bool with_noise, std::uint64_t stream) {
  check_image(img, op.height, op.width, degradation_name(op.kind));
  switch (op.kind) {
    case DegradationKind::kBoxMask:
      return zero_box(op, img);
    case DegradationKind::kGaussianBlur:
      return conv2d(img, op.kernel);
    case DegradationKind::kDownsample:
      return avgpool(img, op.factor);
    case DegradationKind::kAdditiveNoise: {
      if (!with_noise || op.noise_sigma == 0.0) return img;
      Rng rng = Rng(op.noise_seed).split(stream);
      return axpy(img, op.noise_sigma, gaussian(rng, img.shape()));
    }
    case DegradationKind::kCompose: {
      Tensor x = img;
      for (const auto& c : op.children) x = apply_impl(c, x, with_noise, stream);
      return x;
    }
  }
  throw std::logic_error("unknown degradation");
}

Tensor adjoint_impl(const DegradationOp& op, const Tensor& g) {
  check_image(g, op.out_height(), op.out_width(), "adjoint");
  switch (op.kind) {
    case DegradationKind::kBoxMask:
      return zero_box(op, g);
    case DegradationKind::kGaussianBlur:
      return conv2d_adjoint(g, op.kernel);
    case DegradationKind::kDownsample:
      return avgpool_adjoint(g, op.factor);
    case DegradationKind::kAdditiveNoise:
      return g;
    case DegradationKind::kCompose: {
      Tensor x = g;
      for (auto it = op.children.rbegin(); it != op.children.rend(); ++it) x = adjoint_impl(*it, x);
      return x;
    }
  }
  throw std::logic_error("unknown degradation");
}

template <class F>
Tensor rowwise(const Tensor& batch, std::size_t h, std::size_t w, std::size_t oh, std::size_t ow, F&& f) {
  if (batch.rank() != 2 || batch.dim(1) != h * w) {
    throw std::invalid_argument("degradation: expected [B, " + std::to_string(h * w) + "], got " +
                                shape_str(batch.shape()));
  }
  const std::size_t rows = batch.dim(0);
  Tensor out(Shape{rows, oh * ow});
  for (std::size_t b = 0; b < rows; ++b) {
    const Tensor r = f(batch.row(b).reshaped(Shape{h, w}), b);
    std::copy(r.data().begin(), r.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * oh * ow));
  }
  return out;
}

}  // namespace

Tensor DegradationOp::apply_image(const Tensor& img, std::uint64_t stream) const {
  return apply_impl(*this, img, true, stream);
}

Tensor DegradationOp::apply_linear_image(const Tensor& img) const { return apply_impl(*this, img, false, 0); }

Tensor DegradationOp::adjoint_image(const Tensor& g) const { return adjoint_impl(*this, g); }

Tensor DegradationOp::apply(const Tensor& batch) const {
  return rowwise(batch, height, width, out_height(), out_width(),
                 [&](const Tensor& img, std::size_t b) { return apply_image(img, b); });
}

Tensor DegradationOp::apply_linear(const Tensor& batch) const {
  return rowwise(batch, height, width, out_height(), out_width(),
                 [&](const Tensor& img, std::size_t) { return apply_linear_image(img); });
}

Tensor DegradationOp::adjoint(const Tensor& batch) const {
  return rowwise(batch, out_height(), out_width(), height, width,
                 [&](const Tensor& g, std::size_t) { return adjoint_image(g); });
}

Tensor DegradationOp::lift(const Tensor& batch) const {
  if (!changes_shape()) return batch;
  const std::size_t f = height / out_height();
  return rowwise(batch, out_height(), out_width(), height, width,
                 [&](const Tensor& y, std::size_t) { return upsample_bilinear(y, f); });
}

// ---------------------------------------------------------------------------
// Costs

const char* cost_name(CostKind k) {
  switch (k) {
    case CostKind::kMseToTarget: return "mse-to-target";
    case CostKind::kDegradedMse: return "degraded-mse";
    case CostKind::kMaskedMse: return "masked-mse";
    case CostKind::kClassifierNll: return "classifier-nll";
  }
  return "?";
}

CostFunction CostFunction::mse(Tensor target, double weight) {
  CostFunction c;
  c.kind = CostKind::kMseToTarget;
  c.target = std::move(target);
  c.weight = weight;
  return c;
}

CostFunction CostFunction::degraded(std::shared_ptr<const DegradationOp> op, Tensor observation, double weight) {
  if (!op) throw std::invalid_argument("degraded-mse: missing degradation operator");
  CostFunction c;
  c.kind = CostKind::kDegradedMse;
  c.degradation = std::move(op);
  c.target = std::move(observation);
  c.weight = weight;
  return c;
}

CostFunction CostFunction::masked(Tensor target, Tensor mask, double weight) {
  if (target.shape() != mask.shape()) {
    throw std::invalid_argument("masked-mse: mask " + shape_str(mask.shape()) + " does not match target " +
                                shape_str(target.shape()));
  }
  CostFunction c;
  c.kind = CostKind::kMaskedMse;
  c.target = std::move(target);
  c.mask = std::move(mask);
  c.weight = weight;
  return c;
}

CostFunction CostFunction::classifier_nll(std::shared_ptr<const Classifier> clf, std::vector<int> classes,
                                          double weight) {
  CostFunction c;
  c.kind = CostKind::kClassifierNll;
  c.classifier = std::move(clf);
  c.classes = std::move(classes);
  c.weight = weight;
  return c;
}

CostEval CostFunction::evaluate(const Tensor& x0_hat) const {
  auto require_shape = [&](const Tensor& ref, const char* what) {
    if (ref.shape() != x0_hat.shape()) {
      throw std::invalid_argument(std::string(cost_name(kind)) + ": " + what + " " + shape_str(ref.shape()) +
                                  " does not match x0_hat " + shape_str(x0_hat.shape()));
    }
  };
  CostEval out;
  switch (kind) {
    case CostKind::kMseToTarget: {
      require_shape(target, "target");
      const Tensor r = sub(x0_hat, target);
      out.energy = squared_norm(r);
      out.value = weight * out.energy;
      out.grad = scale(r, 2.0 * weight);
      return out;
    }
    case CostKind::kMaskedMse: {
      require_shape(target, "target");
      const Tensor r = mul(sub(x0_hat, target), mask);
      out.energy = squared_norm(r);
      out.value = weight * out.energy;
      out.grad = scale(mul(r, mask), 2.0 * weight);
      return out;
    }
    case CostKind::kDegradedMse: {
      if (!degradation) throw std::invalid_argument("degraded-mse: missing degradation operator");
      const Tensor r = sub(degradation->apply_linear(x0_hat), target);
      out.energy = squared_norm(r);
      out.value = weight * out.energy;
      out.grad = scale(degradation->adjoint(r), 2.0 * weight);
      return out;
    }
    case CostKind::kClassifierNll: {
      if (!classifier) throw std::invalid_argument("classifier-nll: no classifier attached");
      if (classes.size() != x0_hat.dim(0)) {
        throw std::invalid_argument("classifier-nll: need one target class per row");
      }
      const auto r = classifier->nll(x0_hat, classes);
      out.value = weight * r.value;
      out.grad = scale(r.grad, weight);
      out.energy = kMissing;
      return out;
    }
  }
  throw std::logic_error("unknown cost");
}

Tensor CostFunction::initial_guess(const Shape& shape) const {
  switch (kind) {
    case CostKind::kMseToTarget:
    case CostKind::kMaskedMse:
      return target;
    case CostKind::kDegradedMse:
      return degradation->lift(target);
    case CostKind::kClassifierNll:
      break;
  }
  return Tensor(shape);
}

// ---------------------------------------------------------------------------
// Steering

const char* steer_mode_name(SteerMode m) {
  switch (m) {
    case SteerMode::kFlowchef: return "flowchef";
    case SteerMode::kStepwiseBackprop: return "stepwise-backprop";
    case SteerMode::kFullChainBackprop: return "full-chain-backprop";
    case SteerMode::kUnguided: return "unguided";
  }
  return "?";
}

SteerMode parse_steer_mode(const std::string& s) {
  for (auto m : {SteerMode::kFlowchef, SteerMode::kStepwiseBackprop, SteerMode::kFullChainBackprop,
                 SteerMode::kUnguided}) {
    if (s == steer_mode_name(m)) return m;
  }
  throw std::invalid_argument("unknown steering mode '" + s + "'");
}

void SteeringConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("steer." + field + ": " + why);
  };
  if (T < 1) fail("T", "must be at least 1");
  if (N < 0) fail("N", "must be non-negative");
  if (!(guidance_scale >= 0.0)) fail("scale", "must be non-negative");
  if (!(learning_rate >= 0.0)) fail("lr", "must be non-negative");
  if (min_T > T) fail("min_T", "must lie in [0, T]");
  if (max_full_steps_T < 0 || max_full_steps_T > T) fail("max_full_steps_T", "must lie in [0, T]");
  if (chain_iterations < 0) fail("chain_iterations", "must be non-negative");
  if (snapshot_stride < 0) fail("snapshot_stride", "must be non-negative");
}

namespace {

std::unique_ptr<Optimizer> guidance_optimizer(const SteeringConfig& cfg) {
  if (cfg.N == 0 || cfg.step_size() == 0.0) return nullptr;
  return std::make_unique<Optimizer>(cfg.optimizer, cfg.step_size(), cfg.adam);
}

void abort_if_nonfinite(const Tensor& x, const Tensor& grad, int step, const char* who) {
  if (x.all_finite()) return;
  const double gn = norm(grad);
  std::ostringstream os;
  os << who << ": non-finite state at step " << step << " (gradient norm " << gn << ")";
  throw NumericAbort(os.str(), step, gn);
}

// N updates of x toward lower cost(x + t v) with v held fixed. The first cost
// evaluation (at the incoming x) is reported for tracing.
void guided_updates(Tensor& x, const Tensor& v, double t, const CostFunction& cost, int N, Optimizer* opt,
                    StepReport* report, int step) {
  const int updates = opt ? N : 0;
  for (int n = 0; n < std::max(updates, report ? 1 : 0); ++n) {
    const Tensor x0_hat = axpy(x, t, v);
    const CostEval ce = cost.evaluate(x0_hat);
    if (n == 0 && report) {
      report->first = ce;
      report->x0_hat = x0_hat;
    }
    if (n >= updates) break;
    opt->step(x, ce.grad);
    abort_if_nonfinite(x, ce.grad, step, "flowchef");
  }
}

TraceRow make_row(int step, double t, const CostEval& ce, Tensor x0_hat, const EvalCounters& c) {
  TraceRow row;
  row.step = step;
  row.t = t;
  row.cost = ce.value;
  row.energy = ce.energy;
  row.grad_norm = ce.grad.empty() ? kMissing : norm(ce.grad);
  row.counters = c;
  row.x0_hat = std::move(x0_hat);
  return row;
}

void finish_trace(TrajectoryTrace& tr, const Tensor& x, const CostFunction& cost, int T) {
  tr.rows.push_back(make_row(T, 0.0, cost.evaluate(x), x, tr.counters));
}

bool snapshot_due(const SteeringConfig& cfg, int k) { return cfg.snapshot_stride > 0 && k % cfg.snapshot_stride == 0; }

}  // namespace

Tensor flowchef_step(const Field& field, const Tensor& x_t, double t, double dt, const CostFunction& cost, int N,
                     Optimizer* opt, EvalCounters& counters, std::span<const int> labels, StepReport* report,
                     int step_index) {
  if (!(t > 0.0 && t <= 1.0)) throw std::domain_error("flowchef_step: t must lie in (0, 1]");
  if (!(dt >= 0.0 && dt <= t)) throw std::domain_error("flowchef_step: dt must lie in [0, t]");
  const Tensor v = field.eval(x_t, t, labels);
  ++counters.forward;
  counters.note_stored(2);
  Tensor x = x_t;
  guided_updates(x, v, t, cost, N, opt, report, step_index);
  Tensor next = axpy(x, dt, v);
  abort_if_nonfinite(next, report ? report->first.grad : Tensor(), step_index, "flowchef");
  return next;
}

SteerResult steer(const Field& field, const Tensor& x_T, const CostFunction& cost, const SteeringConfig& cfg,
                  std::span<const int> labels) {
  cfg.validate();
  if (cfg.mode != SteerMode::kFlowchef) throw std::invalid_argument("steer: mode must be flowchef");
  SteerResult res;
  auto& tr = res.trace;
  tr.snapshot_stride = cfg.snapshot_stride;
  auto opt = guidance_optimizer(cfg);
  Tensor x = x_T;
  const double dt = 1.0 / cfg.T;
  int k = 0;
  try {
    for (; k < cfg.T; ++k) {
      const double t = static_cast<double>(cfg.T - k) / cfg.T;
      StepReport rep;
      Tensor next = flowchef_step(field, x, t, dt, cost, cfg.N, opt.get(), tr.counters, labels, &rep, k);
      TraceRow row = make_row(k, t, rep.first, std::move(rep.x0_hat), tr.counters);
      if (snapshot_due(cfg, k)) row.x_t = x;
      tr.rows.push_back(std::move(row));
      x = std::move(next);
    }
  } catch (NumericAbort& e) {
    tr.aborted_at = k;
    e.partial = tr;
    throw;
  }
  finish_trace(tr, x, cost, cfg.T);
  res.x0 = std::move(x);
  return res;
}

Tensor stepwise_gradient(const Field& field, const Tensor& x_t, double t, const CostFunction& cost,
                         std::span<const int> labels) {
  ad::Tape tape;
  const ad::Var xv = tape.leaf(x_t);
  const ad::Var x0v = tape.add(xv, tape.scale(field.eval(tape, xv, t, labels), t));
  const CostEval ce = cost.evaluate(tape.value(x0v));
  return ad::vjp(tape, x0v, ce.grad)[xv];
}

SteerResult steer_backprop_stepwise(const Field& field, const Tensor& x_T, const CostFunction& cost,
                                    const SteeringConfig& cfg, std::span<const int> labels) {
  cfg.validate();
  SteerResult res;
  auto& tr = res.trace;
  tr.snapshot_stride = cfg.snapshot_stride;
  auto opt = guidance_optimizer(cfg);
  Tensor x = x_T;
  const double dt = 1.0 / cfg.T;
  int k = 0;
  try {
    for (; k < cfg.T; ++k) {
      const double t = static_cast<double>(cfg.T - k) / cfg.T;
      TraceRow row;
      const Tensor x_start = x;
      for (int n = 0; n < cfg.N; ++n) {
        ad::Tape tape;
        const ad::Var xv = tape.leaf(x);
        const ad::Var x0v = tape.add(xv, tape.scale(field.eval(tape, xv, t, labels), t));
        ++tr.counters.forward;
        tr.counters.note_stored(3);
        const CostEval ce = cost.evaluate(tape.value(x0v));
        const Tensor gx = ad::vjp(tape, x0v, ce.grad)[xv];
        ++tr.counters.backward;
        if (n == 0) {
          row = make_row(k, t, ce, tape.value(x0v), tr.counters);
          row.cosine = cosine(gx, ce.grad);
          row.grad_norm = norm(gx);
        }
        if (opt) {
          opt->step(x, gx);
          abort_if_nonfinite(x, gx, k, "stepwise-backprop");
        }
      }
      const Tensor v = field.eval(x, t, labels);
      ++tr.counters.forward;
      if (cfg.N == 0) row = make_row(k, t, cost.evaluate(axpy(x, t, v)), axpy(x, t, v), tr.counters);
      row.counters = tr.counters;
      if (snapshot_due(cfg, k)) row.x_t = x_start;
      tr.rows.push_back(std::move(row));
      x = axpy(x, dt, v);
      abort_if_nonfinite(x, Tensor(), k, "stepwise-backprop");
    }
  } catch (NumericAbort& e) {
    tr.aborted_at = k;
    e.partial = tr;
    throw;
  }
  finish_trace(tr, x, cost, cfg.T);
  res.x0 = std::move(x);
  return res;
}

namespace {

// Records the T-step Euler chain from a leaf on the tape; returns (leaf, x_0).
std::pair<ad::Var, ad::Var> record_chain(ad::Tape& tape, const Field& field, const Tensor& x_T, int T,
                                         std::span<const int> labels) {
  const ad::Var leaf = tape.leaf(x_T);
  ad::Var x = leaf;
  const double dt = 1.0 / T;
  for (int k = 0; k < T; ++k) {
    const double t = static_cast<double>(T - k) / T;
    x = tape.add(x, tape.scale(field.eval(tape, x, t, labels), dt));
  }
  return {leaf, x};
}

void check_chain_guard(int T, long guard) {
  if (T > guard) {
    throw std::length_error("full-chain-backprop: chain needs " + std::to_string(T) +
                            " stored states, above the guard of " + std::to_string(guard));
  }
}

}  // namespace

Tensor full_chain_gradient(const Field& field, const Tensor& x_T, int T, const CostFunction& cost,
                           std::span<const int> labels) {
  if (T < 1) throw std::invalid_argument("full_chain_gradient: T must be at least 1");
  ad::Tape tape;
  const auto [leaf, x0] = record_chain(tape, field, x_T, T, labels);
  const CostEval ce = cost.evaluate(tape.value(x0));
  return ad::vjp(tape, x0, ce.grad)[leaf];
}

SteerResult steer_backprop_full_chain(const Field& field, const Tensor& x_T, const CostFunction& cost,
                                      const SteeringConfig& cfg, std::span<const int> labels) {
  cfg.validate();
  check_chain_guard(cfg.T, cfg.max_stored_states);
  SteerResult res;
  auto& tr = res.trace;
  tr.snapshot_stride = cfg.snapshot_stride;
  auto opt = guidance_optimizer(cfg);
  Tensor z = x_T;
  if (cfg.chain_blend != 0.0) z = axpy(scale(x_T, 1.0 - cfg.chain_blend), cfg.chain_blend, cost.initial_guess(x_T.shape()));

  const int iters = opt ? cfg.chain_iterations : 0;
  for (int it = 0; it < iters; ++it) {
    ad::Tape tape;
    const auto [leaf, x0] = record_chain(tape, field, z, cfg.T, labels);
    tr.counters.forward += cfg.T;
    tr.counters.note_stored(cfg.T);
    const CostEval ce = cost.evaluate(tape.value(x0));
    tr.outer_costs.push_back(ce.value);
    const Tensor g = ad::vjp(tape, x0, ce.grad)[leaf];
    tr.counters.backward += cfg.T;
    opt->step(z, g);
    if (!z.all_finite()) {
      NumericAbort e("full-chain-backprop: non-finite noise at iteration " + std::to_string(it), it, norm(g));
      tr.aborted_at = it;
      e.partial = tr;
      throw e;
    }
  }

  // Final sampling pass from the optimized noise, traced like the other modes.
  Tensor x = z;
  const double dt = 1.0 / cfg.T;
  for (int k = 0; k < cfg.T; ++k) {
    const double t = static_cast<double>(cfg.T - k) / cfg.T;
    const Tensor v = field.eval(x, t, labels);
    ++tr.counters.forward;
    Tensor x0_hat = axpy(x, t, v);
    const CostEval ce = cost.evaluate(x0_hat);
    TraceRow row = make_row(k, t, ce, std::move(x0_hat), tr.counters);
    if (snapshot_due(cfg, k)) row.x_t = x;
    tr.rows.push_back(std::move(row));
    x = axpy(x, dt, v);
  }
  finish_trace(tr, x, cost, cfg.T);
  tr.outer_costs.push_back(tr.rows.back().cost);
  res.x0 = std::move(x);
  return res;
}

SteerResult run_steering(const Field& field, const Tensor& x_T, const CostFunction& cost, const SteeringConfig& cfg,
                         std::span<const int> labels) {
  switch (cfg.mode) {
    case SteerMode::kFlowchef:
      return steer(field, x_T, cost, cfg, labels);
    case SteerMode::kStepwiseBackprop:
      return steer_backprop_stepwise(field, x_T, cost, cfg, labels);
    case SteerMode::kFullChainBackprop:
      return steer_backprop_full_chain(field, x_T, cost, cfg, labels);
    case SteerMode::kUnguided: {
      SteeringConfig off = cfg;
      off.mode = SteerMode::kFlowchef;
      off.N = 0;
      return steer(field, x_T, cost, off, labels);
    }
  }
  throw std::logic_error("unknown steering mode");
}

SteerResult edit(const Field& field, const Tensor& x_T, const Tensor& reference, const Tensor& mask, int base_label,
                 int edit_label, const SteeringConfig& cfg, double cost_weight) {
  cfg.validate();
  if (!field.conditional()) throw std::invalid_argument("edit: requires a conditional model");
  if (mask.shape() != x_T.shape() || reference.shape() != x_T.shape()) {
    throw std::invalid_argument("edit: mask and reference must match x_T " + shape_str(x_T.shape()));
  }
  for (double m : mask.data()) {
    if (m != 0.0 && m != 1.0) throw std::invalid_argument("edit: mask values must be 0 or 1");
  }
  const std::size_t rows = x_T.dim(0);
  const std::vector<int> edit_labels(rows, edit_label), base_labels(rows, base_label);
  const CostFunction preserve = CostFunction::masked(reference, mask, cost_weight);
  const CostFunction full = CostFunction::masked(reference, Tensor(mask.shape(), 1.0), cost_weight);
  const int guide_from = cfg.T - cfg.resolved_min_T();

  SteerResult res;
  auto& tr = res.trace;
  tr.snapshot_stride = cfg.snapshot_stride;
  auto opt = guidance_optimizer(cfg);
  Tensor x = x_T;
  const double dt = 1.0 / cfg.T;
  const double s = cfg.edit_scale;
  int k = 0;
  try {
    for (; k < cfg.T; ++k) {
      const double t = static_cast<double>(cfg.T - k) / cfg.T;
      const Tensor v_edit = field.eval(x, t, edit_labels);
      const Tensor v_base = field.eval(x, t, base_labels);
      tr.counters.forward += 2;
      tr.counters.note_stored(3);
      Tensor v(v_edit.shape());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = v_edit[i] + (1.0 - mask[i]) * (v_edit[i] - v_base[i]) * s;

      const bool active = k >= guide_from;
      const CostFunction& cost = k < cfg.max_full_steps_T ? full : preserve;
      StepReport rep;
      const Tensor x_start = x;
      guided_updates(x, v, t, cost, active ? cfg.N : 0, active ? opt.get() : nullptr, &rep, k);
      TraceRow row = make_row(k, t, rep.first, std::move(rep.x0_hat), tr.counters);
      if (snapshot_due(cfg, k)) row.x_t = x_start;
      tr.rows.push_back(std::move(row));
      x = axpy(x, dt, v);
      abort_if_nonfinite(x, Tensor(), k, "edit");
    }
  } catch (NumericAbort& e) {
    tr.aborted_at = k;
    e.partial = tr;
    throw;
  }
  finish_trace(tr, x, preserve, cfg.T);
  res.x0 = std::move(x);
  return res;
}

}  // namespace flowsteer
