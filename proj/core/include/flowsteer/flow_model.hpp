// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowsteer/autodiff.hpp"
#include "flowsteer/dataset.hpp"
#include "flowsteer/field.hpp"
#include "flowsteer/nn.hpp"
#include "flowsteer/rng.hpp"
#include "flowsteer/trace.hpp"

namespace flowsteer {

/// Tag written into checkpoints: the network regresses x0 - x1.
inline constexpr const char* kFlowConvention = "x0-minus-x1";

struct VelocityFieldSpec {
  std::size_t data_dim = 2;
  std::vector<std::size_t> hidden{256, 256};
  /// sin/cos pairs at frequencies pi * 2^k / 2; must be even.
  std::size_t time_features = 8;
  /// 0 for an unconditional model.
  std::size_t num_classes = 0;
  std::size_t class_dim = 16;
  /// u = mlp(...) - x: the network only models the part of the velocity that
  /// is not the identity pull toward the origin.
  bool input_skip = false;
};

/// MLP velocity field on [x, time features, class embedding]. Conditional
/// models reserve one extra embedding row as the null label; unlabeled
/// evaluation uses it.
class VelocityField final : public Field {
 public:
  VelocityField() = default;
  VelocityField(const VelocityFieldSpec& spec, Rng& rng, bool zero_init = false);

  std::size_t dim() const override { return spec_.data_dim; }
  bool conditional() const override { return spec_.num_classes > 0; }
  std::size_t num_classes() const override { return spec_.num_classes; }
  const VelocityFieldSpec& spec() const { return spec_; }
  int null_label() const { return static_cast<int>(spec_.num_classes); }

  Tensor eval(const Tensor& x, double t, std::span<const int> labels = {}) const override;
  ad::Var eval(ad::Tape& tape, ad::Var x, double t, std::span<const int> labels = {}) const override;

  struct Bound {
    Mlp::Bound mlp;
    ad::Var table;  // invalid for unconditional models
  };
  Bound bind(ad::Tape& tape, bool trainable) const;
  /// Per-row times t_rows [B]; labels resolved (null label where < 0).
  ad::Var forward(ad::Tape& tape, const Bound& p, ad::Var x, const Tensor& t_rows,
                  std::span<const int> labels) const;
  Tensor forward(const Tensor& x, const Tensor& t_rows, std::span<const int> labels) const;

  std::vector<Tensor*> parameters();
  std::size_t parameter_count() const;

  Mlp& mlp() { return mlp_; }
  const Mlp& mlp() const { return mlp_; }
  Tensor& class_table() { return table_; }

  void save(const std::string& path) const;
  static VelocityField load(const std::string& path);

 private:
  std::vector<int> resolve_labels(std::span<const int> labels, std::size_t rows) const;

  VelocityFieldSpec spec_;
  Mlp mlp_;
  Tensor table_;  // [num_classes + 1, class_dim] when conditional
};

/// [B, 2k] sin/cos features of per-row times.
Tensor time_features(const Tensor& t_rows, std::size_t count);

/// (1 - t) x0 + t x1; t must lie in [0, 1].
Tensor interpolate(const Tensor& x0, const Tensor& x1, double t);
/// x_t + t u(x_t, t, c).
Tensor estimate_x0(const Field& field, const Tensor& x_t, double t, std::span<const int> labels = {});

struct TrainConfig {
  int steps = 2000;
  std::size_t batch = 128;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  AdamConfig adam;
  /// Probability of replacing a label by the null label (conditional models).
  double label_dropout = 0.1;
  std::uint64_t seed = 0;
};

struct TrainBatch {
  Tensor x0;
  Tensor x1;
  std::vector<int> labels;  // empty or one per row; negative = null label
};

/// Batch of rows drawn with replacement; x1 is the stored pair or fresh noise.
TrainBatch sample_batch(const Dataset& ds, Rng& rng, std::size_t batch);

/// mean_b || u(x_t, t_b, c_b) - (x0 - x1) ||^2 recorded on a tape.
ad::Var flow_matching_loss(ad::Tape& tape, const VelocityField& model, const VelocityField::Bound& p,
                           const TrainBatch& batch, const Tensor& t_rows);

/// Holds optimizer state across steps for one model.
class FlowTrainer {
 public:
  FlowTrainer(VelocityField& model, const TrainConfig& cfg);

  /// Draws t ~ U[0,1] per row and applies label dropout, then one update.
  /// Returns the batch loss before the update.
  double train_step(const TrainBatch& batch, Rng& rng);
  /// cfg.steps updates on batches drawn from ds. Returns per-step losses.
  std::vector<double> fit(const Dataset& ds, Rng& rng);

 private:
  VelocityField& model_;
  TrainConfig cfg_;
  Optimizer opt_;
  long step_ = 0;
};

struct SampleResult {
  Tensor x0;
  TrajectoryTrace trace;
};

/// Euler integration on t_k = k/T from t = 1 down to 0. With keep_estimates
/// off, trace rows omit the per-step x0_hat tensors.
SampleResult euler_sample(const Field& field, const Tensor& x_T, int T, std::span<const int> labels = {},
                          bool keep_estimates = true);

/// Couples fresh noise with the model's own samples. Conditional models draw
/// a uniform label per pair and keep it.
Dataset reflow(const Field& model, Rng& rng, std::size_t pairs, int T, std::size_t num_classes = 0);

}  // namespace flowsteer
