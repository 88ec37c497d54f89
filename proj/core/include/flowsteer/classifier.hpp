// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "flowsteer/autodiff.hpp"
#include "flowsteer/dataset.hpp"
#include "flowsteer/flow_model.hpp"
#include "flowsteer/nn.hpp"

namespace flowsteer {

/// MLP classifier p(c | x) on clean samples.
class Classifier {
 public:
  Classifier() = default;
  Classifier(std::size_t in_dim, std::size_t num_classes, const std::vector<std::size_t>& hidden, Rng& rng);

  std::size_t num_classes() const { return k_; }
  std::size_t in_dim() const { return mlp_.in_dim(); }

  /// Row-wise log-probabilities [B, K].
  Tensor log_probs(const Tensor& x) const;
  ad::Var log_probs(ad::Tape& tape, const Mlp::Bound& p, ad::Var x) const;
  std::vector<int> predict(const Tensor& x) const;
  /// p(classes[b] | x_b) for each row.
  std::vector<double> probability(const Tensor& x, std::span<const int> classes) const;

  struct NllResult {
    double value = 0.0;  // sum over rows of -log p(c_b | x_b)
    Tensor grad;         // d value / d x
  };
  NllResult nll(const Tensor& x, std::span<const int> classes) const;

  Mlp& mlp() { return mlp_; }
  const Mlp& mlp() const { return mlp_; }

 private:
  Mlp mlp_;
  std::size_t k_ = 0;
};

struct ClassifierReport {
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  std::vector<double> losses;
};

/// Trains on a shuffled split; the last holdout_fraction of rows is held out.
/// Rejects datasets with fewer than two distinct labels.
Classifier train_classifier(const Dataset& ds, const TrainConfig& cfg, const std::vector<std::size_t>& hidden,
                            ClassifierReport* report = nullptr, double holdout_fraction = 0.2);

double accuracy(const std::vector<int>& predicted, std::span<const int> truth);

}  // namespace flowsteer
