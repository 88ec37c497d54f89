// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace flowsteer {

Classifier::Classifier(std::size_t in_dim, std::size_t num_classes, const std::vector<std::size_t>& hidden, Rng& rng)
    : k_(num_classes) {
  if (num_classes < 2) throw std::invalid_argument("Classifier: need at least two classes");
  std::vector<std::size_t> widths{in_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(num_classes);
  mlp_ = Mlp(widths, rng);
}

ad::Var Classifier::log_probs(ad::Tape& tape, const Mlp::Bound& p, ad::Var x) const {
  return tape.log_softmax(Mlp::forward(tape, p, x));
}

Tensor Classifier::log_probs(const Tensor& x) const {
  ad::Tape tape;
  const auto p = mlp_.bind(tape, false);
  return tape.value(log_probs(tape, p, tape.constant(x)));
}

std::vector<int> Classifier::predict(const Tensor& x) const {
  const Tensor lp = log_probs(x);
  std::vector<int> out(lp.dim(0));
  for (std::size_t b = 0; b < lp.dim(0); ++b) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k_; ++j)
      if (lp.at(b, j) > lp.at(b, best)) best = j;
    out[b] = static_cast<int>(best);
  }
  return out;
}

std::vector<double> Classifier::probability(const Tensor& x, std::span<const int> classes) const {
  const Tensor lp = log_probs(x);
  if (classes.size() != lp.dim(0)) throw std::invalid_argument("Classifier::probability: one class per row");
  std::vector<double> out(lp.dim(0));
  for (std::size_t b = 0; b < lp.dim(0); ++b) out[b] = std::exp(lp.at(b, static_cast<std::size_t>(classes[b])));
  return out;
}

Classifier::NllResult Classifier::nll(const Tensor& x, std::span<const int> classes) const {
  ad::Tape tape;
  const auto p = mlp_.bind(tape, false);
  const ad::Var xv = tape.leaf(x);
  const ad::Var picked = tape.pick_labels(log_probs(tape, p, xv), std::vector<int>(classes.begin(), classes.end()));
  const ad::Var loss = tape.scale(tape.sum(picked), -1.0);
  NllResult r;
  r.value = tape.value(loss).item();
  r.grad = ad::backward(tape, loss)[xv];
  return r;
}

double accuracy(const std::vector<int>& predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("accuracy: size mismatch");
  if (predicted.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

Classifier train_classifier(const Dataset& ds, const TrainConfig& cfg, const std::vector<std::size_t>& hidden,
                            ClassifierReport* report, double holdout_fraction) {
  if (!ds.labeled()) throw std::invalid_argument("train_classifier: dataset has no labels");
  const std::set<int> distinct(ds.labels.begin(), ds.labels.end());
  if (distinct.size() < 2) throw std::invalid_argument("train_classifier: need at least two classes");
  const std::size_t k = std::max<std::size_t>(ds.num_classes, static_cast<std::size_t>(*distinct.rbegin()) + 1);

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto held = static_cast<std::size_t>(std::floor(holdout_fraction * static_cast<double>(ds.size())));
  const std::vector<std::size_t> train_idx(order.begin(), order.end() - static_cast<std::ptrdiff_t>(held));
  const std::vector<std::size_t> test_idx(order.end() - static_cast<std::ptrdiff_t>(held), order.end());
  const Dataset train = ds.select(train_idx);
  if (train.size() == 0) throw std::invalid_argument("train_classifier: no training rows");

  Classifier clf(ds.dim(), k, hidden, rng);
  Optimizer opt(cfg.optimizer, cfg.learning_rate, cfg.adam);
  ClassifierReport rep;
  for (int s = 0; s < cfg.steps; ++s) {
    std::vector<std::size_t> idx(cfg.batch);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(train.size()));
    const Dataset b = train.select(idx);
    ad::Tape tape;
    const auto p = clf.mlp().bind(tape, true);
    const ad::Var lp = clf.log_probs(tape, p, tape.constant(b.x0));
    const ad::Var loss =
        tape.scale(tape.sum(tape.pick_labels(lp, b.labels)), -1.0 / static_cast<double>(b.size()));
    const double value = tape.value(loss).item();
    if (!std::isfinite(value)) throw std::runtime_error("train_classifier: non-finite loss at step " + std::to_string(s));
    rep.losses.push_back(value);
    const auto g = ad::backward(tape, loss);
    std::vector<Tensor> grads;
    for (auto v : p.weights) grads.push_back(g[v]);
    for (auto v : p.biases) grads.push_back(g[v]);
    opt.step(clf.mlp().parameters(), grads);
  }
  rep.train_accuracy = accuracy(clf.predict(train.x0), train.labels);
  if (!test_idx.empty()) {
    const Dataset test = ds.select(test_idx);
    rep.heldout_accuracy = accuracy(clf.predict(test.x0), test.labels);
  }
  if (report) *report = std::move(rep);
  return clf;
}

}  // namespace flowsteer
