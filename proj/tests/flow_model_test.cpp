// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "flowsteer/analysis.hpp"
#include "flowsteer/dataset.hpp"
#include "flowsteer/field.hpp"
#include "flowsteer/flow_model.hpp"
#include "test_models.hpp"

namespace flowsteer {
namespace {

namespace fs = std::filesystem;

double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(end),
                         0.0) /
         static_cast<double>(end - begin);
}

TEST(Interpolate, EndpointsAndMidpoint) {
  const Tensor x0 = Tensor::vector({0, 0}), x1 = Tensor::vector({2, 4});
  EXPECT_EQ(interpolate(x0, x1, 0.0), x0);
  EXPECT_EQ(interpolate(x0, x1, 1.0), x1);
  EXPECT_EQ(interpolate(x0, x1, 0.5), Tensor::vector({1, 2}));
}

TEST(Interpolate, AffineInTime) {
  const Tensor x0 = Tensor::vector({1, -3, 0.5}), x1 = Tensor::vector({-2, 7, 4});
  const double a = 0.25, b = 0.75;
  EXPECT_EQ(interpolate(x0, x1, (a + b) / 2), scale(add(interpolate(x0, x1, a), interpolate(x0, x1, b)), 0.5));
}

TEST(Interpolate, RejectsOutOfRangeTime) {
  const Tensor x = Tensor::vector({1});
  EXPECT_THROW(interpolate(x, x, -0.1), std::domain_error);
  EXPECT_THROW(interpolate(x, x, 1.5), std::domain_error);
}

TEST(VelocityField, Dimensions) {
  Rng rng(1);
  VelocityFieldSpec spec;
  spec.data_dim = 3;
  spec.hidden = {8};
  spec.num_classes = 4;
  spec.class_dim = 5;
  const VelocityField m(spec, rng);
  EXPECT_EQ(m.mlp().in_dim(), 3u + 8u + 5u);
  EXPECT_EQ(m.mlp().out_dim(), 3u);
  const std::vector<int> labels{0, 3};
  EXPECT_EQ(m.eval(gaussian(rng, Shape{2, 3}), 0.5, labels).shape(), (Shape{2, 3}));
  const std::vector<int> bad{0, 4};
  EXPECT_THROW(m.eval(gaussian(rng, Shape{2, 3}), 0.5, bad), std::out_of_range);
}

TEST(VelocityField, TapeMatchesPlainEvaluation) {
  Rng rng(2);
  VelocityFieldSpec spec;
  spec.data_dim = 4;
  spec.hidden = {16, 16};
  const VelocityField m(spec, rng);
  const Tensor x = gaussian(rng, Shape{5, 4});
  ad::Tape tape;
  EXPECT_EQ(tape.value(m.eval(tape, tape.leaf(x), 0.3)), m.eval(x, 0.3));
}

TEST(Training, IdealPredictorHasZeroLoss) {
  Rng rng(3);
  VelocityFieldSpec spec;
  spec.hidden = {8};
  VelocityField m(spec, rng, true);
  // Zero weights predict 0, which is exactly x0 - x1 when the pair coincides.
  const Tensor x = gaussian(rng, Shape{16, 2});
  TrainConfig cfg;
  FlowTrainer trainer(m, cfg);
  EXPECT_EQ(trainer.train_step(TrainBatch{x, x, {}}, rng), 0.0);
}

TEST(Training, ParameterGradientMatchesFiniteDifferences) {
  Rng rng(4);
  VelocityFieldSpec spec;
  spec.hidden = {12, 12};
  const VelocityField model(spec, rng);
  const TrainBatch batch{gaussian(rng, Shape{8, 2}), gaussian(rng, Shape{8, 2}), {}};
  const Tensor t_rows = uniform(rng, Shape{8});
  auto f = [&](ad::Tape& tape, ad::Var b) {
    auto p = model.bind(tape, false);
    p.mlp.biases[1] = b;
    return flow_matching_loss(tape, model, p, batch, t_rows);
  };
  EXPECT_LT(ad::grad_check(f, model.mlp().biases[1]).max_rel_error, 1e-5);
}

TEST(Training, LossDecreasesOnGaussMix) {
  Rng data_rng(5), init(6), train_rng(7);
  const Dataset ds = gauss_mix_2d(data_rng, 4000);
  VelocityFieldSpec spec;
  spec.hidden = {64, 64};
  VelocityField m(spec, init);
  TrainConfig cfg;
  cfg.steps = 500;
  cfg.batch = 128;
  cfg.learning_rate = 1e-3;
  FlowTrainer trainer(m, cfg);
  const auto losses = trainer.fit(ds, train_rng);
  ASSERT_EQ(losses.size(), 500u);
  EXPECT_LT(mean_of(losses, 450, 500), mean_of(losses, 0, 50));
  for (const Tensor* p : m.parameters()) EXPECT_TRUE(p->all_finite());
}

TEST(Training, NonFiniteLossAbortsWithStep) {
  Rng rng(8);
  VelocityFieldSpec spec;
  spec.hidden = {4};
  VelocityField m(spec, rng);
  Tensor bad = gaussian(rng, Shape{4, 2});
  bad[3] = std::nan("");
  FlowTrainer trainer(m, TrainConfig{});
  try {
    trainer.train_step(TrainBatch{bad, gaussian(rng, Shape{4, 2}), {}}, rng);
    FAIL() << "expected an abort";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(EulerSample, ZeroFieldIsIdentity) {
  Rng rng(9);
  const Tensor x_T = gaussian(rng, Shape{3, 4});
  const auto res = euler_sample(ConstantField(Tensor(Shape{4})), x_T, 17);
  EXPECT_EQ(res.x0, x_T);
  ASSERT_EQ(res.trace.rows.size(), 18u);
  EXPECT_EQ(res.trace.rows.front().t, 1.0);
  EXPECT_EQ(res.trace.rows.back().t, 0.0);
  EXPECT_EQ(res.trace.counters.forward, 17);
}

TEST(EulerSample, ConstantFieldTelescopes) {
  Rng rng(10);
  const Tensor x_T = gaussian(rng, Shape{2, 3});
  const Tensor c = Tensor::vector({0.5, -1.25, 3.0});
  const auto res = euler_sample(ConstantField(c), x_T, 50);
  EXPECT_LT(max_abs_diff(res.x0, add(x_T, tile_rows(c, 2))), 1e-13);
}

TEST(EulerSample, LinearContractionClosedForm) {
  Rng rng(11);
  const Tensor x_T = gaussian(rng, Shape{1, 5});
  const AffineField f(scale(identity(5), -1.0), Tensor(Shape{5}));
  for (int T : {1, 10, 100}) {
    const Tensor expect = scale(x_T, std::pow(1.0 - 1.0 / T, T));
    EXPECT_LT(max_abs_diff(euler_sample(f, x_T, T).x0, expect), 1e-12) << "T=" << T;
  }
}

TEST(EulerSample, RejectsZeroSteps) {
  EXPECT_THROW(euler_sample(ConstantField(Tensor(Shape{2})), Tensor(Shape{1, 2}), 0), std::invalid_argument);
}

TEST(EstimateX0, ZeroTimeAndSinglePair) {
  Rng rng(12);
  const Tensor x0 = gaussian(rng, Shape{1, 4}), x1 = gaussian(rng, Shape{1, 4});
  const ConstantField f(sub(x0, x1).reshaped(Shape{4}));
  EXPECT_EQ(estimate_x0(f, x1, 0.0), x1);
  for (double t : {1.0, 0.7, 0.3, 0.05}) {
    EXPECT_LT(max_abs_diff(estimate_x0(f, interpolate(x0, x1, t), t), x0), 1e-15) << "t=" << t;
  }
}

TEST(Reflow, ZeroPairsGivesEmptyDataset) {
  Rng rng(13);
  const Dataset ds = reflow(ConstantField(Tensor(Shape{2})), rng, 0, 10);
  EXPECT_EQ(ds.size(), 0u);
}

TEST(Reflow, PairsAreOwnSamples) {
  Rng rng(14);
  const Tensor c = Tensor::vector({1.0, -2.0});
  const Dataset ds = reflow(ConstantField(c), rng, 6, 10);
  ASSERT_EQ(ds.size(), 6u);
  EXPECT_LT(max_abs_diff(ds.x0, add(ds.x1, tile_rows(c, 6))), 1e-14);
}

TEST(Reflow, StraightModelStaysStraight) {
  // A constant field is exactly straight. Retraining on its reflow pairs must
  // keep the straightness score within 5% of the squared speed per coordinate.
  Rng rng(15), init(16), score_rng(17);
  const Tensor c = Tensor::vector({2.0, -1.0});
  const ConstantField straight(c);
  const Dataset pairs = reflow(straight, rng, 2000, 20);
  VelocityFieldSpec spec;
  spec.hidden = {32, 32};
  VelocityField m(spec, init);
  TrainConfig cfg;
  cfg.steps = 800;
  cfg.batch = 128;
  FlowTrainer trainer(m, cfg);
  trainer.fit(pairs, rng);
  Rng s1 = score_rng, s2 = score_rng;
  const double before = straightness(straight, s1, 256, 50);
  const double after = straightness(m, s2, 256, 50);
  const double speed_sq = squared_norm(c) / 2.0;
  EXPECT_LT(before, 1e-20);
  EXPECT_LT(std::abs(after - before), 0.05 * speed_sq);
}

TEST(Reflow, SecondRectificationIsStraighter) {
  const VelocityField one = testing::cached_model(testing::gauss_model_config(0));
  const VelocityField two = testing::cached_model(testing::gauss_model_config(1));
  Rng r1(18), r2(18);
  const double s1 = straightness(one, r1, 512, 100);
  const double s2 = straightness(two, r2, 512, 100);
  EXPECT_LT(s2, s1);
}

TEST(EstimateX0, TrainedModelMatchesIntegration) {
  const VelocityField two = testing::cached_model(testing::gauss_model_config(1));
  Rng rng(19);
  const int T = 100;
  Tensor x = gaussian(rng, Shape{256, 2});
  for (int k = 0; k < T / 2; ++k) {
    const double t = static_cast<double>(T - k) / T;
    x = axpy(x, 1.0 / T, two.eval(x, t));
  }
  const Tensor x0_hat = estimate_x0(two, x, 0.5);
  Tensor end = x;
  for (int k = T / 2; k < T; ++k) {
    const double t = static_cast<double>(T - k) / T;
    end = axpy(end, 1.0 / T, two.eval(end, t));
  }
  EXPECT_LT(norm(sub(x0_hat, end)), 0.1 * norm(x0_hat));
}

TEST(Sampling, ConditionalLandsInLabelBasin) {
  const VelocityField m = testing::cached_model(testing::gauss_model_config(1, true));
  Rng rng(20);
  const std::size_t n = 400;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 8);
  const Tensor x0 = euler_sample(m, gaussian(rng, Shape{n, 2}), 100, labels, false).x0;
  const auto nearest = nearest_mode(x0, GaussMixSpec{});
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) hits += nearest[i] == labels[i];
  EXPECT_GE(static_cast<double>(hits) / n, 0.95);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(21);
  VelocityFieldSpec spec;
  spec.data_dim = 3;
  spec.hidden = {7, 5};
  spec.num_classes = 3;
  spec.class_dim = 4;
  const VelocityField m(spec, rng);
  const fs::path path = fs::temp_directory_path() / "flowsteer_ckpt_test.fsv";
  m.save(path.string());
  const VelocityField back = VelocityField::load(path.string());
  const Tensor x = gaussian(rng, Shape{4, 3});
  const std::vector<int> labels{0, 1, 2, -1};
  EXPECT_EQ(back.eval(x, 0.4, labels), m.eval(x, 0.4, labels));
  EXPECT_EQ(back.spec().hidden, spec.hidden);
  fs::remove(path);
}

TEST(VelocityField, InputSkipSubtractsInput) {
  Rng rng(23);
  VelocityFieldSpec spec;
  spec.data_dim = 3;
  spec.hidden = {6};
  spec.input_skip = true;
  const VelocityField zero(spec, rng, true);
  const Tensor x = gaussian(rng, Shape{4, 3});
  EXPECT_EQ(zero.eval(x, 0.3), scale(x, -1.0));

  // Same seed, same weights: the skip only subtracts x.
  VelocityFieldSpec plain = spec;
  plain.input_skip = false;
  Rng r1(24), r2(24);
  const VelocityField skip(spec, r1), base(plain, r2);
  EXPECT_EQ(skip.eval(x, 0.6), sub(base.eval(x, 0.6), x));
  ad::Tape tape;
  const ad::Var xv = tape.leaf(x);
  EXPECT_LT(max_abs_diff(tape.value(skip.eval(tape, xv, 0.6)), skip.eval(x, 0.6)), 1e-15);
}

TEST(Checkpoint, InputSkipSurvivesRoundTrip) {
  Rng rng(25);
  VelocityFieldSpec spec;
  spec.data_dim = 2;
  spec.hidden = {5};
  spec.input_skip = true;
  const VelocityField m(spec, rng);
  const fs::path path = fs::temp_directory_path() / "flowsteer_ckpt_skip.fsv";
  m.save(path.string());
  const VelocityField back = VelocityField::load(path.string());
  EXPECT_TRUE(back.spec().input_skip);
  const Tensor x = gaussian(rng, Shape{3, 2});
  EXPECT_EQ(back.eval(x, 0.2), m.eval(x, 0.2));
  fs::remove(path);
}

TEST(Checkpoint, RejectsForeignFiles) {
  const fs::path path = fs::temp_directory_path() / "flowsteer_not_ckpt.fsv";
  std::ofstream(path) << "hello world, not a checkpoint";
  EXPECT_THROW(VelocityField::load(path.string()), std::runtime_error);
  fs::remove(path);
}

TEST(Datasets, GaussMixDefaults) {
  const Tensor centers = gauss_mix_centers(GaussMixSpec{});
  ASSERT_EQ(centers.shape(), (Shape{8, 2}));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(std::hypot(centers.at(i, 0), centers.at(i, 1)), 4.0, 1e-12);
  Rng rng(22);
  const Dataset ds = gauss_mix_2d(rng, 4000);
  const auto nearest = nearest_mode(ds.x0, GaussMixSpec{});
  std::size_t agree = 0;
  double sq = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    agree += nearest[i] == ds.labels[i];
    const auto c = static_cast<std::size_t>(ds.labels[i]);
    sq += std::pow(ds.x0.at(i, 0) - centers.at(c, 0), 2) + std::pow(ds.x0.at(i, 1) - centers.at(c, 1), 2);
  }
  EXPECT_GT(agree, 3990u);
  EXPECT_NEAR(std::sqrt(sq / (2.0 * ds.size())), 0.3, 0.02);
}

TEST(Datasets, ShapesAreBinaryAndLabeled) {
  Rng rng(23);
  const Dataset ds = shapes_16x16(rng, 50);
  EXPECT_EQ(ds.height, 16u);
  EXPECT_EQ(ds.dim(), 256u);
  EXPECT_EQ(ds.num_classes, 2u);
  for (double v : ds.x0.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  for (int l : ds.labels) EXPECT_TRUE(l == 0 || l == 1);
}

TEST(Datasets, PgmRoundTrip) {
  Rng rng(24);
  const Dataset ds = shapes_16x16(rng, 3);
  const fs::path dir = fs::temp_directory_path() / "flowsteer_pgm_test";
  fs::remove_all(dir);
  save_dataset(ds, dir.string());
  const Dataset back = load_pgm_dir(dir.string());
  EXPECT_EQ(back.x0, ds.x0);
  EXPECT_EQ(back.labels, ds.labels);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace flowsteer
