// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>

#include "flowsteer/rng.hpp"
#include "flowsteer/tensor.hpp"

namespace flowsteer {
namespace {

TEST(Elementwise, AddSubMul) {
  const Tensor a = Tensor::vector({1, 2, 3});
  const Tensor b = Tensor::vector({4, 5, 6});
  EXPECT_EQ(add(a, b), Tensor::vector({5, 7, 9}));
  EXPECT_EQ(sub(a, b), Tensor::vector({-3, -3, -3}));
  EXPECT_EQ(mul(a, b), Tensor::vector({4, 10, 18}));
  EXPECT_EQ(axpy(a, 2.0, b), Tensor::vector({9, 12, 15}));
}

TEST(Elementwise, ShapeMismatchRejected) {
  EXPECT_THROW(add(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), std::invalid_argument);
  EXPECT_THROW(mul(Tensor(Shape{2, 3}), Tensor(Shape{3, 2})), std::invalid_argument);
}

TEST(Elementwise, EmptyTensors) {
  const Tensor e(Shape{0});
  EXPECT_EQ(add(e, e).size(), 0u);
}

TEST(Matmul, SmallExample) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
  EXPECT_EQ(matmul(a, b), Tensor::matrix({{19, 22}, {43, 50}}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(3);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {5, 7, 3}, {13, 33, 17}, {64, 40, 70}}) {
    const auto um = static_cast<std::size_t>(m), uk = static_cast<std::size_t>(k), un = static_cast<std::size_t>(n);
    const Tensor a = gaussian(rng, Shape{um, uk});
    const Tensor b = gaussian(rng, Shape{uk, un});
    const Tensor c = matmul(a, b);
    double worst = 0.0;
    for (std::size_t i = 0; i < um; ++i) {
      for (std::size_t j = 0; j < un; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < uk; ++p) acc += a.at(i, p) * b.at(p, j);
        worst = std::max(worst, std::abs(acc - c.at(i, j)));
      }
    }
    EXPECT_LT(worst, 1e-12) << m << "x" << k << "x" << n;
    EXPECT_LT(max_abs_diff(matmul_nt(a, transpose(b)), c), 1e-12);
    EXPECT_LT(max_abs_diff(matmul_tn(transpose(a), b), c), 1e-12);
  }
}

TEST(Matmul, IdentityAndMismatch) {
  Rng rng(4);
  const Tensor a = gaussian(rng, Shape{4, 6});
  EXPECT_EQ(matmul(a, identity(6)), a);
  EXPECT_THROW(matmul(a, identity(5)), std::invalid_argument);
}

TEST(Matmul, RepeatableBitForBit) {
  Rng r1(9), r2(9);
  const Tensor a = gaussian(r1, Shape{37, 29});
  const Tensor b = gaussian(r1, Shape{29, 41});
  const Tensor a2 = gaussian(r2, Shape{37, 29});
  const Tensor b2 = gaussian(r2, Shape{29, 41});
  EXPECT_EQ(matmul(a, b), matmul(a2, b2));
}

TEST(Matmul, TransposedVariantsAgreeBitForBit) {
  // Single rows take a separate path; every row count must round identically.
  Rng rng(10);
  for (std::size_t m : {1, 2, 3, 4, 5, 9}) {
    const Tensor a = gaussian(rng, Shape{m, 23});
    const Tensor b = gaussian(rng, Shape{13, 23});
    EXPECT_EQ(matmul_nt(a, b), matmul(a, transpose(b))) << m;
    EXPECT_EQ(matmul_tn(transpose(a), transpose(b)), matmul(a, transpose(b))) << m;
  }
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(5);
  const Tensor img = gaussian(rng, Shape{6, 7});
  Tensor k(Shape{3, 3});
  k.at(1, 1) = 1.0;
  EXPECT_EQ(conv2d(img, k), img);
}

TEST(Conv2d, RampMatchesDirectReflectLoop) {
  Tensor img(Shape{5, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) img.at(i, j) = static_cast<double>(5 * i + j);
  const Tensor k(Shape{3, 3}, 1.0 / 9.0);
  const Tensor out = conv2d(img, k);
  auto reflect = [](int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (int p = -1; p <= 1; ++p)
        for (int q = -1; q <= 1; ++q)
          acc += img.at(static_cast<std::size_t>(reflect(i + p, 5)), static_cast<std::size_t>(reflect(j + q, 5))) / 9.0;
      EXPECT_NEAR(out.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)), acc, 1e-12);
    }
  }
}

TEST(Conv2d, NormalizedKernelPreservesConstant) {
  const Tensor img(Shape{8, 8}, 0.375);
  const Tensor k(Shape{5, 5}, 1.0 / 25.0);
  const Tensor out = conv2d(img, k);
  EXPECT_NEAR(mean(out), 0.375, 1e-15);
  EXPECT_LT(max_abs_diff(out, img), 1e-15);
}

TEST(Conv2d, AdjointDotProduct) {
  Rng rng(6);
  const Tensor img = gaussian(rng, Shape{9, 8});
  const Tensor w = gaussian(rng, Shape{9, 8});
  const Tensor k = gaussian(rng, Shape{5, 5});
  EXPECT_NEAR(dot(conv2d(img, k), w), dot(img, conv2d_adjoint(w, k)), 1e-10);
}

TEST(Conv2d, RejectsBadKernels) {
  EXPECT_THROW(conv2d(Tensor(Shape{4, 4}), Tensor(Shape{2, 2})), std::invalid_argument);
  EXPECT_THROW(conv2d(Tensor(Shape{3, 3}), Tensor(Shape{5, 5})), std::invalid_argument);
}

TEST(Avgpool, Examples) {
  EXPECT_EQ(avgpool(Tensor::matrix({{1, 1}, {3, 3}}), 2), Tensor::matrix({{2}}));
  Rng rng(7);
  const Tensor img = gaussian(rng, Shape{4, 6});
  EXPECT_EQ(avgpool(img, 1), img);
  Tensor checker(Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) checker.at(i, j) = static_cast<double>((i + j) % 2);
  EXPECT_EQ(avgpool(checker, 2), Tensor(Shape{2, 2}, 0.5));
}

TEST(Avgpool, PreservesMeanAndRejectsNonDivisible) {
  Rng rng(8);
  const Tensor img = uniform(rng, Shape{8, 8});
  EXPECT_NEAR(mean(avgpool(img, 2)), mean(img), 1e-15);
  EXPECT_THROW(avgpool(Tensor(Shape{5, 4}), 2), std::invalid_argument);
  EXPECT_THROW(avgpool(Tensor(Shape{4, 4}), 0), std::invalid_argument);
}

TEST(Avgpool, AdjointDotProduct) {
  Rng rng(10);
  const Tensor img = gaussian(rng, Shape{6, 9});
  const Tensor w = gaussian(rng, Shape{2, 3});
  EXPECT_NEAR(dot(avgpool(img, 3), w), dot(img, avgpool_adjoint(w, 3)), 1e-12);
}

TEST(UpsampleBilinear, HandComputedTwoByTwo) {
  const Tensor img = Tensor::matrix({{0, 1}, {2, 3}});
  const Tensor expected = Tensor::matrix(
      {{0, 0.25, 0.75, 1}, {0.5, 0.75, 1.25, 1.5}, {1.5, 1.75, 2.25, 2.5}, {2, 2.25, 2.75, 3}});
  EXPECT_LT(max_abs_diff(upsample_bilinear(img, 2), expected), 1e-15);
}

TEST(UpsampleBilinear, ConstantsAndFactorOne) {
  EXPECT_LT(max_abs_diff(upsample_bilinear(Tensor(Shape{3, 5}, 0.7), 4), Tensor(Shape{12, 20}, 0.7)), 1e-15);
  Rng rng(12);
  const Tensor img = gaussian(rng, Shape{4, 3});
  EXPECT_EQ(upsample_bilinear(img, 1), img);
  EXPECT_THROW(upsample_bilinear(Tensor(Shape{4}), 2), std::invalid_argument);
}

TEST(ReflectIndex, Edges) {
  EXPECT_EQ(reflect_index(-1, 5), 1u);
  EXPECT_EQ(reflect_index(-2, 5), 2u);
  EXPECT_EQ(reflect_index(5, 5), 3u);
  EXPECT_EQ(reflect_index(2, 5), 2u);
}

TEST(Gaussian, SameSeedBitIdentical) {
  Rng a(7), b(7);
  EXPECT_EQ(gaussian(a, Shape{3, 5}), gaussian(b, Shape{3, 5}));
}

TEST(Gaussian, Moments) {
  Rng rng(11);
  const Tensor x = gaussian(rng, Shape{100000});
  const double m = mean(x);
  double var = 0.0;
  for (double v : x.data()) var += (v - m) * (v - m);
  var /= static_cast<double>(x.size());
  EXPECT_NEAR(m, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(Gaussian, EmptyShape) {
  Rng rng(1);
  const Tensor x = gaussian(rng, Shape{0});
  EXPECT_TRUE(x.empty());
  EXPECT_EQ(rng.counter(), 0u);
}

TEST(Rng, SplitStreamsIndependentOfParentState) {
  Rng a(42);
  const Rng child_before = a.split(3);
  a.next_u64();
  Rng c1 = child_before, c2 = a.split(3);
  EXPECT_EQ(c1.next_u64(), c2.next_u64());
  Rng other = a.split(4);
  EXPECT_NE(a.split(3).next_u64(), other.next_u64());
}

TEST(Rng, BelowStaysInRange) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(rng.below(7), 7u);
}

TEST(Reductions, Basics) {
  const Tensor a = Tensor::vector({3, 4});
  EXPECT_DOUBLE_EQ(norm(a), 5.0);
  EXPECT_DOUBLE_EQ(sum(a), 7.0);
  EXPECT_TRUE(std::isnan(cosine(a, Tensor::vector({0, 0}))));
  EXPECT_DOUBLE_EQ(cosine(a, scale(a, 2.0)), 1.0);
}

TEST(ContentHash, DistinguishesShapeAndValue) {
  const Tensor a(Shape{2, 3}, 1.0);
  EXPECT_EQ(content_hash(a), content_hash(Tensor(Shape{2, 3}, 1.0)));
  EXPECT_NE(content_hash(a), content_hash(Tensor(Shape{3, 2}, 1.0)));
  EXPECT_NE(content_hash(a), content_hash(Tensor(Shape{2, 3}, 2.0)));
}

}  // namespace
}  // namespace flowsteer
