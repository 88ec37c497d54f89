// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "flowsteer/tensor.hpp"

namespace flowsteer {

/// Counter-based generator: output i is a SplitMix64 finalizer applied to
/// (seed, i). Streams are identical across platforms for the same seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal by Box-Muller; consumes two outputs per call.
  double normal();

  /// Independent child stream; does not advance this generator.
  Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

Tensor gaussian(Rng& rng, const Shape& shape);
Tensor uniform(Rng& rng, const Shape& shape, double lo = 0.0, double hi = 1.0);

}  // namespace flowsteer
