// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/rng.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace flowsteer {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t key = mix64(seed_);
  return mix64(key ^ mix64(counter_++ * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  // Rejection keeps the result unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

Rng Rng::split(std::uint64_t stream) const { return Rng(mix64(seed_ ^ mix64(stream + 0x632be59bd9b4e019ULL))); }

Tensor gaussian(Rng& rng, const Shape& shape) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

Tensor uniform(Rng& rng, const Shape& shape, double lo, double hi) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace flowsteer
