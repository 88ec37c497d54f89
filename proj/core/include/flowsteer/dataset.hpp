// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "flowsteer/rng.hpp"
#include "flowsteer/tensor.hpp"

namespace flowsteer {

/// Samples as rows of x0 [n, D]. Image datasets record their height/width and
/// store each image flattened row-major.
struct Dataset {
  Tensor x0{Shape{0, 0}};
  std::vector<int> labels;  // empty or one per row
  Tensor x1;                // paired noise (reflow pairs) or empty
  std::size_t num_classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return x0.dim(0); }
  std::size_t dim() const { return x0.dim(1); }
  bool labeled() const { return !labels.empty(); }
  bool paired() const { return !x1.empty(); }
  bool is_image() const { return height > 0; }

  Tensor image(std::size_t i) const;
  /// Rows at the given indices, keeping labels and pairs aligned.
  Dataset select(const std::vector<std::size_t>& idx) const;
};

struct GaussMixSpec {
  std::size_t modes = 8;
  double radius = 4.0;
  double sigma = 0.3;
};

Tensor gauss_mix_centers(const GaussMixSpec& spec);
/// Index of the nearest mode centre for each row of x.
std::vector<int> nearest_mode(const Tensor& x, const GaussMixSpec& spec);

Dataset gauss_mix_2d(Rng& rng, std::size_t n, const GaussMixSpec& spec = {});
Dataset two_moons_2d(Rng& rng, std::size_t n, double noise = 0.1);

enum class ShapeClass : int { kCircle = 0, kSquare = 1 };

struct ShapesSpec {
  std::size_t side = 16;
  double max_offset = 2.0;
  double min_radius = 3.0;
  double max_radius = 5.0;
  double min_half_side = 2.5;
  double max_half_side = 4.5;
};

/// Binary images (shape 1, background 0) with one circle or square each.
Dataset shapes_16x16(Rng& rng, std::size_t n, const ShapesSpec& spec = {});
/// A single rendered shape; centre and size in pixel units.
Tensor render_shape(ShapeClass cls, double cy, double cx, double size, std::size_t side = 16);

/// P5 grayscale, maxval 255; values are scaled to [0, 1].
Tensor read_pgm(const std::string& path);
/// Values are clamped to [0, 1] and rounded to 8 bits.
void write_pgm(const std::string& path, const Tensor& img);
/// Every *.pgm in the directory, sorted by name. Labels come from manifest.csv
/// (file,label) when present.
Dataset load_pgm_dir(const std::string& dir);

/// Writes image datasets as PGM files plus manifest.csv, and 2D datasets as samples.csv.
void save_dataset(const Dataset& ds, const std::string& dir);

}  // namespace flowsteer
