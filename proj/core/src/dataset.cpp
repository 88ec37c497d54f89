// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "flowsteer/trace.hpp"

namespace flowsteer {

namespace fs = std::filesystem;

Tensor Dataset::image(std::size_t i) const {
  if (!is_image()) throw std::logic_error("Dataset::image: not an image dataset");
  return x0.row(i).reshaped(Shape{height, width});
}

Dataset Dataset::select(const std::vector<std::size_t>& idx) const {
  Dataset out = *this;
  const std::size_t d = dim();
  out.x0 = Tensor(Shape{idx.size(), d});
  out.labels.clear();
  if (paired()) out.x1 = Tensor(Shape{idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const std::size_t i = idx[r];
    if (i >= size()) throw std::out_of_range("Dataset::select: index out of range");
    for (std::size_t j = 0; j < d; ++j) out.x0.at(r, j) = x0.at(i, j);
    if (paired())
      for (std::size_t j = 0; j < d; ++j) out.x1.at(r, j) = x1.at(i, j);
    if (labeled()) out.labels.push_back(labels[i]);
  }
  return out;
}

Tensor gauss_mix_centers(const GaussMixSpec& spec) {
  Tensor c(Shape{spec.modes, 2});
  for (std::size_t k = 0; k < spec.modes; ++k) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(spec.modes);
    c.at(k, 0) = spec.radius * std::cos(a);
    c.at(k, 1) = spec.radius * std::sin(a);
  }
  return c;
}

std::vector<int> nearest_mode(const Tensor& x, const GaussMixSpec& spec) {
  const Tensor c = gauss_mix_centers(spec);
  std::vector<int> out(x.dim(0));
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    double best = 0.0;
    for (std::size_t k = 0; k < spec.modes; ++k) {
      const double dx = x.at(i, 0) - c.at(k, 0), dy = x.at(i, 1) - c.at(k, 1);
      const double d = dx * dx + dy * dy;
      if (k == 0 || d < best) {
        best = d;
        out[i] = static_cast<int>(k);
      }
    }
  }
  return out;
}

Dataset gauss_mix_2d(Rng& rng, std::size_t n, const GaussMixSpec& spec) {
  if (spec.modes == 0) throw std::invalid_argument("gauss_mix_2d: need at least one mode");
  const Tensor c = gauss_mix_centers(spec);
  Dataset ds;
  ds.x0 = Tensor(Shape{n, 2});
  ds.num_classes = spec.modes;
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(rng.below(spec.modes));
    ds.x0.at(i, 0) = c.at(k, 0) + spec.sigma * rng.normal();
    ds.x0.at(i, 1) = c.at(k, 1) + spec.sigma * rng.normal();
    ds.labels.push_back(static_cast<int>(k));
  }
  return ds;
}

Dataset two_moons_2d(Rng& rng, std::size_t n, double noise) {
  Dataset ds;
  ds.x0 = Tensor(Shape{n, 2});
  ds.num_classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    const int moon = static_cast<int>(rng.below(2));
    const double a = std::numbers::pi * rng.uniform();
    double x = std::cos(a), y = std::sin(a);
    if (moon == 1) {
      x = 1.0 - x;
      y = 0.5 - y;
    }
    ds.x0.at(i, 0) = 2.0 * (x - 0.5) + noise * rng.normal();
    ds.x0.at(i, 1) = 2.0 * (y - 0.25) + noise * rng.normal();
    ds.labels.push_back(moon);
  }
  return ds;
}

Tensor render_shape(ShapeClass cls, double cy, double cx, double size, std::size_t side) {
  Tensor img(Shape{side, side});
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      const double dy = static_cast<double>(i) + 0.5 - cy;
      const double dx = static_cast<double>(j) + 0.5 - cx;
      const bool in = cls == ShapeClass::kCircle ? dx * dx + dy * dy <= size * size
                                                 : std::abs(dx) <= size && std::abs(dy) <= size;
      img.at(i, j) = in ? 1.0 : 0.0;
    }
  }
  return img;
}

Dataset shapes_16x16(Rng& rng, std::size_t n, const ShapesSpec& spec) {
  const std::size_t side = spec.side;
  Dataset ds;
  ds.x0 = Tensor(Shape{n, side * side});
  ds.num_classes = 2;
  ds.height = side;
  ds.width = side;
  const double mid = static_cast<double>(side) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto cls = static_cast<ShapeClass>(rng.below(2));
    const double cy = mid + rng.uniform(-spec.max_offset, spec.max_offset);
    const double cx = mid + rng.uniform(-spec.max_offset, spec.max_offset);
    const double size = cls == ShapeClass::kCircle ? rng.uniform(spec.min_radius, spec.max_radius)
                                                   : rng.uniform(spec.min_half_side, spec.max_half_side);
    const Tensor img = render_shape(cls, cy, cx, size, side);
    std::copy(img.data().begin(), img.data().end(), ds.x0.data().begin() + static_cast<std::ptrdiff_t>(i * side * side));
    ds.labels.push_back(static_cast<int>(cls));
  }
  return ds;
}

namespace {

// Skips whitespace and '#' comments between PGM header tokens.
std::string pgm_token(std::istream& is) {
  std::string tok;
  char c;
  while (is.get(c)) {
    if (c == '#') {
      std::string line;
      std::getline(is, line);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

}  // namespace

Tensor read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  if (pgm_token(is) != "P5") throw std::runtime_error(path + ": not a P5 PGM file");
  const std::size_t w = std::stoul(pgm_token(is));
  const std::size_t h = std::stoul(pgm_token(is));
  const int maxval = std::stoi(pgm_token(is));
  if (maxval != 255) throw std::runtime_error(path + ": only maxval 255 is supported");
  std::vector<unsigned char> buf(w * h);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw std::runtime_error(path + ": truncated pixel data");
  Tensor img(Shape{h, w});
  for (std::size_t i = 0; i < buf.size(); ++i) img[i] = buf[i] / 255.0;
  return img;
}

void write_pgm(const std::string& path, const Tensor& img) {
  if (img.rank() != 2) throw std::invalid_argument("write_pgm: expected [H, W], got " + shape_str(img.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "P5\n" << img.dim(1) << ' ' << img.dim(0) << "\n255\n";
  std::vector<unsigned char> buf(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::isfinite(img[i]) ? std::clamp(img[i], 0.0, 1.0) : 0.0;
    buf[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Dataset load_pgm_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path().filename().string());
  }
  std::sort(files.begin(), files.end());

  std::map<std::string, int> label_of;
  std::ifstream manifest(fs::path(dir) / "manifest.csv");
  if (manifest) {
    std::string line;
    while (std::getline(manifest, line)) {
      const auto comma = line.find(',');
      if (comma == std::string::npos || line.rfind("file,", 0) == 0) continue;
      label_of[line.substr(0, comma)] = std::stoi(line.substr(comma + 1));
    }
  }

  Dataset ds;
  std::vector<Tensor> rows;
  for (const auto& f : files) {
    const Tensor img = read_pgm((fs::path(dir) / f).string());
    if (rows.empty()) {
      ds.height = img.dim(0);
      ds.width = img.dim(1);
    } else if (img.dim(0) != ds.height || img.dim(1) != ds.width) {
      throw std::runtime_error(f + ": image size differs from the rest of " + dir);
    }
    rows.push_back(img.reshaped(Shape{1, img.size()}));
    if (!label_of.empty()) {
      const auto it = label_of.find(f);
      if (it == label_of.end()) throw std::runtime_error(f + ": missing from manifest.csv");
      ds.labels.push_back(it->second);
      ds.num_classes = std::max(ds.num_classes, static_cast<std::size_t>(it->second) + 1);
    }
  }
  ds.x0 = rows.empty() ? Tensor(Shape{0, 0}) : concat_rows(rows);
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir);
  if (ds.is_image()) {
    std::ofstream manifest(fs::path(dir) / "manifest.csv", std::ios::binary);
    if (!manifest) throw std::runtime_error("cannot write manifest in " + dir);
    manifest << "file,label\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "img_%06zu.pgm", i);
      write_pgm((fs::path(dir) / name).string(), ds.image(i));
      manifest << name << ',' << (ds.labeled() ? ds.labels[i] : -1) << '\n';
    }
    return;
  }
  std::ofstream os(fs::path(dir) / "samples.csv", std::ios::binary);
  if (!os) throw std::runtime_error("cannot write samples in " + dir);
  os << "index";
  for (std::size_t j = 0; j < ds.dim(); ++j) os << ",x" << j;
  os << ",label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << i;
    for (std::size_t j = 0; j < ds.dim(); ++j) os << ',' << format_real(ds.x0.at(i, j));
    os << ',' << (ds.labeled() ? ds.labels[i] : -1) << '\n';
  }
}

}  // namespace flowsteer
