// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/flow_model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace flowsteer {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'V', 'F', 'I', 'E', 'L', 'D'};
constexpr std::uint32_t kCheckpointVersion = 2;

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  os.write(b, 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_tensor(std::ostream& os, const Tensor& t) {
  for (double v : t.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
}

void get_tensor(std::istream& is, Tensor& t) {
  for (auto& v : t.data()) v = std::bit_cast<double>(get_u64(is));
}

}  // namespace

Tensor time_features(const Tensor& t_rows, std::size_t count) {
  if (count % 2 != 0) throw std::invalid_argument("time_features: count must be even");
  const std::size_t b = t_rows.size();
  Tensor out(Shape{b, count});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < count / 2; ++k) {
      const double w = std::numbers::pi * std::ldexp(1.0, static_cast<int>(k)) / 2.0;
      out.at(i, 2 * k) = std::sin(w * t_rows[i]);
      out.at(i, 2 * k + 1) = std::cos(w * t_rows[i]);
    }
  }
  return out;
}

VelocityField::VelocityField(const VelocityFieldSpec& spec, Rng& rng, bool zero_init) : spec_(spec) {
  if (spec.data_dim == 0) throw std::invalid_argument("VelocityField: data_dim must be positive");
  std::vector<std::size_t> widths{spec.data_dim + spec.time_features + (spec.num_classes ? spec.class_dim : 0)};
  widths.insert(widths.end(), spec.hidden.begin(), spec.hidden.end());
  widths.push_back(spec.data_dim);
  mlp_ = Mlp(widths, rng, zero_init);
  if (spec.num_classes > 0) {
    table_ = zero_init ? Tensor(Shape{spec.num_classes + 1, spec.class_dim})
                       : gaussian(rng, Shape{spec.num_classes + 1, spec.class_dim});
  }
}

std::vector<int> VelocityField::resolve_labels(std::span<const int> labels, std::size_t rows) const {
  if (!conditional()) return {};
  std::vector<int> out(rows, null_label());
  if (labels.empty()) return out;
  if (labels.size() != rows) {
    throw std::invalid_argument("VelocityField: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(rows) + " rows");
  }
  for (std::size_t i = 0; i < rows; ++i) {
    if (labels[i] >= static_cast<int>(spec_.num_classes)) {
      throw std::out_of_range("VelocityField: label " + std::to_string(labels[i]) + " >= class count " +
                              std::to_string(spec_.num_classes));
    }
    if (labels[i] >= 0) out[i] = labels[i];
  }
  return out;
}

VelocityField::Bound VelocityField::bind(ad::Tape& tape, bool trainable) const {
  Bound b;
  b.mlp = mlp_.bind(tape, trainable);
  if (conditional()) b.table = trainable ? tape.leaf(table_) : tape.constant(table_);
  return b;
}

ad::Var VelocityField::forward(ad::Tape& tape, const Bound& p, ad::Var x, const Tensor& t_rows,
                               std::span<const int> labels) const {
  const std::size_t rows = tape.value(x).dim(0);
  ad::Var h = tape.concat_cols(x, tape.constant(time_features(t_rows, spec_.time_features)));
  if (conditional()) h = tape.concat_cols(h, tape.embedding(p.table, resolve_labels(labels, rows)));
  const ad::Var out = Mlp::forward(tape, p.mlp, h);
  return spec_.input_skip ? tape.sub(out, x) : out;
}

Tensor VelocityField::forward(const Tensor& x, const Tensor& t_rows, std::span<const int> labels) const {
  Tensor h = concat_cols(x, time_features(t_rows, spec_.time_features));
  if (conditional()) {
    const auto lab = resolve_labels(labels, x.dim(0));
    Tensor e(Shape{lab.size(), spec_.class_dim});
    for (std::size_t i = 0; i < lab.size(); ++i)
      for (std::size_t j = 0; j < spec_.class_dim; ++j) e.at(i, j) = table_.at(static_cast<std::size_t>(lab[i]), j);
    h = concat_cols(h, e);
  }
  Tensor out = mlp_.forward(h);
  return spec_.input_skip ? sub(out, x) : out;
}

Tensor VelocityField::eval(const Tensor& x, double t, std::span<const int> labels) const {
  if (x.rank() != 2 || x.dim(1) != dim()) {
    throw std::invalid_argument("VelocityField: expected [B, " + std::to_string(dim()) + "], got " +
                                shape_str(x.shape()));
  }
  return forward(x, Tensor(Shape{x.dim(0)}, t), labels);
}

ad::Var VelocityField::eval(ad::Tape& tape, ad::Var x, double t, std::span<const int> labels) const {
  const Bound p = bind(tape, false);
  return forward(tape, p, x, Tensor(Shape{tape.value(x).dim(0)}, t), labels);
}

std::vector<Tensor*> VelocityField::parameters() {
  auto out = mlp_.parameters();
  if (conditional()) out.push_back(&table_);
  return out;
}

std::size_t VelocityField::parameter_count() const { return mlp_.parameter_count() + table_.size(); }

void VelocityField::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os.write(kMagic, sizeof kMagic);
  put_u64(os, kCheckpointVersion);
  const std::string conv = kFlowConvention;
  put_u64(os, conv.size());
  os.write(conv.data(), static_cast<std::streamsize>(conv.size()));
  put_u64(os, spec_.data_dim);
  put_u64(os, spec_.time_features);
  put_u64(os, spec_.num_classes);
  put_u64(os, spec_.class_dim);
  put_u64(os, spec_.input_skip ? 1 : 0);
  put_u64(os, spec_.hidden.size());
  for (auto h : spec_.hidden) put_u64(os, h);
  for (std::size_t i = 0; i < mlp_.layer_count(); ++i) {
    put_tensor(os, mlp_.weights[i]);
    put_tensor(os, mlp_.biases[i]);
  }
  put_tensor(os, table_);
  if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

VelocityField VelocityField::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || !std::equal(magic, magic + 8, kMagic)) throw std::runtime_error(path + ": not a flowsteer checkpoint");
  const auto version = get_u64(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto conv_len = get_u64(is);
  if (conv_len > 64) throw std::runtime_error(path + ": corrupt convention tag");
  std::string conv(conv_len, '\0');
  is.read(conv.data(), static_cast<std::streamsize>(conv_len));
  if (conv != kFlowConvention) throw std::runtime_error(path + ": convention '" + conv + "' is not " + kFlowConvention);

  VelocityFieldSpec spec;
  spec.data_dim = get_u64(is);
  spec.time_features = get_u64(is);
  spec.num_classes = get_u64(is);
  spec.class_dim = get_u64(is);
  spec.input_skip = get_u64(is) != 0;
  const auto layers = get_u64(is);
  if (layers > 64) throw std::runtime_error(path + ": corrupt layer count");
  spec.hidden.clear();
  for (std::uint64_t i = 0; i < layers; ++i) spec.hidden.push_back(get_u64(is));

  Rng unused(0);
  VelocityField f(spec, unused, true);
  for (std::size_t i = 0; i < f.mlp_.layer_count(); ++i) {
    get_tensor(is, f.mlp_.weights[i]);
    get_tensor(is, f.mlp_.biases[i]);
  }
  get_tensor(is, f.table_);
  return f;
}

Tensor interpolate(const Tensor& x0, const Tensor& x1, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("interpolate: t outside [0, 1]");
  if (x0.shape() != x1.shape()) {
    throw std::invalid_argument("interpolate: shape mismatch " + shape_str(x0.shape()) + " vs " +
                                shape_str(x1.shape()));
  }
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * x1[i];
  return out;
}

Tensor estimate_x0(const Field& field, const Tensor& x_t, double t, std::span<const int> labels) {
  return axpy(x_t, t, field.eval(x_t, t, labels));
}

TrainBatch sample_batch(const Dataset& ds, Rng& rng, std::size_t batch) {
  if (ds.size() == 0) throw std::invalid_argument("sample_batch: empty dataset");
  std::vector<std::size_t> idx(batch);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.below(ds.size()));
  const Dataset sub = ds.select(idx);
  TrainBatch b;
  b.x0 = sub.x0;
  b.x1 = sub.paired() ? sub.x1 : gaussian(rng, sub.x0.shape());
  b.labels = sub.labels;
  return b;
}

ad::Var flow_matching_loss(ad::Tape& tape, const VelocityField& model, const VelocityField::Bound& p,
                           const TrainBatch& batch, const Tensor& t_rows) {
  const std::size_t rows = batch.x0.dim(0), d = batch.x0.dim(1);
  Tensor x_t(batch.x0.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const double t = t_rows[i];
    for (std::size_t j = 0; j < d; ++j) x_t.at(i, j) = (1.0 - t) * batch.x0.at(i, j) + t * batch.x1.at(i, j);
  }
  const ad::Var u = model.forward(tape, p, tape.constant(x_t), t_rows, batch.labels);
  const ad::Var diff = tape.sub(u, tape.constant(sub(batch.x0, batch.x1)));
  return tape.scale(tape.sum(tape.square(diff)), 1.0 / static_cast<double>(rows));
}

FlowTrainer::FlowTrainer(VelocityField& model, const TrainConfig& cfg)
    : model_(model), cfg_(cfg), opt_(cfg.optimizer, cfg.learning_rate, cfg.adam) {
  if (cfg.batch == 0) throw std::invalid_argument("TrainConfig: batch must be at least 1");
}

double FlowTrainer::train_step(const TrainBatch& batch, Rng& rng) {
  const std::size_t rows = batch.x0.dim(0);
  Tensor t_rows(Shape{rows});
  for (auto& t : t_rows.data()) t = rng.uniform();
  TrainBatch b = batch;
  if (model_.conditional() && !b.labels.empty()) {
    for (auto& l : b.labels)
      if (rng.uniform() < cfg_.label_dropout) l = -1;
  }

  ad::Tape tape;
  const auto p = model_.bind(tape, true);
  const ad::Var loss = flow_matching_loss(tape, model_, p, b, t_rows);
  const double value = tape.value(loss).item();
  if (!std::isfinite(value)) {
    throw std::runtime_error("training: non-finite loss at step " + std::to_string(step_));
  }
  const auto g = ad::backward(tape, loss);
  std::vector<Tensor> grads;
  for (auto v : p.mlp.weights) grads.push_back(g[v]);
  for (auto v : p.mlp.biases) grads.push_back(g[v]);
  if (model_.conditional()) grads.push_back(g[p.table]);
  opt_.step(model_.parameters(), grads);
  ++step_;
  return value;
}

std::vector<double> FlowTrainer::fit(const Dataset& ds, Rng& rng) {
  if (ds.dim() != model_.dim()) {
    throw std::invalid_argument("fit: dataset dim " + std::to_string(ds.dim()) + " != model dim " +
                                std::to_string(model_.dim()));
  }
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(std::max(cfg_.steps, 0)));
  for (int s = 0; s < cfg_.steps; ++s) losses.push_back(train_step(sample_batch(ds, rng, cfg_.batch), rng));
  return losses;
}

SampleResult euler_sample(const Field& field, const Tensor& x_T, int T, std::span<const int> labels,
                          bool keep_estimates) {
  if (T < 1) throw std::invalid_argument("euler_sample: T must be at least 1");
  SampleResult res;
  Tensor x = x_T;
  const double dt = 1.0 / T;
  auto& tr = res.trace;
  tr.counters.note_stored(1);
  for (int k = 0; k < T; ++k) {
    const double t = static_cast<double>(T - k) / T;
    const Tensor v = field.eval(x, t, labels);
    ++tr.counters.forward;
    TraceRow row;
    row.step = k;
    row.t = t;
    if (keep_estimates) row.x0_hat = axpy(x, t, v);
    x = axpy(x, dt, v);
    if (!x.all_finite()) {
      tr.aborted_at = k;
      throw std::runtime_error("euler_sample: non-finite state at step " + std::to_string(k));
    }
    row.counters = tr.counters;
    tr.rows.push_back(std::move(row));
  }
  TraceRow last;
  last.step = T;
  last.t = 0.0;
  if (keep_estimates) last.x0_hat = x;
  last.counters = tr.counters;
  tr.rows.push_back(std::move(last));
  res.x0 = std::move(x);
  return res;
}

Dataset reflow(const Field& model, Rng& rng, std::size_t pairs, int T, std::size_t num_classes) {
  Dataset ds;
  ds.num_classes = num_classes;
  const std::size_t d = model.dim();
  if (pairs == 0) {
    ds.x0 = Tensor(Shape{0, d});
    return ds;
  }
  ds.x1 = gaussian(rng, Shape{pairs, d});
  if (num_classes > 0) {
    for (std::size_t i = 0; i < pairs; ++i) ds.labels.push_back(static_cast<int>(rng.below(num_classes)));
  }
  constexpr std::size_t kChunk = 512;
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < pairs; b += kChunk) {
    const std::size_t e = std::min(pairs, b + kChunk);
    std::span<const int> lab;
    if (!ds.labels.empty()) lab = std::span<const int>(ds.labels).subspan(b, e - b);
    parts.push_back(euler_sample(model, ds.x1.rows(b, e), T, lab, false).x0);
  }
  ds.x0 = concat_rows(parts);
  return ds;
}

}  // namespace flowsteer
