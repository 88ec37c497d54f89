// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;

namespace flowsteer {

// ---------------------------------------------------------------------------
// Value parsing

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(x)) {
    throw ConfigError(key, "expected a finite number, got '" + v + "'");
  }
  return x;
}

template <class I>
I parse_integer(const std::string& key, const std::string& v) {
  I x{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key, "expected an integer, got '" + v + "'");
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ',';
    if constexpr (std::is_same_v<T, double>) {
      s += format_real(xs[i]);
    } else if constexpr (std::is_same_v<T, std::string>) {
      s += xs[i];
    } else {
      s += std::to_string(xs[i]);
    }
  }
  return s;
}

struct KeyDef {
  std::string name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define FS_ACC(expr) [](auto& c) -> auto& { return c.expr; }

template <class Acc>
KeyDef real_key(const char* name, Acc acc) {
  return {name, [=](ExperimentConfig& c, const std::string& v) { acc(c) = parse_real(name, v); },
          [=](const ExperimentConfig& c) { return format_real(acc(c)); }};
}

template <class Acc>
KeyDef int_key(const char* name, Acc acc) {
  return {name,
          [=](ExperimentConfig& c, const std::string& v) {
            using T = std::remove_reference_t<decltype(acc(c))>;
            acc(c) = parse_integer<T>(name, v);
          },
          [=](const ExperimentConfig& c) { return std::to_string(acc(c)); }};
}

template <class Acc>
KeyDef string_key(const char* name, Acc acc) {
  return {name, [=](ExperimentConfig& c, const std::string& v) { acc(c) = v; },
          [=](const ExperimentConfig& c) { return acc(c); }};
}

template <class Acc>
KeyDef bool_key(const char* name, Acc acc) {
  return {name, [=](ExperimentConfig& c, const std::string& v) { acc(c) = parse_bool(name, v); },
          [=](const ExperimentConfig& c) { return std::string(acc(c) ? "true" : "false"); }};
}

template <class Acc>
KeyDef sizes_key(const char* name, Acc acc) {
  return {name,
          [=](ExperimentConfig& c, const std::string& v) {
            std::vector<std::size_t> xs;
            for (const auto& item : split_list(v)) xs.push_back(parse_integer<std::size_t>(name, item));
            acc(c) = xs;
          },
          [=](const ExperimentConfig& c) { return join(acc(c)); }};
}

template <class Acc>
KeyDef reals_key(const char* name, Acc acc) {
  return {name,
          [=](ExperimentConfig& c, const std::string& v) {
            std::vector<double> xs;
            for (const auto& item : split_list(v)) xs.push_back(parse_real(name, item));
            acc(c) = xs;
          },
          [=](const ExperimentConfig& c) { return join(acc(c)); }};
}

template <class Acc>
KeyDef strings_key(const char* name, Acc acc) {
  return {name, [=](ExperimentConfig& c, const std::string& v) { acc(c) = split_list(v); },
          [=](const ExperimentConfig& c) { return join(acc(c)); }};
}

template <class Acc>
KeyDef optimizer_key(const char* name, Acc acc) {
  return {name,
          [=](ExperimentConfig& c, const std::string& v) {
            try {
              acc(c) = parse_optimizer(v);
            } catch (const std::exception& e) {
              throw ConfigError(name, e.what());
            }
          },
          [=](const ExperimentConfig& c) { return std::string(optimizer_name(acc(c))); }};
}

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = {
      string_key("experiment", FS_ACC(experiment)),
      string_key("preset", FS_ACC(preset)),
      int_key("seed", FS_ACC(seed)),
      string_key("out", FS_ACC(out)),
      int_key("samples", FS_ACC(samples)),

      string_key("dataset.kind", FS_ACC(dataset.kind)),
      int_key("dataset.n", FS_ACC(dataset.n)),
      string_key("dataset.path", FS_ACC(dataset.path)),

      string_key("model.checkpoint", FS_ACC(model.checkpoint)),
      string_key("model.init", FS_ACC(model.init)),
      sizes_key("model.hidden", FS_ACC(model.hidden)),
      int_key("model.time_features", FS_ACC(model.time_features)),
      int_key("model.class_dim", FS_ACC(model.class_dim)),
      bool_key("model.conditional", FS_ACC(model.conditional)),
      bool_key("model.input_skip", FS_ACC(model.input_skip)),
      string_key("model.cache_dir", FS_ACC(model.cache_dir)),

      int_key("train.steps", FS_ACC(train.steps)),
      int_key("train.batch", FS_ACC(train.batch)),
      real_key("train.lr", FS_ACC(train.learning_rate)),
      optimizer_key("train.optimizer", FS_ACC(train.optimizer)),
      real_key("train.label_dropout", FS_ACC(train.label_dropout)),
      real_key("train.adam.beta1", FS_ACC(train.adam.beta1)),
      real_key("train.adam.beta2", FS_ACC(train.adam.beta2)),
      real_key("train.adam.eps", FS_ACC(train.adam.eps)),

      int_key("reflow.rounds", FS_ACC(reflow.rounds)),
      int_key("reflow.pairs", FS_ACC(reflow.pairs)),
      int_key("reflow.T", FS_ACC(reflow.T)),
      int_key("reflow.steps", FS_ACC(reflow.steps)),

      {"steer.mode",
       [](ExperimentConfig& c, const std::string& v) {
         try {
           c.steer.mode = parse_steer_mode(v);
         } catch (const std::exception& e) {
           throw ConfigError("steer.mode", e.what());
         }
       },
       [](const ExperimentConfig& c) { return std::string(steer_mode_name(c.steer.mode)); }},
      int_key("steer.T", FS_ACC(steer.T)),
      int_key("steer.N", FS_ACC(steer.N)),
      real_key("steer.scale", FS_ACC(steer.guidance_scale)),
      real_key("steer.lr", FS_ACC(steer.learning_rate)),
      optimizer_key("steer.optimizer", FS_ACC(steer.optimizer)),
      real_key("steer.adam.beta1", FS_ACC(steer.adam.beta1)),
      real_key("steer.adam.beta2", FS_ACC(steer.adam.beta2)),
      real_key("steer.adam.eps", FS_ACC(steer.adam.eps)),
      int_key("steer.min_T", FS_ACC(steer.min_T)),
      int_key("steer.max_full_steps_T", FS_ACC(steer.max_full_steps_T)),
      real_key("steer.edit_scale", FS_ACC(steer.edit_scale)),
      int_key("steer.chain_iterations", FS_ACC(steer.chain_iterations)),
      real_key("steer.chain_blend", FS_ACC(steer.chain_blend)),
      int_key("steer.max_stored_states", FS_ACC(steer.max_stored_states)),
      int_key("steer.snapshot_stride", FS_ACC(steer.snapshot_stride)),

      string_key("task.kind", FS_ACC(task.kind)),
      int_key("task.box", FS_ACC(task.box)),
      int_key("task.blur_kernel", FS_ACC(task.blur_kernel)),
      real_key("task.blur_sigma", FS_ACC(task.blur_sigma)),
      int_key("task.factor", FS_ACC(task.factor)),
      real_key("task.noise_sigma", FS_ACC(task.noise_sigma)),
      real_key("task.loss_weight", FS_ACC(task.loss_weight)),
      real_key("task.box_weight", FS_ACC(task.box_weight)),
      real_key("task.deblur_weight", FS_ACC(task.deblur_weight)),
      real_key("task.sr_weight", FS_ACC(task.sr_weight)),

      sizes_key("classifier.hidden", FS_ACC(classifier.hidden)),
      int_key("classifier.steps", FS_ACC(classifier.train.steps)),
      int_key("classifier.batch", FS_ACC(classifier.train.batch)),
      real_key("classifier.lr", FS_ACC(classifier.train.learning_rate)),
      real_key("classifier.weight", FS_ACC(classifier.weight)),
      int_key("classifier.target", FS_ACC(classifier.target)),

      int_key("edit.base", FS_ACC(edit.base)),
      int_key("edit.target", FS_ACC(edit.target)),
      int_key("edit.free_box", FS_ACC(edit.free_box)),
      real_key("edit.weight", FS_ACC(edit.weight)),

      string_key("theory.kind", FS_ACC(theory.kind)),
      int_key("theory.dim", FS_ACC(theory.dim)),
      int_key("theory.fields", FS_ACC(theory.fields)),
      int_key("theory.times", FS_ACC(theory.times)),
      reals_key("theory.rates", FS_ACC(theory.rates)),
      int_key("theory.T", FS_ACC(theory.T)),

      strings_key("compare.methods", FS_ACC(methods)),
      strings_key("compare.tasks", FS_ACC(tasks)),
  };
  return defs;
}

#undef FS_ACC

using Entries = std::vector<std::pair<std::string, std::string>>;

// Shared by the image presets: a conditional shapes model, reflowed once.
const Entries kShapesModel = {
    {"dataset.kind", "shapes-16x16"}, {"dataset.n", "4000"},     {"model.conditional", "true"},
    {"model.hidden", "512,512"},      {"model.input_skip", "true"},
    {"train.steps", "4000"},          {"train.batch", "64"},
    {"reflow.rounds", "1"},           {"reflow.pairs", "4000"},  {"reflow.T", "100"},
    {"reflow.steps", "3000"},         {"samples", "10"},
};

const Entries kGaussMixModel = {
    {"dataset.kind", "gauss-mix-2d"}, {"dataset.n", "8000"},    {"model.hidden", "128,128"},
    {"train.steps", "3000"},          {"train.batch", "256"},   {"reflow.rounds", "1"},
    {"reflow.pairs", "8000"},         {"reflow.T", "100"},      {"reflow.steps", "3000"},
};

Entries with(Entries base, const Entries& extra) {
  base.insert(base.end(), extra.begin(), extra.end());
  return base;
}

const std::map<std::string, Entries>& presets() {
  static const std::map<std::string, Entries> p = {
      {"pixel-inverse", with(kShapesModel, {{"experiment", "invert"},
                                            {"steer.mode", "flowchef"},
                                            {"steer.T", "200"},
                                            {"steer.N", "1"},
                                            {"steer.scale", "500"},
                                            {"steer.lr", "1"},
                                            {"steer.optimizer", "sgd"},
                                            {"task.kind", "box-inpaint"},
                                            {"task.loss_weight", "3e-5"},
                                            {"task.deblur_weight", "5e-4"},
                                            {"task.sr_weight", "5e-4"}})},
      {"latent-inverse", with(kShapesModel, {{"experiment", "invert"},
                                             {"steer.mode", "flowchef"},
                                             {"steer.T", "100"},
                                             {"steer.N", "1"},
                                             {"steer.scale", "0.5"},
                                             {"steer.lr", "0.02"},
                                             {"steer.optimizer", "adam"},
                                             {"task.kind", "box-inpaint"},
                                             {"task.loss_weight", "1e-3"}})},
      {"dflow-baseline", with(kShapesModel, {{"experiment", "invert"},
                                             {"steer.mode", "full-chain-backprop"},
                                             {"steer.T", "10"},
                                             {"steer.chain_iterations", "20"},
                                             {"steer.chain_blend", "0.1"},
                                             {"steer.scale", "0.5"},
                                             {"steer.lr", "0.5"},
                                             {"steer.optimizer", "adam"},
                                             {"task.kind", "box-inpaint"},
                                             {"task.loss_weight", "1e-6"}})},
      {"compare-inverse", with(kShapesModel, {{"experiment", "invert"},
                                              {"steer.T", "200"},
                                              {"steer.N", "1"},
                                              {"steer.scale", "500"},
                                              {"steer.lr", "1"},
                                              {"steer.optimizer", "sgd"},
                                              {"task.loss_weight", "3e-5"},
                                              {"task.deblur_weight", "5e-4"},
                                              {"task.sr_weight", "5e-4"},
                                              {"compare.methods", "flowchef,stepwise-backprop,unguided"},
                                              {"compare.tasks", "box-inpaint,deblur,super-resolution"}})},
      {"shapes-edit", with(kShapesModel, {{"experiment", "edit"},
                                          {"steer.mode", "flowchef"},
                                          {"steer.T", "100"},
                                          {"steer.N", "1"},
                                          {"steer.scale", "100"},
                                          {"steer.lr", "1"},
                                          {"steer.optimizer", "sgd"},
                                          {"steer.min_T", "100"},
                                          {"steer.max_full_steps_T", "0"},
                                          {"steer.edit_scale", "1"},
                                          {"edit.base", "0"},
                                          {"edit.target", "1"},
                                          {"edit.free_box", "12"},
                                          {"edit.weight", "1e-3"},
                                          {"samples", "5"}})},
      {"gauss-mix-train", with(kGaussMixModel, {{"experiment", "train"}})},
      {"gauss-mix-sample", with(kGaussMixModel, {{"experiment", "sample"}, {"steer.T", "100"}, {"samples", "500"}})},
      {"gauss-mix-guide", with(kGaussMixModel, {{"experiment", "classify-guide"},
                                                {"steer.mode", "flowchef"},
                                                {"steer.T", "100"},
                                                {"steer.N", "1"},
                                                {"steer.scale", "1"},
                                                {"steer.lr", "0.05"},
                                                {"steer.optimizer", "adam"},
                                                {"classifier.weight", "1"},
                                                {"samples", "500"}})},
      {"lemma-affine",
       {{"experiment", "theory"}, {"theory.kind", "lemma-affine"}, {"theory.dim", "8"}, {"theory.fields", "20"},
        {"theory.times", "10"}}},
      {"decay-straight",
       {{"experiment", "theory"}, {"theory.kind", "decay"}, {"theory.dim", "8"}, {"theory.T", "2000"},
        {"theory.rates", "0.05,0.1"}}},
      {"convergence-order", {{"experiment", "theory"}, {"theory.kind", "convergence"}, {"theory.T", "32"}}},
      {"curved-contrast",
       {{"experiment", "theory"}, {"theory.kind", "curved-contrast"}, {"theory.dim", "8"}, {"steer.T", "50"},
        {"steer.N", "1"}, {"steer.scale", "0.05"}, {"steer.lr", "1"}, {"steer.optimizer", "sgd"},
        {"samples", "10"}}},
  };
  return p;
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& [k, v] : presets()) names.push_back(k);
  return names;
}

std::vector<std::pair<std::string, std::string>> preset_entries(const std::string& name) {
  const auto it = presets().find(name);
  if (it == presets().end()) {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("preset", "unknown preset '" + name + "' (known: " + known + ")");
  }
  return it->second;
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& d : key_defs()) {
    if (d.name == key) {
      d.set(cfg, value);
      return;
    }
  }
  throw ConfigError(key, "unknown key");
}

ExperimentConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::string preset;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno), "expected 'key = value', got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "preset") {
      preset = value;
    } else {
      entries.emplace_back(key, value);
    }
  }
  ExperimentConfig cfg;
  if (!preset.empty()) {
    for (const auto& [k, v] : preset_entries(preset)) set_config_value(cfg, k, v);
    cfg.preset = preset;
  }
  for (const auto& [k, v] : entries) set_config_value(cfg, k, v);
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("--config", "cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string resolved_config_text(const ExperimentConfig& cfg) {
  std::string s = "# resolved flowsteer configuration\n";
  for (const auto& d : key_defs()) s += d.name + " = " + d.get(cfg) + "\n";
  return s;
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = resolved_config_text(cfg);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::pair<std::string, std::string>> config_keys() {
  const ExperimentConfig defaults;
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& d : key_defs()) out.emplace_back(d.name, d.get(defaults));
  return out;
}

namespace {

bool one_of(const std::string& v, std::initializer_list<const char*> options) {
  return std::any_of(options.begin(), options.end(), [&](const char* o) { return v == o; });
}

bool image_dataset(const ExperimentConfig& cfg) {
  return cfg.dataset.kind == "shapes-16x16" || cfg.dataset.kind == "file-pgm-dir";
}

}  // namespace

void validate_config(const ExperimentConfig& cfg) {
  if (!one_of(cfg.experiment, {"train", "sample", "invert", "edit", "classify-guide", "theory"})) {
    throw ConfigError("experiment", "expected train|sample|invert|edit|classify-guide|theory, got '" +
                                        cfg.experiment + "'");
  }
  if (!one_of(cfg.dataset.kind, {"gauss-mix-2d", "two-moons-2d", "shapes-16x16", "file-pgm-dir"})) {
    throw ConfigError("dataset.kind", "unknown generator '" + cfg.dataset.kind + "'");
  }
  if (cfg.dataset.kind == "file-pgm-dir" && cfg.dataset.path.empty()) {
    throw ConfigError("dataset.path", "required for file-pgm-dir");
  }
  if (!one_of(cfg.model.init, {"trained", "zero"})) throw ConfigError("model.init", "expected trained|zero");
  if (cfg.model.hidden.empty()) throw ConfigError("model.hidden", "need at least one hidden layer");
  if (cfg.model.time_features == 0 || cfg.model.time_features % 2 != 0) {
    throw ConfigError("model.time_features", "must be positive and even");
  }
  if (cfg.train.steps < 0) throw ConfigError("train.steps", "must be >= 0");
  if (cfg.train.batch == 0) throw ConfigError("train.batch", "must be positive");
  if (!(cfg.train.learning_rate > 0.0)) throw ConfigError("train.lr", "must be positive");
  if (cfg.train.label_dropout < 0.0 || cfg.train.label_dropout > 1.0) {
    throw ConfigError("train.label_dropout", "must lie in [0, 1]");
  }
  if (cfg.reflow.rounds < 0) throw ConfigError("reflow.rounds", "must be >= 0");
  if (cfg.reflow.rounds > 0 && cfg.reflow.T < 1) throw ConfigError("reflow.T", "must be >= 1");
  if (cfg.reflow.steps < 0) throw ConfigError("reflow.steps", "must be >= 0");
  try {
    cfg.steer.validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    // SteeringConfig names its key first, as in "steer.T: must be at least 1".
    const auto colon = msg.find(':');
    throw ConfigError(msg.substr(0, colon), colon == std::string::npos ? msg : trim(msg.substr(colon + 1)));
  }
  if (!one_of(cfg.task.kind, {"box-inpaint", "deblur", "super-resolution"})) {
    throw ConfigError("task.kind", "expected box-inpaint|deblur|super-resolution");
  }
  for (const auto& t : cfg.tasks) {
    if (!one_of(t, {"box-inpaint", "deblur", "super-resolution"})) {
      throw ConfigError("compare.tasks", "unknown task '" + t + "'");
    }
  }
  for (const auto& m : cfg.methods) {
    try {
      parse_steer_mode(m);
    } catch (const std::exception&) {
      throw ConfigError("compare.methods", "unknown method '" + m + "'");
    }
  }
  if (!(cfg.task.loss_weight > 0.0)) throw ConfigError("task.loss_weight", "must be positive");
  for (auto [key, v] : {std::pair{"task.box_weight", cfg.task.box_weight}, {"task.deblur_weight", cfg.task.deblur_weight},
                        {"task.sr_weight", cfg.task.sr_weight}}) {
    if (!(v >= 0.0)) throw ConfigError(key, "must be >= 0");
  }
  if (cfg.task.noise_sigma < 0.0) throw ConfigError("task.noise_sigma", "must be >= 0");
  if (cfg.classifier.hidden.empty()) throw ConfigError("classifier.hidden", "need at least one hidden layer");
  if (!one_of(cfg.theory.kind, {"lemma-affine", "decay", "convergence", "curved-contrast"})) {
    throw ConfigError("theory.kind", "expected lemma-affine|decay|convergence|curved-contrast");
  }
  if (cfg.theory.dim == 0) throw ConfigError("theory.dim", "must be positive");
  if (cfg.theory.T < 1) throw ConfigError("theory.T", "must be >= 1");
  if (cfg.experiment == "invert" || cfg.experiment == "edit") {
    if (!image_dataset(cfg)) throw ConfigError("dataset.kind", cfg.experiment + " needs an image dataset");
  }
  if (cfg.experiment == "edit") {
    if (!cfg.model.conditional) throw ConfigError("model.conditional", "edit needs a conditional model");
    if (cfg.edit.base == cfg.edit.target) throw ConfigError("edit.target", "must differ from edit.base");
  }
}

// ---------------------------------------------------------------------------
// Building blocks

Rng stream_rng(std::uint64_t seed, Stream s, std::uint64_t index) {
  return Rng(seed).split(static_cast<std::uint64_t>(s) + index);
}

Dataset make_dataset(const ExperimentConfig& cfg) {
  Rng rng = stream_rng(cfg.seed, Stream::kData);
  const auto& d = cfg.dataset;
  if (d.kind == "gauss-mix-2d") return gauss_mix_2d(rng, d.n);
  if (d.kind == "two-moons-2d") return two_moons_2d(rng, d.n);
  if (d.kind == "shapes-16x16") return shapes_16x16(rng, d.n);
  if (d.kind == "file-pgm-dir") {
    try {
      return load_pgm_dir(d.path);
    } catch (const std::exception& e) {
      throw ConfigError("dataset.path", e.what());
    }
  }
  throw ConfigError("dataset.kind", "unknown generator '" + d.kind + "'");
}

namespace {

VelocityFieldSpec field_spec(const ExperimentConfig& cfg, const Dataset& ds) {
  VelocityFieldSpec spec;
  spec.data_dim = ds.dim();
  spec.hidden = cfg.model.hidden;
  spec.time_features = cfg.model.time_features;
  spec.class_dim = cfg.model.class_dim;
  spec.num_classes = cfg.model.conditional ? ds.num_classes : 0;
  spec.input_skip = cfg.model.input_skip;
  return spec;
}

// Only the entries that influence training enter the cache key.
std::string model_cache_key(const ExperimentConfig& cfg) {
  ExperimentConfig k;
  k.seed = cfg.seed;
  k.dataset = cfg.dataset;
  k.model = cfg.model;
  k.model.cache_dir.clear();
  k.train = cfg.train;
  k.reflow = cfg.reflow;
  return config_hash(k);
}

}  // namespace

VelocityField make_model(const ExperimentConfig& cfg, const Dataset& ds, ModelReport* report) {
  if (!cfg.model.checkpoint.empty()) {
    VelocityField m;
    try {
      m = VelocityField::load(cfg.model.checkpoint);
    } catch (const std::exception& e) {
      throw ConfigError("model.checkpoint", e.what());
    }
    if (m.dim() != ds.dim()) {
      throw ConfigError("model.checkpoint", "model dimension " + std::to_string(m.dim()) +
                                                " does not match dataset dimension " + std::to_string(ds.dim()));
    }
    return m;
  }
  if (ds.size() == 0) throw ConfigError("dataset.n", "cannot build a model from an empty dataset");
  if (cfg.model.conditional && ds.num_classes < 2) {
    throw ConfigError("model.conditional", "dataset has fewer than two classes");
  }
  const VelocityFieldSpec spec = field_spec(cfg, ds);
  Rng init = stream_rng(cfg.seed, Stream::kModelInit);
  if (cfg.model.init == "zero") return VelocityField(spec, init, true);

  std::string cache_path;
  if (!cfg.model.cache_dir.empty()) {
    cache_path = (fs::path(cfg.model.cache_dir) / ("model-" + model_cache_key(cfg) + ".fsv")).string();
    if (fs::exists(cache_path)) {
      if (report) report->from_cache = true;
      return VelocityField::load(cache_path);
    }
  }

  VelocityField model(spec, init);
  Rng train_rng = stream_rng(cfg.seed, Stream::kTraining);
  {
    FlowTrainer trainer(model, cfg.train);
    auto losses = trainer.fit(ds, train_rng);
    if (report) report->losses = std::move(losses);
  }
  Rng reflow_rng = stream_rng(cfg.seed, Stream::kReflow);
  for (int round = 0; round < cfg.reflow.rounds; ++round) {
    const Dataset pairs = reflow(model, reflow_rng, cfg.reflow.pairs, cfg.reflow.T, spec.num_classes);
    TrainConfig tc = cfg.train;
    tc.steps = cfg.reflow.steps;
    FlowTrainer trainer(model, tc);
    auto losses = trainer.fit(pairs, train_rng);
    if (report) report->reflow_losses = std::move(losses);
  }
  if (!cache_path.empty()) {
    fs::create_directories(cfg.model.cache_dir);
    // Write then rename so concurrent runs never read a partial file.
    const std::string tmp = cache_path + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    model.save(tmp);
    fs::rename(tmp, cache_path);
  }
  return model;
}

Classifier make_classifier(const ExperimentConfig& cfg, const Dataset& ds, ClassifierReport* report) {
  TrainConfig tc = cfg.classifier.train;
  tc.seed = stream_rng(cfg.seed, Stream::kClassifier).next_u64();
  try {
    return train_classifier(ds, tc, cfg.classifier.hidden, report);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("dataset.kind", e.what());
  }
}

double TaskSpec::weight() const {
  double w = 0.0;
  if (kind == "box-inpaint") w = box_weight;
  if (kind == "deblur") w = deblur_weight;
  if (kind == "super-resolution") w = sr_weight;
  return w > 0.0 ? w : loss_weight;
}

DegradationOp make_degradation(const TaskSpec& task, std::size_t height, std::size_t width,
                               std::uint64_t noise_seed) {
  DegradationOp op;
  if (task.kind == "box-inpaint") {
    op = DegradationOp::centered_box_mask(height, width, task.box);
  } else if (task.kind == "deblur") {
    op = DegradationOp::gaussian_blur(height, width, task.blur_kernel, task.blur_sigma);
  } else if (task.kind == "super-resolution") {
    op = DegradationOp::downsample(height, width, task.factor);
  } else {
    throw ConfigError("task.kind", "unknown task '" + task.kind + "'");
  }
  if (task.noise_sigma > 0.0) {
    op = DegradationOp::compose(
        {op, DegradationOp::additive_noise(op.out_height(), op.out_width(), task.noise_sigma, noise_seed)});
  }
  return op;
}

Tensor draw_reference(const ExperimentConfig& cfg, const Dataset& pool, Rng& rng, int cls) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    if (cfg.dataset.kind == "shapes-16x16") {
      const Dataset one = shapes_16x16(rng, 1);
      if (cls < 0 || one.labels[0] == cls) return one.x0;
    } else {
      if (pool.size() == 0) throw ConfigError("dataset.path", "no images to draw a reference from");
      const std::size_t i = static_cast<std::size_t>(rng.below(pool.size()));
      if (cls < 0 || (pool.labeled() && pool.labels[i] == cls)) return pool.select({i}).x0;
    }
  }
  throw ConfigError("edit.base", "no reference of class " + std::to_string(cls) + " found");
}

InvertTrial invert_trial(const VelocityField& model, const Dataset& pool, const ExperimentConfig& cfg,
                         const TaskSpec& task, SteerMode mode, Rng& rng) {
  const std::size_t h = pool.height, w = pool.width;
  InvertTrial r;
  r.reference = draw_reference(cfg, pool, rng);
  const std::uint64_t noise_seed = rng.next_u64();
  r.x_T = gaussian(rng, Shape{1, model.dim()});
  r.x_T_hash = content_hash(r.x_T);
  auto op = std::make_shared<const DegradationOp>(make_degradation(task, h, w, noise_seed));
  const Tensor y = op->apply(r.reference);
  r.observed = clamp(op->lift(y), 0.0, 1.0);
  const CostFunction cost = CostFunction::degraded(op, y, task.weight());
  SteeringConfig sc = cfg.steer;
  sc.mode = mode;
  SteerResult res = run_steering(model, r.x_T, cost, sc);
  r.final_cost = cost.evaluate(res.x0).value;
  r.output = clamp(res.x0, 0.0, 1.0);
  r.trace = std::move(res.trace);
  const Tensor ref_img = r.reference.reshaped(Shape{h, w});
  r.psnr_degraded = psnr(r.observed.reshaped(Shape{h, w}), ref_img);
  r.psnr_output = psnr(r.output.reshaped(Shape{h, w}), ref_img);
  r.ssim_degraded = ssim(r.observed.reshaped(Shape{h, w}), ref_img);
  r.ssim_output = ssim(r.output.reshaped(Shape{h, w}), ref_img);
  return r;
}

EditTrial edit_trial(const VelocityField& model, const Classifier& clf, const Dataset& pool,
                     const ExperimentConfig& cfg, Rng& rng) {
  const std::size_t h = pool.height, w = pool.width;
  EditTrial r;
  r.reference = draw_reference(cfg, pool, rng, cfg.edit.base);
  const Tensor x_T = gaussian(rng, Shape{1, model.dim()});
  // 1 = preserve, 0 = free to change.
  r.mask = Tensor(Shape{1, h * w}, 1.0);
  const std::size_t box = std::min({cfg.edit.free_box, h, w});
  const std::size_t top = (h - box) / 2, left = (w - box) / 2;
  for (std::size_t i = top; i < top + box; ++i)
    for (std::size_t j = left; j < left + box; ++j) r.mask[i * w + j] = 0.0;
  SteerResult res = edit(model, x_T, r.reference, r.mask, cfg.edit.base, cfg.edit.target, cfg.steer, cfg.edit.weight);
  r.output = clamp(res.x0, 0.0, 1.0);
  r.trace = std::move(res.trace);
  r.preserved_psnr = masked_psnr(r.output, r.reference, r.mask);
  const std::vector<int> target{cfg.edit.target};
  r.edit_probability = clf.probability(r.output, target)[0];
  return r;
}

ClassifierGuidanceResult classifier_guidance(const VelocityField& model, const Classifier& clf,
                                             const ExperimentConfig& cfg, Rng& rng) {
  ClassifierGuidanceResult r;
  const std::size_t k = clf.num_classes();
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    r.targets.push_back(cfg.classifier.target >= 0 ? cfg.classifier.target : static_cast<int>(i % k));
  }
  const Tensor x_T = gaussian(rng, Shape{cfg.samples, model.dim()});
  auto shared = std::make_shared<const Classifier>(clf);
  const CostFunction cost = CostFunction::classifier_nll(shared, r.targets, cfg.classifier.weight);
  SteerResult guided = run_steering(model, x_T, cost, cfg.steer);
  r.guided = std::move(guided.x0);
  r.trace = std::move(guided.trace);
  r.unguided = euler_sample(model, x_T, cfg.steer.T, {}, false).x0;
  auto judge = [&](const Tensor& x) {
    return cfg.dataset.kind == "gauss-mix-2d" ? nearest_mode(x, GaussMixSpec{}) : clf.predict(x);
  };
  r.guided_accuracy = accuracy(judge(r.guided), r.targets);
  r.unguided_accuracy = accuracy(judge(r.unguided), r.targets);
  return r;
}

std::vector<LemmaRow> lemma_affine_check(Rng& rng, std::size_t dim, int fields, int times) {
  std::vector<LemmaRow> rows;
  const double a_scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (int f = 0; f < fields; ++f) {
    const Tensor a = scale(gaussian(rng, Shape{dim, dim}), a_scale);
    const AffineField field(a, gaussian(rng, Shape{dim}));
    const Tensor x_t = gaussian(rng, Shape{1, dim});
    const CostFunction cost = CostFunction::mse(gaussian(rng, Shape{1, dim}));
    for (int j = 0; j < times; ++j) {
      const double t = static_cast<double>(times - j) / times;
      const Tensor g = cost.evaluate(estimate_x0(field, x_t, t)).grad;
      const Tensor autodiff = stepwise_gradient(field, x_t, t, cost);
      // Row-vector form of (I + tA)^T g.
      const Tensor closed = axpy(g, t, matmul(g, a));
      LemmaRow row;
      row.field = f;
      row.t = t;
      row.max_rel_error = max_abs_diff(autodiff, closed) / std::max(max_abs(closed), 1e-300);
      row.oracle_cosine = cosine(autodiff, closed);
      row.skip_cosine = cosine(autodiff, g);
      row.closed_skip_cosine = cosine(closed, g);
      rows.push_back(row);
    }
  }
  return rows;
}

DecayCheck decay_check(Rng& rng, std::size_t dim, double s, int T, double omega) {
  const Tensor x1 = gaussian(rng, Shape{1, dim});
  const Tensor x0 = gaussian(rng, Shape{1, dim});
  const Tensor target = axpy(x0, 1.0, gaussian(rng, Shape{1, dim}));
  const Tensor generator = random_skew(rng, dim);
  auto base = std::make_shared<const ConstantField>(sub(x0, x1).reshaped(Shape{dim}));
  std::unique_ptr<Field> rotated;
  const Field* field = base.get();
  if (omega != 0.0) {
    rotated = std::make_unique<RotationPerturbedField>(base, generator, omega);
    field = rotated.get();
  }
  SteeringConfig sc;
  sc.T = T;
  sc.N = 1;
  sc.guidance_scale = s;
  sc.learning_rate = 1.0 / T;
  sc.optimizer = OptimizerKind::kSgd;
  DecayCheck out;
  out.s = s;
  out.trace = steer(*field, x1, CostFunction::mse(target), sc).trace;
  out.dynamics = error_dynamics(out.trace, s);
  return out;
}

ContrastTrial curved_contrast_trial(Rng& rng, std::size_t dim, const SteeringConfig& steer_cfg, double omega) {
  const Tensor x_T = gaussian(rng, Shape{1, dim});
  const Tensor c = gaussian(rng, Shape{dim});
  const Tensor target = gaussian(rng, Shape{1, dim});
  auto base = std::make_shared<const ConstantField>(c);
  const RotationPerturbedField curved(base, random_skew(rng, dim), omega);
  SteeringConfig sc = steer_cfg;
  sc.mode = SteerMode::kFlowchef;
  const CostFunction cost = CostFunction::mse(target);
  ContrastTrial r;
  r.straight_energy = steer(*base, x_T, cost, sc).trace.rows.back().energy;
  r.curved_energy = steer(curved, x_T, cost, sc).trace.rows.back().energy;
  return r;
}

// ---------------------------------------------------------------------------
// Output helpers

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::string indexed(const char* stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.%s", stem, i, ext);
  return buf;
}

// Flushes the partial trace to `path` before rethrowing.
template <class Fn>
auto flush_on_abort(const fs::path& path, Fn&& fn) {
  try {
    return fn();
  } catch (NumericAbort& e) {
    write_trace_csv(path.string(), e.partial);
    throw;
  }
}

void add_counters(EvalCounters& total, const EvalCounters& c) {
  total.forward += c.forward;
  total.backward += c.backward;
  total.note_stored(c.stored_states);
}

Tensor side_by_side(const std::vector<Tensor>& rows, std::size_t h, std::size_t w) {
  Tensor out = rows.front().reshaped(Shape{h, w});
  for (std::size_t i = 1; i < rows.size(); ++i) out = concat_cols(out, rows[i].reshaped(Shape{h, w}));
  return out;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? kMissing : s / static_cast<double>(xs.size());
}

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const char* schema, const std::string& header) : os_(path, std::ios::binary) {
    if (!os_) throw std::runtime_error("cannot write " + path.string());
    os_ << "#schema=" << schema << '\n' << header << '\n';
  }
  template <class... Ts>
  void row(const Ts&... xs) {
    bool first = true;
    ((os_ << (first ? "" : ",") << cell(xs), first = false), ...);
    os_ << '\n';
  }

 private:
  static std::string cell(double v) { return format_real(v); }
  static std::string cell(const std::string& v) { return v; }
  static std::string cell(const char* v) { return v; }
  template <class I, class = std::enable_if_t<std::is_integral_v<I>>>
  static std::string cell(I v) {
    return std::to_string(v);
  }
  std::ofstream os_;
};

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Experiment bodies

void run_train(const ExperimentConfig& cfg, RunSummary& s) {
  const fs::path out(cfg.out);
  const Dataset ds = make_dataset(cfg);
  ModelReport rep;
  const VelocityField model = make_model(cfg, ds, &rep);
  model.save((out / "model.fsv").string());
  CsvWriter csv(out / "train_loss.csv", "flowsteer-train/1", "phase,step,loss");
  for (std::size_t i = 0; i < rep.losses.size(); ++i) csv.row("flow", i, rep.losses[i]);
  for (std::size_t i = 0; i < rep.reflow_losses.size(); ++i) csv.row("reflow", i, rep.reflow_losses[i]);
  auto tail_mean = [](const std::vector<double>& xs) {
    const std::size_t n = std::min<std::size_t>(100, xs.size());
    return mean_of(std::vector<double>(xs.end() - static_cast<long>(n), xs.end()));
  };
  s.metrics["final_loss"] = tail_mean(rep.losses);
  s.metrics["final_reflow_loss"] = tail_mean(rep.reflow_losses);
  s.metrics["parameters"] = static_cast<double>(model.parameter_count());
  Rng rng = stream_rng(cfg.seed, Stream::kTrial);
  s.metrics["straightness"] = straightness(model, rng, 64, 50);
}

void run_sample(const ExperimentConfig& cfg, RunSummary& s) {
  const fs::path out(cfg.out);
  const Dataset ds = make_dataset(cfg);
  const VelocityField model = make_model(cfg, ds);
  Rng rng = stream_rng(cfg.seed, Stream::kTrial);
  const Tensor x_T = gaussian(rng, Shape{cfg.samples, model.dim()});
  std::vector<int> labels;
  if (model.conditional()) {
    for (std::size_t i = 0; i < cfg.samples; ++i) labels.push_back(static_cast<int>(i % model.num_classes()));
  }
  const SampleResult res = euler_sample(model, x_T, cfg.steer.T, labels, false);
  write_trace_csv((out / "trace.csv").string(), res.trace);
  add_counters(s.counters, res.trace.counters);
  if (ds.is_image()) {
    for (std::size_t i = 0; i < cfg.samples; ++i) {
      write_pgm((out / indexed("sample", i, "pgm")).string(), res.x0.row(i).reshaped(Shape{ds.height, ds.width}));
    }
  } else {
    Dataset samples;
    samples.x0 = res.x0;
    samples.labels = labels;
    save_dataset(samples, out.string());
  }
  s.metrics["sample_mean_norm"] = norm(res.x0) / std::sqrt(static_cast<double>(std::max<std::size_t>(1, cfg.samples)));
  if (cfg.dataset.kind == "gauss-mix-2d" && cfg.samples > 0) {
    const auto modes = nearest_mode(res.x0, GaussMixSpec{});
    const Tensor centers = gauss_mix_centers(GaussMixSpec{});
    double within = 0.0;
    for (std::size_t i = 0; i < cfg.samples; ++i) {
      const double dx = res.x0.at(i, 0) - centers.at(static_cast<std::size_t>(modes[i]), 0);
      const double dy = res.x0.at(i, 1) - centers.at(static_cast<std::size_t>(modes[i]), 1);
      within += std::sqrt(dx * dx + dy * dy) < 1.0 ? 1.0 : 0.0;
    }
    s.metrics["fraction_near_mode"] = within / static_cast<double>(cfg.samples);
  }
}

void run_invert(const ExperimentConfig& cfg, RunSummary& s) {
  const fs::path out(cfg.out);
  const Dataset ds = make_dataset(cfg);
  const VelocityField model = make_model(cfg, ds);
  CsvWriter csv(out / "metrics.csv", "flowsteer-invert/1",
                "trial,task,method,psnr_degraded,psnr_output,ssim_degraded,ssim_output,final_cost,"
                "forward_evals,backward_evals,stored_states,x_T_hash");
  std::vector<double> pd, po, sd, so;
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    Rng rng = stream_rng(cfg.seed, Stream::kTrial, i);
    const InvertTrial r = flush_on_abort(out / indexed("trace", i, "csv"), [&] {
      return invert_trial(model, ds, cfg, cfg.task, cfg.steer.mode, rng);
    });
    write_trace_csv((out / indexed("trace", i, "csv")).string(), r.trace);
    const std::size_t h = ds.height, w = ds.width;
    write_pgm((out / indexed("reference", i, "pgm")).string(), r.reference.reshaped(Shape{h, w}));
    write_pgm((out / indexed("degraded", i, "pgm")).string(), r.observed.reshaped(Shape{h, w}));
    write_pgm((out / indexed("output", i, "pgm")).string(), r.output.reshaped(Shape{h, w}));
    write_pgm((out / indexed("side", i, "pgm")).string(), side_by_side({r.reference, r.observed, r.output}, h, w));
    const auto& c = r.trace.counters;
    csv.row(i, cfg.task.kind, steer_mode_name(cfg.steer.mode), r.psnr_degraded, r.psnr_output, r.ssim_degraded,
            r.ssim_output, r.final_cost, c.forward, c.backward, c.stored_states, hex64(r.x_T_hash));
    add_counters(s.counters, c);
    pd.push_back(r.psnr_degraded);
    po.push_back(r.psnr_output);
    sd.push_back(r.ssim_degraded);
    so.push_back(r.ssim_output);
  }
  s.metrics["psnr_degraded"] = mean_of(pd);
  s.metrics["psnr_output"] = mean_of(po);
  s.metrics["ssim_degraded"] = mean_of(sd);
  s.metrics["ssim_output"] = mean_of(so);
}

void run_edit(const ExperimentConfig& cfg, RunSummary& s) {
  const fs::path out(cfg.out);
  const Dataset ds = make_dataset(cfg);
  const VelocityField model = make_model(cfg, ds);
  ClassifierReport crep;
  const Classifier clf = make_classifier(cfg, ds, &crep);
  s.metrics["classifier_heldout_accuracy"] = crep.heldout_accuracy;
  CsvWriter csv(out / "metrics.csv", "flowsteer-edit/1",
                "trial,preserved_psnr,edit_probability,forward_evals,backward_evals,stored_states");
  std::vector<double> pp, ep;
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    Rng rng = stream_rng(cfg.seed, Stream::kTrial, i);
    const EditTrial r =
        flush_on_abort(out / indexed("trace", i, "csv"), [&] { return edit_trial(model, clf, ds, cfg, rng); });
    write_trace_csv((out / indexed("trace", i, "csv")).string(), r.trace);
    const std::size_t h = ds.height, w = ds.width;
    write_pgm((out / indexed("reference", i, "pgm")).string(), r.reference.reshaped(Shape{h, w}));
    write_pgm((out / indexed("output", i, "pgm")).string(), r.output.reshaped(Shape{h, w}));
    write_pgm((out / indexed("side", i, "pgm")).string(), side_by_side({r.reference, r.mask, r.output}, h, w));
    const auto& c = r.trace.counters;
    csv.row(i, r.preserved_psnr, r.edit_probability, c.forward, c.backward, c.stored_states);
    add_counters(s.counters, c);
    pp.push_back(r.preserved_psnr);
    ep.push_back(r.edit_probability);
  }
  s.metrics["preserved_psnr"] = mean_of(pp);
  s.metrics["edit_probability"] = mean_of(ep);
  if (!pp.empty()) s.metrics["min_preserved_psnr"] = *std::min_element(pp.begin(), pp.end());
  if (!ep.empty()) s.metrics["min_edit_probability"] = *std::min_element(ep.begin(), ep.end());
}

void run_classify_guide(const ExperimentConfig& cfg, RunSummary& s) {
  const fs::path out(cfg.out);
  const Dataset ds = make_dataset(cfg);
  const VelocityField model = make_model(cfg, ds);
  ClassifierReport crep;
  const Classifier clf = make_classifier(cfg, ds, &crep);
  Rng rng = stream_rng(cfg.seed, Stream::kTrial);
  const ClassifierGuidanceResult r =
      flush_on_abort(out / "trace.csv", [&] { return classifier_guidance(model, clf, cfg, rng); });
  write_trace_csv((out / "trace.csv").string(), r.trace);
  add_counters(s.counters, r.trace.counters);
  CsvWriter csv(out / "samples.csv", "flowsteer-guide/1", "index,target,guided_x0,guided_x1,unguided_x0,unguided_x1");
  for (std::size_t i = 0; i < r.targets.size(); ++i) {
    csv.row(i, r.targets[i], r.guided.at(i, 0), model.dim() > 1 ? r.guided.at(i, 1) : kMissing, r.unguided.at(i, 0),
            model.dim() > 1 ? r.unguided.at(i, 1) : kMissing);
  }
  s.metrics["classifier_heldout_accuracy"] = crep.heldout_accuracy;
  s.metrics["guided_accuracy"] = r.guided_accuracy;
  s.metrics["unguided_accuracy"] = r.unguided_accuracy;
}

void run_theory(const ExperimentConfig& cfg, RunSummary& s) {
  const fs::path out(cfg.out);
  const auto& th = cfg.theory;
  Rng rng = stream_rng(cfg.seed, Stream::kTrial);
  if (th.kind == "lemma-affine") {
    const auto rows = lemma_affine_check(rng, th.dim, th.fields, th.times);
    CsvWriter csv(out / "gradient_similarity.csv", "flowsteer-lemma/1",
                  "field,t,max_rel_error,oracle_cosine,skip_cosine,closed_form_skip_cosine");
    double worst = 0.0, min_cos = 1.0;
    for (const auto& r : rows) {
      csv.row(r.field, r.t, r.max_rel_error, r.oracle_cosine, r.skip_cosine, r.closed_skip_cosine);
      worst = std::max(worst, r.max_rel_error);
      min_cos = std::min(min_cos, r.oracle_cosine);
    }
    s.metrics["max_rel_error"] = worst;
    s.metrics["min_oracle_cosine"] = min_cos;
  } else if (th.kind == "decay") {
    CsvWriter csv(out / "decay.csv", "flowsteer-decay/1",
                  "s,slope,expected_slope,r2,residual_rms,mean_abs_dE_dt");
    for (std::size_t i = 0; i < th.rates.size(); ++i) {
      Rng r = rng.split(i);
      const DecayCheck d = decay_check(r, th.dim, th.rates[i], th.T);
      write_trace_csv((out / indexed("trace", i, "csv")).string(), d.trace);
      const auto& f = d.dynamics.fit;
      csv.row(d.s, f.slope, -4.0 * d.s, f.r2, d.dynamics.residual_rms, d.dynamics.mean_abs_dE_dt);
      add_counters(s.counters, d.trace.counters);
      char tag_buf[32];
      std::snprintf(tag_buf, sizeof tag_buf, "s=%g", d.s);
      const std::string tag = tag_buf;
      s.metrics[tag + "/slope"] = f.slope;
      s.metrics[tag + "/r2"] = f.r2;
      s.metrics[tag + "/residual_ratio"] = d.dynamics.residual_rms / d.dynamics.mean_abs_dE_dt;
    }
  } else if (th.kind == "convergence") {
    const Tensor x_T = gaussian(rng, Shape{4, th.dim});
    const AffineField linear(scale(identity(th.dim), -1.0), Tensor(Shape{th.dim}));
    const AffineField stiff(scale(identity(th.dim), -5.0), Tensor(Shape{th.dim}));
    const ConstantField constant(Tensor(Shape{th.dim}, 1.0));
    CsvWriter csv(out / "convergence.csv", "flowsteer-convergence/1", "field,steps,error");
    CsvWriter fits(out / "convergence_fit.csv", "flowsteer-convergence-fit/1", "field,slope,intercept,r2,exact");
    const std::vector<std::pair<std::string, const Field*>> fields = {
        {"linear", &linear}, {"stiff", &stiff}, {"constant", &constant}};
    for (const auto& [name, field] : fields) {
      const ConvergenceFit f = convergence_order(*field, x_T, th.T);
      for (std::size_t i = 0; i < f.errors.size(); ++i) csv.row(name, f.step_counts[i], f.errors[i]);
      fits.row(name, f.slope, f.intercept, f.r2, f.exact ? "true" : "false");
      s.metrics[name + "/slope"] = f.slope;
    }
  } else {
    CsvWriter csv(out / "contrast.csv", "flowsteer-contrast/1", "trial,straight_energy,curved_energy,ratio");
    double min_ratio = kMissing;
    for (std::size_t i = 0; i < cfg.samples; ++i) {
      Rng r = rng.split(i);
      const ContrastTrial c = curved_contrast_trial(r, th.dim, cfg.steer, 2.0);
      const double ratio = c.curved_energy / c.straight_energy;
      csv.row(i, c.straight_energy, c.curved_energy, ratio);
      min_ratio = std::isnan(min_ratio) ? ratio : std::min(min_ratio, ratio);
    }
    s.metrics["min_ratio"] = min_ratio;
  }
}

void prepare_out(const ExperimentConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  if (ec || !fs::is_directory(cfg.out)) throw ConfigError("out", "cannot create output directory " + cfg.out);
  const fs::path probe = fs::path(cfg.out) / ".write-test";
  {
    std::ofstream os(probe, std::ios::binary);
    if (!os) throw ConfigError("out", "output directory " + cfg.out + " is not writable");
  }
  fs::remove(probe, ec);
}

template <class Body>
RunSummary guarded_run(const ExperimentConfig& cfg, const std::string& name, Body&& body) {
  RunSummary s;
  s.experiment = name;
  s.seed = cfg.seed;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    validate_config(cfg);
    prepare_out(cfg);
    s.config_hash = config_hash(cfg);
    write_text(fs::path(cfg.out) / "resolved.cfg", resolved_config_text(cfg));
    body(s);
  } catch (const ConfigError& e) {
    s.exit_code = kExitConfig;
    s.error = e.what();
  } catch (const NumericAbort& e) {
    s.exit_code = kExitNumeric;
    s.error = e.what();
  }
  s.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (s.exit_code != kExitConfig || fs::is_directory(cfg.out)) {
    std::error_code ec;
    if (fs::is_directory(cfg.out, ec)) write_summary_json((fs::path(cfg.out) / "summary.json").string(), s);
  }
  return s;
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& cfg) {
  return guarded_run(cfg, cfg.experiment, [&](RunSummary& s) {
    if (cfg.experiment == "train") return run_train(cfg, s);
    if (cfg.experiment == "sample") return run_sample(cfg, s);
    if (cfg.experiment == "invert") return run_invert(cfg, s);
    if (cfg.experiment == "edit") return run_edit(cfg, s);
    if (cfg.experiment == "classify-guide") return run_classify_guide(cfg, s);
    return run_theory(cfg, s);
  });
}

RunSummary run_compare(const ExperimentConfig& cfg) {
  return guarded_run(cfg, "compare", [&](RunSummary& s) {
    if (cfg.methods.size() < 2) {
      throw ConfigError("compare.methods",
                        "need at least two methods, e.g. compare.methods = flowchef,unguided "
                        "(choices: flowchef, stepwise-backprop, full-chain-backprop, unguided)");
    }
    if (!image_dataset(cfg)) throw ConfigError("dataset.kind", "compare needs an image dataset");
    const fs::path out(cfg.out);
    const Dataset ds = make_dataset(cfg);
    const VelocityField model = make_model(cfg, ds);
    CsvWriter csv(out / "comparison.csv", "flowsteer-compare/1",
                  "task,method,trial,status,psnr,ssim,psnr_degraded,final_cost,forward_evals,backward_evals,"
                  "stored_states,x_T_hash");
    for (const auto& task_name : cfg.tasks) {
      TaskSpec task = cfg.task;
      task.kind = task_name;
      for (const auto& method : cfg.methods) {
        const SteerMode mode = parse_steer_mode(method);
        std::vector<double> ps, ss;
        double failures = 0.0;
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < cfg.samples; ++i) {
          Rng rng = stream_rng(cfg.seed, Stream::kTrial, i);
          try {
            const InvertTrial r = invert_trial(model, ds, cfg, task, mode, rng);
            const auto& c = r.trace.counters;
            csv.row(task_name, method, i, "ok", r.psnr_output, r.ssim_output, r.psnr_degraded, r.final_cost,
                    c.forward, c.backward, c.stored_states, hex64(r.x_T_hash));
            add_counters(s.counters, c);
            ps.push_back(r.psnr_output);
            ss.push_back(r.ssim_output);
          } catch (const std::exception& e) {
            // NumericAbort or a stored-state guard: the row is marked failed.
            std::string msg = e.what();
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            Rng again = stream_rng(cfg.seed, Stream::kTrial, i);
            draw_reference(cfg, ds, again);
            again.next_u64();
            const std::uint64_t h = content_hash(gaussian(again, Shape{1, model.dim()}));
            csv.row(task_name, method, i, "failed: " + msg, kMissing, kMissing, kMissing, kMissing, "", "", "",
                    hex64(h));
            failures += 1.0;
          }
        }
        const std::string tag = task_name + "/" + method;
        s.metrics[tag + "/psnr"] = mean_of(ps);
        s.metrics[tag + "/ssim"] = mean_of(ss);
        s.metrics[tag + "/failures"] = failures;
        s.timings[tag + "/wall_time_s"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
    }
  });
}

RunSummary run_dataset(const ExperimentConfig& cfg) {
  return guarded_run(cfg, "dataset", [&](RunSummary& s) {
    const Dataset ds = make_dataset(cfg);
    try {
      save_dataset(ds, cfg.out);
    } catch (const std::runtime_error& e) {
      throw ConfigError("out", e.what());
    }
    s.metrics["samples"] = static_cast<double>(ds.size());
    if (ds.labeled()) {
      for (std::size_t k = 0; k < ds.num_classes; ++k) {
        s.metrics["class_" + std::to_string(k)] =
            static_cast<double>(std::count(ds.labels.begin(), ds.labels.end(), static_cast<int>(k)));
      }
    }
  });
}

unsigned worker_limit() {
  if (const char* env = std::getenv("FLOWSTEER_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int run_trials(const ExperimentConfig& cfg, int trials, RunSummary (*runner)(const ExperimentConfig&)) {
  if (trials <= 1) return runner(cfg).exit_code;
  std::vector<ExperimentConfig> configs;
  for (int i = 0; i < trials; ++i) {
    ExperimentConfig c = cfg;
    c.seed = Rng(cfg.seed).split(static_cast<std::uint64_t>(i)).next_u64();
    c.out = (fs::path(cfg.out) / indexed("trial", static_cast<std::size_t>(i), "d")).string();
    c.out.resize(c.out.size() - 2);  // drop the ".d" suffix
    configs.push_back(std::move(c));
  }
  std::vector<int> codes(configs.size(), 0);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) codes[i] = runner(configs[i]).exit_code;
  };
  const unsigned n = std::min<unsigned>(worker_limit(), static_cast<unsigned>(configs.size()));
  std::vector<std::thread> pool;
  for (unsigned i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return *std::max_element(codes.begin(), codes.end());
}

void write_summary_json(const std::string& path, const RunSummary& s) {
  nlohmann::ordered_json j;
  j["experiment"] = s.experiment;
  j["config_hash"] = s.config_hash;
  j["seed"] = s.seed;
  j["exit_code"] = s.exit_code;
  if (!s.error.empty()) j["error"] = s.error;
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  for (const auto& [k, v] : s.metrics) m[k] = std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json();
  j["metrics"] = m;
  j["counters"] = {{"forward_evals", s.counters.forward},
                   {"backward_evals", s.counters.backward},
                   {"stored_states", s.counters.stored_states}};
  nlohmann::ordered_json t = nlohmann::ordered_json::object();
  for (const auto& [k, v] : s.timings) t[k] = v;
  t["total_wall_time_s"] = s.wall_time_s;
  j["timings"] = t;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << j.dump(2) << '\n';
}

}  // namespace flowsteer
