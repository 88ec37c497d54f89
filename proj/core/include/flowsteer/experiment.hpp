// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowsteer/analysis.hpp"
#include "flowsteer/classifier.hpp"
#include "flowsteer/dataset.hpp"
#include "flowsteer/flow_model.hpp"
#include "flowsteer/guidance.hpp"

namespace flowsteer {

// ---------------------------------------------------------------------------
// Configuration

/// Invalid or unknown configuration entry; `key` names the first offender.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& msg)
      : std::runtime_error(key.empty() ? msg : key + ": " + msg), key(std::move(key)) {}
  std::string key;
};

struct DatasetSpec {
  /// gauss-mix-2d | two-moons-2d | shapes-16x16 | file-pgm-dir
  std::string kind = "gauss-mix-2d";
  std::size_t n = 4000;
  std::string path;
};

struct ModelSpec {
  /// Load this checkpoint instead of training when set.
  std::string checkpoint;
  /// trained | zero
  std::string init = "trained";
  std::vector<std::size_t> hidden{128, 128};
  std::size_t time_features = 8;
  std::size_t class_dim = 16;
  bool conditional = false;
  /// Velocity = network output - x.
  bool input_skip = false;
  /// Trained checkpoints are stored here keyed by the config hash.
  std::string cache_dir;
};

struct ReflowSpec {
  int rounds = 1;
  std::size_t pairs = 4000;
  int T = 100;
  int steps = 3000;
};

/// Degradation task for invert and compare runs.
struct TaskSpec {
  /// box-inpaint | deblur | super-resolution
  std::string kind = "box-inpaint";
  std::size_t box = 6;
  std::size_t blur_kernel = 5;
  double blur_sigma = 1.0;
  std::size_t factor = 2;
  double noise_sigma = 0.0;
  double loss_weight = 1e-4;
  /// Per-kind overrides of loss_weight; 0 keeps loss_weight.
  double box_weight = 0.0;
  double deblur_weight = 0.0;
  double sr_weight = 0.0;
  /// Cost weight for the current kind.
  double weight() const;
};

inline TrainConfig default_classifier_training() {
  TrainConfig c;
  c.steps = 1500;
  c.batch = 64;
  return c;
}

struct ClassifierSpec {
  std::vector<std::size_t> hidden{64, 64};
  TrainConfig train = default_classifier_training();
  /// Cost weight of the negative log-likelihood.
  double weight = 1.0;
  /// Target class for guidance; -1 cycles through the classes by sample index.
  int target = -1;
};

struct EditSpec {
  int base = 0;
  int target = 1;
  /// Side of the centred square that may change.
  std::size_t free_box = 12;
  double weight = 1.0;
};

struct TheorySpec {
  /// lemma-affine | decay | convergence | curved-contrast
  std::string kind = "lemma-affine";
  std::size_t dim = 8;
  int fields = 20;
  int times = 10;
  std::vector<double> rates{0.05, 0.1};
  int T = 2000;
};

struct ExperimentConfig {
  /// train | sample | invert | edit | classify-guide | theory
  std::string experiment = "sample";
  std::string preset;
  std::uint64_t seed = 0;
  std::string out = "flowsteer-out";
  /// Samples, images or trials processed within one run.
  std::size_t samples = 8;

  DatasetSpec dataset;
  ModelSpec model;
  TrainConfig train;
  ReflowSpec reflow;
  SteeringConfig steer;
  TaskSpec task;
  ClassifierSpec classifier;
  EditSpec edit;
  TheorySpec theory;
  /// compare: methods and degradation tasks.
  std::vector<std::string> methods{"flowchef", "unguided"};
  std::vector<std::string> tasks{"box-inpaint"};
};

/// Names of the built-in presets.
std::vector<std::string> preset_names();
/// key=value lines of a preset; throws ConfigError for unknown names.
std::vector<std::pair<std::string, std::string>> preset_entries(const std::string& name);

/// Parses `key = value` lines ('#' starts a comment). A `preset` entry is
/// expanded first; the remaining entries override it in file order.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
/// Applies a single entry; throws ConfigError for unknown keys or bad values.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
/// Every key in a fixed order; parse_config(resolved_config_text(c)) == c.
std::string resolved_config_text(const ExperimentConfig& cfg);
/// FNV-1a of the resolved text, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);
/// Cross-field checks; throws ConfigError.
void validate_config(const ExperimentConfig& cfg);
/// Documented keys with their defaults.
std::vector<std::pair<std::string, std::string>> config_keys();

// ---------------------------------------------------------------------------
// Building blocks

/// Independent streams derived from the run seed.
enum class Stream : std::uint64_t { kData = 1, kModelInit, kTraining, kReflow, kClassifier, kTrial = 100 };
Rng stream_rng(std::uint64_t seed, Stream s, std::uint64_t index = 0);

Dataset make_dataset(const ExperimentConfig& cfg);

struct ModelReport {
  std::vector<double> losses;         // first training round
  std::vector<double> reflow_losses;  // last reflow round
  bool from_cache = false;
};

/// Loads, zero-initializes or trains (with reflow rounds) the velocity field.
VelocityField make_model(const ExperimentConfig& cfg, const Dataset& ds, ModelReport* report = nullptr);
Classifier make_classifier(const ExperimentConfig& cfg, const Dataset& ds, ClassifierReport* report = nullptr);

DegradationOp make_degradation(const TaskSpec& task, std::size_t height, std::size_t width,
                               std::uint64_t noise_seed);

/// One inverse-problem trial on an image dataset.
struct InvertTrial {
  Tensor reference;  // [1, H*W]
  Tensor observed;   // lifted observation [1, H*W], clamped to [0, 1]
  Tensor x_T;
  Tensor output;     // clamped to [0, 1]
  TrajectoryTrace trace;
  double psnr_degraded = 0.0, psnr_output = 0.0;
  double ssim_degraded = 0.0, ssim_output = 0.0;
  double final_cost = 0.0;
  std::uint64_t x_T_hash = 0;
};

/// A held-out image: a fresh generator draw, or a random row of `pool` for
/// file datasets. With class >= 0 only that class is accepted.
Tensor draw_reference(const ExperimentConfig& cfg, const Dataset& pool, Rng& rng, int cls = -1);

/// Draws reference, observation noise seed and x_T from `rng` (in that order),
/// then steers in `mode`. Callers that pass copies of one rng get identical
/// x_T across methods. Throws NumericAbort from the steering call.
InvertTrial invert_trial(const VelocityField& model, const Dataset& pool, const ExperimentConfig& cfg,
                         const TaskSpec& task, SteerMode mode, Rng& rng);

struct EditTrial {
  Tensor reference, output, mask;
  TrajectoryTrace trace;
  double preserved_psnr = 0.0;
  double edit_probability = 0.0;
};

/// Reference drawn from the base class; mask preserves everything outside a
/// centred free_box square.
EditTrial edit_trial(const VelocityField& model, const Classifier& clf, const Dataset& pool,
                     const ExperimentConfig& cfg, Rng& rng);

struct ClassifierGuidanceResult {
  std::vector<int> targets;
  Tensor guided, unguided;
  TrajectoryTrace trace;
  double guided_accuracy = 0.0;
  double unguided_accuracy = 0.0;
};

ClassifierGuidanceResult classifier_guidance(const VelocityField& model, const Classifier& clf,
                                             const ExperimentConfig& cfg, Rng& rng);

// Theory checks on synthetic fields.

struct LemmaRow {
  int field = 0;
  double t = 0.0;
  double max_rel_error = 0.0;    // autodiff vs (I + tA)^T g
  double oracle_cosine = 0.0;    // cosine(autodiff, closed form)
  double skip_cosine = 0.0;      // cosine(autodiff, g)
  double closed_skip_cosine = 0.0;
};

std::vector<LemmaRow> lemma_affine_check(Rng& rng, std::size_t dim, int fields, int times);

struct DecayCheck {
  double s = 0.0;
  TrajectoryTrace trace;
  ErrorDynamics dynamics;
};

/// Constant single-pair field with mse-to-target guidance at s' = s / T.
/// omega > 0 adds a rotation of that rate to the field.
DecayCheck decay_check(Rng& rng, std::size_t dim, double s, int T, double omega = 0.0);

struct ContrastTrial {
  double straight_energy = 0.0;
  double curved_energy = 0.0;
};

/// Same x_T, target and guidance on a constant field and on the same field
/// with an added rotation.
ContrastTrial curved_contrast_trial(Rng& rng, std::size_t dim, const SteeringConfig& steer, double omega);

// ---------------------------------------------------------------------------
// Runs

struct RunSummary {
  std::string experiment;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;
  EvalCounters counters;  // summed over steering calls; stored_states is the peak
  /// Wall-clock seconds; never part of the deterministic outputs.
  double wall_time_s = 0.0;
  std::map<std::string, double> timings;
  int exit_code = 0;
  std::string error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

/// Runs the experiment and writes artifacts under cfg.out. Numeric aborts are
/// reported with exit_code 3 after the partial trace is flushed.
RunSummary run_experiment(const ExperimentConfig& cfg);

/// One row per method x task x trial; methods see identical x_T per trial.
RunSummary run_compare(const ExperimentConfig& cfg);

/// Writes the configured dataset (PGM + manifest.csv, or samples.csv).
RunSummary run_dataset(const ExperimentConfig& cfg);

/// --trials fan-out: trial i runs with a split seed in out/trial_NNN on at most
/// worker_limit() threads. Returns the largest exit code.
int run_trials(const ExperimentConfig& cfg, int trials, RunSummary (*runner)(const ExperimentConfig&));

/// FLOWSTEER_THREADS when set and positive, otherwise the hardware concurrency.
unsigned worker_limit();

void write_summary_json(const std::string& path, const RunSummary& s);

}  // namespace flowsteer
