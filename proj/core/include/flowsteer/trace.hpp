// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "flowsteer/tensor.hpp"

namespace flowsteer {

/// Abstract compute measurements. forward/backward count evaluations of the
/// velocity field (one per batched call); stored_states is the peak number of
/// full-size state tensors held for differentiation.
struct EvalCounters {
  long forward = 0;
  long backward = 0;
  long stored_states = 0;

  void note_stored(long n) {
    if (n > stored_states) stored_states = n;
  }
};

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

struct TraceRow {
  int step = 0;
  double t = 0.0;
  double cost = kMissing;
  /// Squared residual of x0_hat against the cost's target or observation.
  double energy = kMissing;
  /// Cosine between grad wrt x_t and grad wrt x0_hat, when both were computed.
  double cosine = kMissing;
  double grad_norm = kMissing;
  EvalCounters counters;
  Tensor x0_hat;
  Tensor x_t;  // empty unless the snapshot stride selects this step
};

struct TrajectoryTrace {
  std::vector<TraceRow> rows;
  /// Cost after each outer iteration (full-chain mode only).
  std::vector<double> outer_costs;
  EvalCounters counters;
  /// Keep x_t every this many steps; 0 disables snapshots.
  int snapshot_stride = 0;
  /// Step at which a numeric abort happened, or -1.
  int aborted_at = -1;

  std::vector<double> energies() const;
  std::vector<double> times() const;
};

inline constexpr const char* kTraceSchema = "flowsteer-trace/1";

/// Columns: step,t,cost,energy,cosine,grad_norm,forward_evals,backward_evals,stored_states.
/// Missing values are empty fields; reals use 17 significant digits.
void write_trace_csv(std::ostream& os, const TrajectoryTrace& trace);
void write_trace_csv(const std::string& path, const TrajectoryTrace& trace);

/// Round-trippable text form of a double; NaN becomes the empty string.
std::string format_real(double v);

}  // namespace flowsteer
