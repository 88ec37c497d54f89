// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsteer/trace.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <stdexcept>

namespace flowsteer {

std::vector<double> TrajectoryTrace::energies() const {
  std::vector<double> e;
  e.reserve(rows.size());
  for (const auto& r : rows) e.push_back(r.energy);
  return e;
}

std::vector<double> TrajectoryTrace::times() const {
  std::vector<double> t;
  t.reserve(rows.size());
  for (const auto& r : rows) t.push_back(r.t);
  return t;
}

std::string format_real(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_trace_csv(std::ostream& os, const TrajectoryTrace& trace) {
  os << "#schema=" << kTraceSchema << '\n';
  os << "step,t,cost,energy,cosine,grad_norm,forward_evals,backward_evals,stored_states\n";
  for (const auto& r : trace.rows) {
    os << r.step << ',' << format_real(r.t) << ',' << format_real(r.cost) << ',' << format_real(r.energy) << ','
       << format_real(r.cosine) << ',' << format_real(r.grad_norm) << ',' << r.counters.forward << ','
       << r.counters.backward << ',' << r.counters.stored_states << '\n';
  }
}

void write_trace_csv(const std::string& path, const TrajectoryTrace& trace) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write trace to " + path);
  write_trace_csv(os, trace);
}

}  // namespace flowsteer
