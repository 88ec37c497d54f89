// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

// flowsteer <run|compare|dataset> --config PATH [--seed U64] [--out DIR] [--trials N]

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowsteer/experiment.hpp"

namespace {

void print_summary(const flowsteer::RunSummary& s, const std::string& out) {
  if (s.exit_code != flowsteer::kExitOk) {
    std::cerr << "flowsteer: " << s.error << '\n';
    return;
  }
  std::cout << s.experiment << " ok  hash=" << s.config_hash << "  out=" << out << '\n';
  for (const auto& [k, v] : s.metrics) std::cout << "  " << k << " = " << flowsteer::format_real(v) << '\n';
  std::cout << "  forward_evals = " << s.counters.forward << "\n  backward_evals = " << s.counters.backward
            << "\n  stored_states = " << s.counters.stored_states << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowsteer: desk-scale rectified-flow steering experiments"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  int trials = 1;
  std::vector<std::string> overrides;

  std::vector<CLI::App*> commands = {
      app.add_subcommand("run", "Run the configured experiment"),
      app.add_subcommand("compare", "Compare steering methods on identical noise"),
      app.add_subcommand("dataset", "Write the configured dataset to --out"),
  };
  for (auto* cmd : commands) {
    cmd->add_option("--config", config_path, "key = value configuration file")->required();
    cmd->add_option("--seed", seed, "Run seed (overrides the config)");
    cmd->add_option("--out", out, "Output directory (overrides the config)");
    cmd->add_option("--trials", trials, "Independent trials with split seeds")->check(CLI::PositiveNumber);
    cmd->add_option("--set", overrides, "Extra KEY=VALUE entries applied after the file");
  }
  auto* presets = app.add_subcommand("presets", "List built-in presets and configuration keys");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : flowsteer::kExitConfig;
  }

  if (presets->parsed()) {
    std::cout << "presets:\n";
    for (const auto& p : flowsteer::preset_names()) std::cout << "  " << p << '\n';
    std::cout << "keys (defaults):\n";
    for (const auto& [k, v] : flowsteer::config_keys()) std::cout << "  " << k << " = " << v << '\n';
    return 0;
  }

  flowsteer::ExperimentConfig cfg;
  try {
    cfg = flowsteer::load_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw flowsteer::ConfigError("--set", "expected KEY=VALUE, got '" + kv + "'");
      flowsteer::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    for (auto* cmd : commands) {
      if (!cmd->parsed()) continue;
      if (cmd->count("--seed")) cfg.seed = seed;
      if (cmd->count("--out")) cfg.out = out;
    }
  } catch (const flowsteer::ConfigError& e) {
    std::cerr << "flowsteer: config error: " << e.what() << '\n';
    return flowsteer::kExitConfig;
  }

  flowsteer::RunSummary (*runner)(const flowsteer::ExperimentConfig&) = &flowsteer::run_experiment;
  if (commands[1]->parsed()) runner = &flowsteer::run_compare;
  if (commands[2]->parsed()) runner = &flowsteer::run_dataset;

  if (trials > 1) {
    const int code = flowsteer::run_trials(cfg, trials, runner);
    std::cout << trials << " trials finished under " << cfg.out << " (exit " << code << ")\n";
    return code;
  }
  const flowsteer::RunSummary s = runner(cfg);
  print_summary(s, cfg.out);
  return s.exit_code;
}
