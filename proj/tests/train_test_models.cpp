// Copyright 2026 The flowsteer Authors
// SPDX-License-Identifier: Apache-2.0

// Trains the models the unit tests share and stores them in the cache.

#include <cstdio>
#include <exception>

#include "test_models.hpp"

int main() {
  using namespace flowsteer;
  try {
    for (const auto& cfg : {testing::gauss_model_config(0), testing::gauss_model_config(1),
                            testing::gauss_model_config(1, true), testing::shapes_model_config()}) {
      ModelReport rep;
      make_model(cfg, make_dataset(cfg), &rep);
      std::printf("%s model (%s, reflow rounds %d): %s\n", cfg.dataset.kind.c_str(),
                  cfg.model.conditional ? "conditional" : "unconditional", cfg.reflow.rounds,
                  rep.from_cache ? "cached" : "trained");
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
