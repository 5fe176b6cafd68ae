// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace reformer {

struct GradCheckSuiteOptions {
  // Random configurations per case.
  std::size_t configurations = 20;
  std::uint64_t seed = 42;
  double tolerance = 1e-4;
  double eps = 1e-5;
  // Sampled coordinates per parameter tensor in the full-model case.
  std::size_t model_coords_per_param = 3;
};

struct GradCheckCase {
  std::string name;          // e.g. "encoder_layer#7"
  double max_rel_error = 0.0;
  std::string worst;         // parameter holding the worst coordinate
  double analytic = 0.0;     // gradients at the worst coordinate
  double numeric = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

// Central-difference checks of every layer and of the full model objective
// (caption loss plus weighted relation loss) over random shapes, masks,
// flags and weights.
std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckSuiteOptions& options = {});

}  // namespace reformer
