// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "reformer/config.hpp"
#include "reformer/tensor.hpp"

namespace reformer::testing {

inline Tensor random_tensor(std::mt19937_64& rng, const Shape& shape, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(shape);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Small model used across the model and training tests.
inline ReFormerConfig tiny_config(std::size_t vocab_size = 12) {
  ReFormerConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.d_box = 4;
  c.d_label = 4;
  c.d_fused = 16;
  c.d_visual = 8;
  c.ffn_mult = 2;
  c.vocab_size = vocab_size;
  c.num_object_classes = 6;
  c.num_predicates = 6;
  c.max_caption_len = 8;
  return c;
}

// Unique scratch path under the system temp directory.
std::string temp_path(const std::string& name);

}  // namespace reformer::testing
