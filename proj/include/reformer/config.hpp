// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>

#include <json.hpp>

namespace reformer {

// Architecture and objective settings. Defaults follow the published
// full-scale setup; toy experiments override widths and depths.
struct ReFormerConfig {
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t encoder_layers = 3;
  std::size_t decoder_layers = 3;
  std::size_t d_box = 100;
  std::size_t d_label = 300;
  std::size_t d_fused = 512;
  std::size_t d_visual = 2048;
  std::size_t ffn_mult = 4;

  // Drop probability after each attention and feed-forward sublayer. The
  // full-scale value of 0.9 is taken as a keep probability.
  double dropout = 0.1;

  // Weight of the relation loss in L_c + lambda * L_r.
  double lambda = 0.1;

  std::size_t vocab_size = 10201;
  std::size_t num_object_classes = 1600;
  // Relation classes including background at id 0.
  std::size_t num_predicates = 51;

  std::size_t max_caption_len = 20;
  std::size_t beam_size = 3;

  // Ablations.
  bool freeze_encoder_in_caption = false;
  bool use_relation_loss = true;
  bool weighted_relation_loss = false;
  bool use_object_loss = true;

  // Background pairs kept per foreground pair in the relation loss; a
  // negative value keeps every background pair.
  double background_pair_sample_ratio = 3.0;

  // Probability of feeding the unknown-label embedding instead of the given
  // label for a region during training, so the object head also learns to
  // classify regions that arrive without labels.
  double label_dropout = 0.25;

  // Throws ConfigError on inconsistent values.
  void validate() const;

  friend bool operator==(const ReFormerConfig&,
                         const ReFormerConfig&) = default;
};

void to_json(nlohmann::json& j, const ReFormerConfig& c);
// Missing keys keep their current values; unknown keys are rejected.
void from_json(const nlohmann::json& j, ReFormerConfig& c);
void apply_json(const nlohmann::json& j, ReFormerConfig& c);

}  // namespace reformer
