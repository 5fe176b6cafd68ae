// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "reformer/autograd.hpp"
#include "reformer/config.hpp"
#include "reformer/nn.hpp"
#include "reformer/scene_graph.hpp"

namespace reformer {

// Region-level input for one image.
struct RegionInput {
  Tensor features;  // [n, d_visual]
  std::vector<BoundingBox> boxes;
  // Absent labels use the unknown-label embedding.
  std::optional<std::vector<int>> labels;
  double image_width = 0.0;
  double image_height = 0.0;

  std::size_t size() const { return boxes.size(); }
};

struct EncoderOutput {
  Var features;  // [n, d_model]
  std::vector<bool> valid;
  std::vector<BoundingBox> boxes;
  double image_width = 0.0;
  double image_height = 0.0;

  std::size_t size() const { return boxes.size(); }
};

struct LossBreakdown {
  double total = 0.0;
  double caption = 0.0;
  double relation = 0.0;
  // Object-classification part of `relation`.
  double object = 0.0;
  // Set when the image has fewer than two regions (no pair term).
  bool no_pairs = false;
};

struct RelationLoss {
  Var loss;        // predicate term + object term
  Var predicate;   // invalid when no_pairs
  Var object;      // invalid when the object term is disabled
  bool no_pairs = false;
};

struct TotalLoss {
  Var total;
  LossBreakdown values;
};

enum class DecodeMode { kGreedy, kBeam, kSample };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::kGreedy;
  std::size_t beam_size = 3;
  double temperature = 1.0;
  // 0 uses the config value.
  std::size_t max_len = 0;
  // Required for kSample.
  std::mt19937_64* rng = nullptr;
};

struct GeneratedCaption {
  std::vector<int> tokens;  // without BOS; ends with EOS unless truncated
  double logprob = 0.0;
  bool truncated = false;
};

struct SceneGraphPrediction {
  SceneGraph graph;
  std::vector<ScoredTriplet> triplets;  // sorted by score, descending
  std::vector<int> labels;             // given or predicted
};

// Shared relational encoder with a scene-graph side (relation and object
// heads) and a language side (caption decoder).
//
// Parameter name prefixes: "embed.", "encoder.", "relation.", "object.",
// "decoder.".
class ReFormer {
 public:
  explicit ReFormer(const ReFormerConfig& config, std::uint64_t seed = 42);

  ReFormer(const ReFormer&) = delete;
  ReFormer& operator=(const ReFormer&) = delete;

  const ReFormerConfig& config() const { return config_; }
  nn::ParamStore& params() { return *store_; }
  const nn::ParamStore& params() const { return *store_; }

  // Last completed training step (0 = untrained, 1..3).
  int trained_stage() const { return trained_stage_; }
  void set_trained_stage(int stage) { trained_stage_ = stage; }

  // Parameter count of a configuration, computed without allocating it.
  static std::size_t parameter_count(const ReFormerConfig& config);

  Var embed_regions(Tape& tape, const RegionInput& input) const;
  EncoderOutput encode_tokens(Tape& tape, Var tokens,
                              const RegionInput& input) const;
  EncoderOutput encode(Tape& tape, const RegionInput& input) const;

  // Logits [|pairs|, num_predicates]; column 0 is background.
  Var relation_head(Tape& tape, const EncoderOutput& enc,
                    std::span<const std::pair<std::size_t, std::size_t>> pairs) const;
  // Logits [n, num_object_classes].
  Var object_head(Tape& tape, const EncoderOutput& enc) const;

  // `tokens` starts with BOS; row t of the [m, vocab] result scores the
  // token following tokens[0..t].
  Var decode_teacher_forced(Tape& tape, const EncoderOutput& enc,
                            std::span<const int> tokens) const;

  // Runs on the given tape with gradients disabled.
  GeneratedCaption generate_caption(Tape& tape, const EncoderOutput& enc,
                                    const DecodeOptions& options = {}) const;

  // `labels` given means the region labels are known (PredCls); otherwise
  // they come from the object head and scale each triplet score.
  SceneGraphPrediction generate_scene_graph(
      Tape& tape, const EncoderOutput& enc,
      const std::optional<std::vector<int>>& labels, std::size_t top_k) const;

  // Scene-graph objective for one image. `predicate_weights` (empty for
  // unweighted) applies when the config enables weighting.
  RelationLoss relation_loss(Tape& tape, const EncoderOutput& enc,
                             const SceneGraph& gt,
                             std::span<const double> predicate_weights = {}) const;

 private:
  ReFormer(const ReFormerConfig& config, std::uint64_t seed, bool allocate);

  // Logits for the token following `prefix` (grad must be disabled).
  std::vector<double> next_token_logits(Tape& tape, const EncoderOutput& enc,
                                        const std::vector<int>& prefix) const;

  ReFormerConfig config_;
  std::unique_ptr<nn::ParamStore> store_;
  int trained_stage_ = 0;

  nn::Linear visual_, box_, fuse_, to_model_;
  nn::Embedding label_;
  std::vector<nn::EncoderLayer> encoder_;
  nn::LayerNorm encoder_norm_;
  nn::Linear rel_hidden_, rel_out_;
  nn::Linear object_out_;
  nn::Embedding word_;
  std::vector<nn::DecoderLayer> decoder_;
  nn::LayerNorm decoder_norm_;
  nn::Linear vocab_out_;
};

// Mean next-token cross-entropy with `pad_id` targets ignored.
Var caption_loss(Var logits, std::span<const int> targets, int pad_id = 0);

// total = caption + lambda * relation. With lambda == 0 the total is the
// caption node itself.
TotalLoss total_loss(Var caption, const RelationLoss& relation, double lambda);

// Inverse-frequency predicate weights over the foreground pairs and the
// background pairs of `graphs`; the background weight is capped at 1 and
// unseen classes get weight 1.
std::vector<double> predicate_class_weights(const std::vector<SceneGraph>& graphs,
                                            std::size_t num_predicates);

// [BOS, w..., EOS] split into decoder input and next-token target.
std::pair<std::vector<int>, std::vector<int>> teacher_forcing_pair(
    const std::vector<int>& words, std::size_t max_len);

}  // namespace reformer
