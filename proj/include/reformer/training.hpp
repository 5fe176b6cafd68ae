// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "reformer/autograd.hpp"
#include "reformer/data_io.hpp"
#include "reformer/metrics.hpp"
#include "reformer/model.hpp"

namespace reformer {

// ---------------------------------------------------------------------------
// Optimizer and schedule

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Frozen parameters are
// skipped and keep zero moments.
class Adam {
 public:
  explicit Adam(std::vector<Parameter*> params, AdamOptions options = {});

  // Throws NumericalError naming the first parameter with a non-finite
  // gradient, before touching any value.
  void step(double lr);

  std::size_t steps() const { return steps_; }
  const Tensor& first_moment(std::size_t i) const { return m_[i]; }
  const Tensor& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamOptions options_;
  std::size_t steps_ = 0;
};

// Scales all gradients so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

// d^-0.5 * min(step^-0.5, step * warmup^-1.5), step >= 1.
double warmup_lr(std::size_t step, std::size_t d, std::size_t warmup = 10000);

inline constexpr double kScstLearningRate = 5e-6;

// -(reward - baseline) * sum(logprobs); only `logprobs` carries gradient.
Var scst_loss(Var sample_logprobs, double reward, double baseline);

// ---------------------------------------------------------------------------
// Data

struct TrainingExample {
  std::string image_id;
  RegionInput regions;  // with labels
  SceneGraph graph;
  std::vector<int> caption_in;      // BOS + words
  std::vector<int> caption_target;  // words + EOS
  std::vector<Tokens> references;   // every caption, split into words
};

struct TrainingData {
  std::vector<TrainingExample> examples;
  // Inverse-frequency weights for the weighted relation loss.
  std::vector<double> predicate_weights;
  // Document frequencies over the training references (SCST reward).
  std::shared_ptr<const CiderD> cider;
  Vocabulary vocab;
};

// Uses each record's first caption as the teacher-forcing target.
TrainingData prepare_training_data(const std::vector<ImageRecord>& records,
                                   const Vocabulary& vocab,
                                   const ReFormerConfig& config);

// ---------------------------------------------------------------------------
// Sequential training

struct StepLog {
  std::size_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_caption = 0.0;
  double loss_relation = 0.0;
};

nlohmann::json to_json(const StepLog& s);

struct StageOptions {
  std::size_t epochs = 1;
  // When nonzero, stop after this many optimizer steps.
  std::size_t max_steps = 0;
  std::size_t batch_size = 8;
  std::size_t warmup = 10000;
  // Multiplies the warmup schedule.
  double lr_factor = 1.0;
  // Replaces the schedule when set.
  std::optional<double> fixed_lr;
  double clip_norm = 1.0;
  std::uint64_t seed = 42;
  // Allows step (ii) without step (i) (the no-relation-loss ablation).
  bool cold_start = false;
  // Receives one JSON object per optimizer step.
  std::ostream* log = nullptr;
  // Called after each epoch with its 1-based index; returning false stops.
  std::function<bool(std::size_t epoch)> after_epoch;
};

struct StageResult {
  std::vector<StepLog> steps;
  std::vector<double> epoch_loss;  // mean total loss per epoch
};

// Step (i): embedding, encoder and scene-graph heads on the relation loss.
// Decoder parameters are frozen.
StageResult run_step1_sgg(ReFormer& model, const TrainingData& data,
                          const StageOptions& options);

// Step (ii): caption loss plus lambda times the relation loss (caption loss
// only when the relation loss is disabled). Honors the encoder-freeze flag.
StageResult run_step2_caption(ReFormer& model, const TrainingData& data,
                              const StageOptions& options);

// Step (iii): self-critical fine-tuning. Each image contributes a sampled
// caption (temperature 1) rewarded by CIDEr-D against the greedy caption's
// CIDEr-D, plus lambda times the relation loss when enabled. Dropout is off.
StageResult run_step3_scst(ReFormer& model, const TrainingData& data,
                           const StageOptions& options);

// Per-parameter trainability for a stage: 1, 2 or 3.
void configure_trainable(ReFormer& model, int stage);

// ---------------------------------------------------------------------------
// Diagnostics

struct TeacherForcedStats {
  double loss = 0.0;      // mean per-token caption loss
  double accuracy = 0.0;  // next-token argmax accuracy
  std::size_t tokens = 0;
};

TeacherForcedStats teacher_forced_stats(const ReFormer& model,
                                        const TrainingData& data);

struct SceneGraphStats {
  // Argmax over all predicate classes on ground-truth foreground pairs,
  // with ground-truth labels as input.
  double predicate_accuracy = 0.0;
  // Object-head accuracy without label input.
  double object_accuracy = 0.0;
};

SceneGraphStats scene_graph_stats(const ReFormer& model,
                                  const TrainingData& data);

// Mean CIDEr-D of greedy captions against each example's references.
double greedy_cider(const ReFormer& model, const TrainingData& data);

}  // namespace reformer
