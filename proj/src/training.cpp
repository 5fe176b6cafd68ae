// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "reformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "reformer/errors.hpp"

namespace reformer {

// ---------------------------------------------------------------------------
// Optimizer and schedule

Adam::Adam(std::vector<Parameter*> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const Parameter* p : params_) {
    m_.push_back(Tensor::zeros_like(p->value));
    v_.push_back(Tensor::zeros_like(p->value));
  }
}

void Adam::step(double lr) {
  for (const Parameter* p : params_) {
    if (p->trainable && !p->grad.all_finite()) {
      throw NumericalError(
          fmt::format("non-finite gradient in parameter '{}'", p->name));
    }
  }
  ++steps_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    double* w = p.value.ptr();
    const double* g = p.grad.ptr();
    double* m = m_[i].ptr();
    double* v = v_[i].ptr();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.eps);
    }
  }
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->grad.data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Parameter* p : params) {
      for (double& g : p->grad.data()) g *= s;
    }
  }
  return norm;
}

double warmup_lr(std::size_t step, std::size_t d, std::size_t warmup) {
  if (step == 0) throw ConfigError("warmup_lr: step must be >= 1");
  if (d == 0 || warmup == 0) throw ConfigError("warmup_lr: d and warmup must be positive");
  const auto s = static_cast<double>(step);
  const auto w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

Var scst_loss(Var sample_logprobs, double reward, double baseline) {
  return scale(sum(sample_logprobs), -(reward - baseline));
}

// ---------------------------------------------------------------------------
// Data

TrainingData prepare_training_data(const std::vector<ImageRecord>& records,
                                   const Vocabulary& vocab,
                                   const ReFormerConfig& config) {
  if (records.empty()) throw DataError("training set is empty");
  if (vocab.size() != config.vocab_size) {
    throw DataError(fmt::format("vocabulary has {} words but the model expects {}",
                                vocab.size(), config.vocab_size));
  }
  TrainingData data;
  data.vocab = vocab;
  std::vector<SceneGraph> graphs;
  std::vector<std::vector<Tokens>> refs;
  for (const ImageRecord& r : records) {
    if (r.captions.empty()) {
      throw DataError(fmt::format("image '{}' has no captions", r.image_id));
    }
    TrainingExample ex;
    ex.image_id = r.image_id;
    ex.regions = region_input(r, true);
    ex.graph = r.graph();
    const auto rep = validate_graph(ex.graph, config.num_object_classes,
                                    config.num_predicates);
    if (!rep.ok()) {
      throw DataError(fmt::format("image '{}': {}: {}", r.image_id,
                                  rep.violations.front().kind,
                                  rep.violations.front().detail));
    }
    auto [in, target] =
        teacher_forcing_pair(tokenize(r.captions.front(), vocab), config.max_caption_len);
    ex.caption_in = std::move(in);
    ex.caption_target = std::move(target);
    for (const auto& c : r.captions) ex.references.push_back(split_words(c));
    graphs.push_back(ex.graph);
    refs.push_back(ex.references);
    data.examples.push_back(std::move(ex));
  }
  data.predicate_weights = predicate_class_weights(graphs, config.num_predicates);
  data.cider = std::make_shared<CiderD>(refs);
  return data;
}

// ---------------------------------------------------------------------------
// Sequential training

nlohmann::json to_json(const StepLog& s) {
  return {{"step", s.step},
          {"lr", s.lr},
          {"loss_total", s.loss_total},
          {"loss_caption", s.loss_caption},
          {"loss_relation", s.loss_relation}};
}

void configure_trainable(ReFormer& model, int stage) {
  const auto& cfg = model.config();
  for (Parameter* p : model.params().all()) {
    const bool encoder_side = p->name.starts_with("embed.") ||
                              p->name.starts_with("encoder.");
    switch (stage) {
      case 1:
        p->trainable = !p->name.starts_with("decoder.");
        break;
      case 2:
        p->trainable = !(cfg.freeze_encoder_in_caption && encoder_side);
        break;
      default:
        p->trainable = true;
        break;
    }
  }
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xbf58476d1ce4e5b9ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct ExampleLoss {
  Var total;
  double caption = 0.0;
  double relation = 0.0;
};

using LossFn = std::function<ExampleLoss(Tape&, const TrainingExample&)>;

StageResult run_stage(ReFormer& model, const TrainingData& data,
                      const StageOptions& opt, int stage, bool training_mode,
                      const LossFn& loss_fn) {
  if (data.examples.empty()) throw DataError("training set is empty");
  if (opt.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (opt.epochs == 0 && opt.max_steps == 0) {
    throw ConfigError("a training step needs epochs or iterations");
  }
  configure_trainable(model, stage);
  auto& params = model.params();
  params.zero_grad();
  Adam adam(params.all());
  std::mt19937_64 order_rng(mix_seed(opt.seed, static_cast<std::uint64_t>(stage), 0));
  std::vector<std::size_t> order(data.examples.size());
  StageResult result;
  std::size_t step = 0;
  const std::size_t max_epochs = opt.max_steps ? static_cast<std::size_t>(-1) : opt.epochs;
  bool stop = false;

  for (std::size_t epoch = 1; epoch <= max_epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      ++step;
      StepLog log;
      log.step = step;
      for (std::size_t b = start; b < end; ++b) {
        Tape tape(mix_seed(opt.seed, step, order[b]), training_mode);
        ExampleLoss ex = loss_fn(tape, data.examples[order[b]]);
        log.loss_total += inv_b * ex.total.value().item();
        log.loss_caption += inv_b * ex.caption;
        log.loss_relation += inv_b * ex.relation;
        if (tape.requires_grad(ex.total)) tape.backward(scale(ex.total, inv_b));
      }
      if (!std::isfinite(log.loss_total)) {
        throw NumericalError(fmt::format("non-finite loss at step {}", step));
      }
      clip_grad_norm(params.all(), opt.clip_norm);
      log.lr = opt.fixed_lr ? *opt.fixed_lr
                            : opt.lr_factor * warmup_lr(step, model.config().d_model,
                                                        opt.warmup);
      adam.step(log.lr);
      params.zero_grad();
      if (opt.log != nullptr) *opt.log << to_json(log).dump() << '\n';
      epoch_sum += log.loss_total * static_cast<double>(end - start);
      result.steps.push_back(log);
      if (opt.max_steps && step >= opt.max_steps) {
        stop = true;
        break;
      }
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(order.size()));
    if (opt.after_epoch && !opt.after_epoch(epoch)) stop = true;
  }
  for (Parameter* p : params.all()) p->trainable = true;
  model.set_trained_stage(std::max(model.trained_stage(), stage));
  return result;
}

}  // namespace

StageResult run_step1_sgg(ReFormer& model, const TrainingData& data,
                          const StageOptions& opt) {
  return run_stage(model, data, opt, 1, true,
                   [&model, &data](Tape& tape, const TrainingExample& ex) {
                     const EncoderOutput enc = model.encode(tape, ex.regions);
                     const RelationLoss rel =
                         model.relation_loss(tape, enc, ex.graph, data.predicate_weights);
                     return ExampleLoss{rel.loss, 0.0, rel.loss.value().item()};
                   });
}

StageResult run_step2_caption(ReFormer& model, const TrainingData& data,
                              const StageOptions& opt) {
  if (model.trained_stage() < 1 && !opt.cold_start) {
    throw ConfigError(
        "caption training needs a scene-graph pre-trained model (or cold start)");
  }
  const ReFormerConfig& cfg = model.config();
  return run_stage(
      model, data, opt, 2, true,
      [&model, &data, &cfg](Tape& tape, const TrainingExample& ex) {
        const EncoderOutput enc = model.encode(tape, ex.regions);
        Var lc = caption_loss(model.decode_teacher_forced(tape, enc, ex.caption_in),
                              ex.caption_target, kPad);
        RelationLoss rel;
        if (cfg.use_relation_loss) {
          rel = model.relation_loss(tape, enc, ex.graph, data.predicate_weights);
        }
        const TotalLoss t = total_loss(lc, rel, cfg.use_relation_loss ? cfg.lambda : 0.0);
        return ExampleLoss{t.total, t.values.caption, t.values.relation};
      });
}

StageResult run_step3_scst(ReFormer& model, const TrainingData& data,
                           const StageOptions& opt) {
  if (model.trained_stage() < 2) {
    throw ConfigError("SCST needs a caption-trained model (run step ii first)");
  }
  if (!data.cider) throw DataError("SCST needs reference captions");
  const ReFormerConfig& cfg = model.config();
  StageOptions o = opt;
  if (!o.fixed_lr) o.fixed_lr = kScstLearningRate;
  return run_stage(
      model, data, o, 3, false,
      [&model, &data, &cfg](Tape& tape, const TrainingExample& ex) {
        if (ex.references.empty()) {
          throw DataError(fmt::format("image '{}' has no references", ex.image_id));
        }
        const EncoderOutput enc = model.encode(tape, ex.regions);
        DecodeOptions sample;
        sample.mode = DecodeMode::kSample;
        sample.temperature = 1.0;
        sample.rng = &tape.rng();
        const GeneratedCaption s = model.generate_caption(tape, enc, sample);
        const GeneratedCaption g = model.generate_caption(tape, enc, {});
        const double reward =
            data.cider->score(split_words(detokenize(s.tokens, data.vocab)), ex.references);
        const double baseline =
            data.cider->score(split_words(detokenize(g.tokens, data.vocab)), ex.references);

        std::vector<int> in{kBos};
        in.insert(in.end(), s.tokens.begin(), s.tokens.end() - 1);
        const std::vector<int>& target = s.tokens;
        CrossEntropyOptions ce;
        ce.reduction = Reduction::kSum;
        Var nll = cross_entropy(model.decode_teacher_forced(tape, enc, in), target, ce);
        Var loss = scst_loss(scale(nll, -1.0), reward, baseline);
        RelationLoss rel;
        if (cfg.use_relation_loss) {
          rel = model.relation_loss(tape, enc, ex.graph, data.predicate_weights);
        }
        const TotalLoss t = total_loss(loss, rel, cfg.use_relation_loss ? cfg.lambda : 0.0);
        return ExampleLoss{t.total, t.values.caption, t.values.relation};
      });
}

// ---------------------------------------------------------------------------
// Diagnostics

TeacherForcedStats teacher_forced_stats(const ReFormer& model,
                                        const TrainingData& data) {
  TeacherForcedStats st;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (const auto& ex : data.examples) {
    Tape tape;
    tape.set_grad_enabled(false);
    const EncoderOutput enc = model.encode(tape, ex.regions);
    Var logits = model.decode_teacher_forced(tape, enc, ex.caption_in);
    CrossEntropyOptions ce;
    ce.ignore_index = kPad;
    ce.reduction = Reduction::kSum;
    loss_sum += cross_entropy(logits, ex.caption_target, ce).value().item();
    const Tensor& l = logits.value();
    const std::size_t v = l.cols();
    for (std::size_t t = 0; t < ex.caption_target.size(); ++t) {
      const double* row = l.ptr() + t * v;
      const auto best = std::distance(row, std::max_element(row, row + v));
      if (best == ex.caption_target[t]) ++correct;
    }
    st.tokens += ex.caption_target.size();
  }
  st.loss = loss_sum / static_cast<double>(st.tokens);
  st.accuracy = static_cast<double>(correct) / static_cast<double>(st.tokens);
  return st;
}

SceneGraphStats scene_graph_stats(const ReFormer& model,
                                  const TrainingData& data) {
  std::size_t pred_total = 0;
  std::size_t pred_ok = 0;
  std::size_t obj_total = 0;
  std::size_t obj_ok = 0;
  const std::size_t r = model.config().num_predicates;
  const std::size_t c = model.config().num_object_classes;
  for (const auto& ex : data.examples) {
    Tape tape;
    tape.set_grad_enabled(false);
    const EncoderOutput enc = model.encode(tape, ex.regions);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (const Triplet& t : ex.graph.triplets) pairs.emplace_back(t.subject, t.object);
    if (!pairs.empty()) {
      const Tensor& l = model.relation_head(tape, enc, pairs).value();
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        const double* row = l.ptr() + p * r;
        const auto best = std::distance(row, std::max_element(row, row + r));
        if (best == ex.graph.triplets[p].predicate) ++pred_ok;
        ++pred_total;
      }
    }
    RegionInput unlabeled = ex.regions;
    unlabeled.labels.reset();
    const EncoderOutput enc2 = model.encode(tape, unlabeled);
    const Tensor& ol = model.object_head(tape, enc2).value();
    for (std::size_t i = 0; i < ex.graph.size(); ++i) {
      const double* row = ol.ptr() + i * c;
      const auto best = std::distance(row, std::max_element(row, row + c));
      if (best == ex.graph.labels[i]) ++obj_ok;
      ++obj_total;
    }
  }
  SceneGraphStats st;
  st.predicate_accuracy =
      pred_total ? static_cast<double>(pred_ok) / static_cast<double>(pred_total) : 0.0;
  st.object_accuracy =
      obj_total ? static_cast<double>(obj_ok) / static_cast<double>(obj_total) : 0.0;
  return st;
}

double greedy_cider(const ReFormer& model, const TrainingData& data) {
  double sum = 0.0;
  for (const auto& ex : data.examples) {
    Tape tape;
    tape.set_grad_enabled(false);
    const EncoderOutput enc = model.encode(tape, ex.regions);
    const GeneratedCaption g = model.generate_caption(tape, enc, {});
    sum += data.cider->score(split_words(detokenize(g.tokens, data.vocab)),
                             ex.references);
  }
  return sum / static_cast<double>(data.examples.size());
}

}  // namespace reformer
