// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "reformer/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "reformer/data_io.hpp"
#include "reformer/errors.hpp"

namespace reformer {

namespace {

// Switches a tape to inference for the lifetime of the guard.
class InferenceGuard {
 public:
  explicit InferenceGuard(Tape& t)
      : tape_(t), grad_(t.grad_enabled()), training_(t.training()) {
    tape_.set_grad_enabled(false);
    tape_.set_training(false);
  }
  ~InferenceGuard() {
    tape_.set_grad_enabled(grad_);
    tape_.set_training(training_);
  }
  InferenceGuard(const InferenceGuard&) = delete;
  InferenceGuard& operator=(const InferenceGuard&) = delete;

 private:
  Tape& tape_;
  bool grad_;
  bool training_;
};

std::vector<double> log_softmax(const std::vector<double>& logits, double temp) {
  std::vector<double> out(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v / temp);
  double z = 0.0;
  for (double v : logits) z += std::exp(v / temp - mx);
  const double lse = mx + std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] / temp - lse;
  return out;
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(
      std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

std::vector<double> row_softmax(const double* row, std::size_t c) {
  std::vector<double> p(row, row + c);
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) z += (v = std::exp(v - mx));
  for (double& v : p) v /= z;
  return p;
}

}  // namespace

ReFormer::ReFormer(const ReFormerConfig& config, std::uint64_t seed)
    : ReFormer(config, seed, true) {}

ReFormer::ReFormer(const ReFormerConfig& config, std::uint64_t seed,
                   bool allocate)
    : config_(config),
      store_(std::make_unique<nn::ParamStore>(seed, allocate)) {
  config_.validate();
  auto& s = *store_;
  const std::size_t d = config_.d_model;
  const std::size_t inner = d * config_.ffn_mult;

  visual_ = nn::Linear(s, "embed.visual", config_.d_visual, config_.d_fused);
  box_ = nn::Linear(s, "embed.box", 6, config_.d_box);
  label_ = nn::Embedding(s, "embed.label", config_.num_object_classes + 1,
                         config_.d_label);
  fuse_ = nn::Linear(s, "embed.fuse",
                     config_.d_fused + config_.d_box + config_.d_label,
                     config_.d_fused);
  if (config_.d_fused != d) {
    to_model_ = nn::Linear(s, "embed.to_model", config_.d_fused, d);
  }
  for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
    encoder_.emplace_back(s, fmt::format("encoder.layer{}", l), d,
                          config_.heads, inner, config_.dropout);
  }
  encoder_norm_ = nn::LayerNorm(s, "encoder.norm", d);

  rel_hidden_ =
      nn::Linear(s, "relation.hidden", 2 * d + kPairGeometryWidth, d);
  rel_out_ = nn::Linear(s, "relation.out", d, config_.num_predicates);
  object_out_ = nn::Linear(s, "object.out", d, config_.num_object_classes);

  word_ = nn::Embedding(s, "decoder.word", config_.vocab_size, d);
  for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
    decoder_.emplace_back(s, fmt::format("decoder.layer{}", l), d,
                          config_.heads, inner, config_.dropout);
  }
  decoder_norm_ = nn::LayerNorm(s, "decoder.norm", d);
  vocab_out_ = nn::Linear(s, "decoder.out", d, config_.vocab_size);
}

std::size_t ReFormer::parameter_count(const ReFormerConfig& config) {
  const ReFormer shape_only(config, 0, false);
  return shape_only.store_->scalar_count();
}

Var ReFormer::embed_regions(Tape& tape, const RegionInput& in) const {
  const std::size_t n = in.size();
  if (n == 0) throw DataError("embed_regions: image has no regions");
  const Shape want{n, config_.d_visual};
  if (in.features.shape() != want) {
    throw ShapeError(fmt::format("embed_regions: features {} but expected {}",
                                 shape_str(in.features.shape()),
                                 shape_str(want)));
  }
  if (!in.features.all_finite()) {
    throw DataError("embed_regions: non-finite region feature");
  }
  Tensor boxes(Shape{n, 6});
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = box_base_features(in.boxes[i], in.image_width, in.image_height);
    std::copy(f.begin(), f.end(), boxes.ptr() + 6 * i);
  }
  const std::size_t unk = config_.num_object_classes;
  std::vector<std::size_t> ids(n, unk);
  if (in.labels) {
    if (in.labels->size() != n) {
      throw ShapeError(fmt::format("embed_regions: {} labels for {} regions",
                                   in.labels->size(), n));
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      const int lab = (*in.labels)[i];
      if (lab < 0 || static_cast<std::size_t>(lab) >= unk) {
        throw DataError(fmt::format("embed_regions: label {} outside [0, {})",
                                    lab, unk));
      }
      const bool drop = tape.training() && config_.label_dropout > 0.0 &&
                        u(tape.rng()) < config_.label_dropout;
      ids[i] = drop ? unk : static_cast<std::size_t>(lab);
    }
  }
  Var x = concat_cols({visual_.forward(tape, tape.constant(in.features)),
                       box_.forward(tape, tape.constant(std::move(boxes))),
                       label_.forward(tape, ids)});
  x = fuse_.forward(tape, x);
  if (to_model_.weight != nullptr) x = to_model_.forward(tape, x);
  return dropout(x, config_.dropout);
}

EncoderOutput ReFormer::encode_tokens(Tape& tape, Var tokens,
                                      const RegionInput& in) const {
  Var x = tokens;
  for (const auto& layer : encoder_) x = layer.forward(tape, x);
  EncoderOutput out;
  out.features = encoder_norm_.forward(tape, x);
  out.valid.assign(in.size(), true);
  out.boxes = in.boxes;
  out.image_width = in.image_width;
  out.image_height = in.image_height;
  return out;
}

EncoderOutput ReFormer::encode(Tape& tape, const RegionInput& in) const {
  return encode_tokens(tape, embed_regions(tape, in), in);
}

Var ReFormer::relation_head(
    Tape& tape, const EncoderOutput& enc,
    std::span<const std::pair<std::size_t, std::size_t>> pairs) const {
  const std::size_t n = enc.size();
  if (pairs.empty()) {
    return tape.constant(Tensor(Shape{0, config_.num_predicates}));
  }
  std::vector<std::size_t> subj(pairs.size());
  std::vector<std::size_t> obj(pairs.size());
  Tensor geom(Shape{pairs.size(), kPairGeometryWidth});
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [i, j] = pairs[p];
    if (i >= n || j >= n) {
      throw ShapeError(fmt::format("relation_head: pair ({}, {}) with {} regions",
                                   i, j, n));
    }
    subj[p] = i;
    obj[p] = j;
    const auto g = pair_geometry(enc.boxes[i], enc.boxes[j], enc.image_width,
                                 enc.image_height);
    std::copy(g.begin(), g.end(), geom.ptr() + p * kPairGeometryWidth);
  }
  Var h = concat_cols({gather_rows(enc.features, subj),
                       gather_rows(enc.features, obj),
                       tape.constant(std::move(geom))});
  return rel_out_.forward(tape, gelu(rel_hidden_.forward(tape, h)));
}

Var ReFormer::object_head(Tape& tape, const EncoderOutput& enc) const {
  return object_out_.forward(tape, enc.features);
}

Var ReFormer::decode_teacher_forced(Tape& tape, const EncoderOutput& enc,
                                    std::span<const int> tokens) const {
  if (tokens.empty() || tokens.front() != kBos) {
    throw DataError("decode: caption must start with BOS");
  }
  const std::size_t m = tokens.size();
  std::vector<std::size_t> ids(m);
  for (std::size_t t = 0; t < m; ++t) {
    if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= config_.vocab_size) {
      throw DataError(fmt::format("decode: token id {} outside vocabulary of {}",
                                  tokens[t], config_.vocab_size));
    }
    ids[t] = static_cast<std::size_t>(tokens[t]);
  }
  const double emb_scale = std::sqrt(static_cast<double>(config_.d_model));
  Var y = add(scale(word_.forward(tape, ids), emb_scale),
              tape.constant(nn::positional_encoding(m, config_.d_model)));
  y = dropout(y, config_.dropout);
  const AttentionMask causal = AttentionMask::causal(m);
  for (const auto& layer : decoder_) {
    y = layer.forward(tape, y, enc.features, causal);
  }
  return vocab_out_.forward(tape, decoder_norm_.forward(tape, y));
}

std::vector<double> ReFormer::next_token_logits(
    Tape& tape, const EncoderOutput& enc, const std::vector<int>& prefix) const {
  const Tensor& logits = decode_teacher_forced(tape, enc, prefix).value();
  const std::size_t v = config_.vocab_size;
  const double* last = logits.ptr() + (prefix.size() - 1) * v;
  return {last, last + v};
}

GeneratedCaption ReFormer::generate_caption(Tape& tape,
                                            const EncoderOutput& enc,
                                            const DecodeOptions& opt) const {
  InferenceGuard guard(tape);
  const std::size_t max_len = opt.max_len ? opt.max_len : config_.max_caption_len;
  GeneratedCaption out;

  if (opt.mode == DecodeMode::kGreedy || opt.mode == DecodeMode::kSample) {
    if (opt.mode == DecodeMode::kSample) {
      if (opt.rng == nullptr) throw ConfigError("sampling needs an rng");
      if (!(opt.temperature > 0.0)) {
        throw ConfigError("sampling temperature must be positive");
      }
    }
    std::vector<int> prefix{kBos};
    std::uniform_real_distribution<double> u(0.0, 1.0);
    while (out.tokens.size() < max_len) {
      const double temp = opt.mode == DecodeMode::kSample ? opt.temperature : 1.0;
      const auto lp = log_softmax(next_token_logits(tape, enc, prefix), temp);
      std::size_t tok = 0;
      if (opt.mode == DecodeMode::kGreedy) {
        tok = argmax(lp);
      } else {
        const double r = u(*opt.rng);
        double acc = 0.0;
        tok = lp.size() - 1;
        for (std::size_t i = 0; i < lp.size(); ++i) {
          acc += std::exp(lp[i]);
          if (r < acc) {
            tok = i;
            break;
          }
        }
      }
      out.logprob += lp[tok];
      out.tokens.push_back(static_cast<int>(tok));
      prefix.push_back(static_cast<int>(tok));
      if (static_cast<int>(tok) == kEos) break;
    }
    out.truncated = out.tokens.empty() || out.tokens.back() != kEos;
    return out;
  }

  // Beam search: live beams are pruned on raw log-probability; finished
  // hypotheses compete on log-probability per token.
  const std::size_t k = std::max<std::size_t>(1, opt.beam_size);
  struct Hyp {
    std::vector<int> tokens;
    double logprob = 0.0;
  };
  std::vector<Hyp> live{{{}, 0.0}};
  std::vector<Hyp> done;
  for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<Hyp> cand;
    for (const Hyp& h : live) {
      std::vector<int> prefix{kBos};
      prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
      const auto lp = log_softmax(next_token_logits(tape, enc, prefix), 1.0);
      std::vector<std::size_t> order(lp.size());
      std::iota(order.begin(), order.end(), 0);
      const std::size_t take = std::min(k, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take),
                        order.end(), [&lp](std::size_t a, std::size_t b) {
                          return lp[a] != lp[b] ? lp[a] > lp[b] : a < b;
                        });
      for (std::size_t c = 0; c < take; ++c) {
        Hyp nh = h;
        nh.tokens.push_back(static_cast<int>(order[c]));
        nh.logprob += lp[order[c]];
        cand.push_back(std::move(nh));
      }
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Hyp& a, const Hyp& b) {
      return a.logprob > b.logprob;
    });
    live.clear();
    for (std::size_t c = 0; c < std::min(k, cand.size()); ++c) {
      if (cand[c].tokens.back() == kEos) {
        done.push_back(std::move(cand[c]));
      } else {
        live.push_back(std::move(cand[c]));
      }
    }
    if (done.size() >= k) break;
  }
  const std::vector<Hyp>& pool = done.empty() ? live : done;
  const auto norm = [](const Hyp& h) {
    return h.logprob / static_cast<double>(std::max<std::size_t>(1, h.tokens.size()));
  };
  const Hyp* best = &pool.front();
  for (const Hyp& h : pool) {
    if (norm(h) > norm(*best)) best = &h;
  }
  out.tokens = best->tokens;
  out.logprob = best->logprob;
  out.truncated = out.tokens.empty() || out.tokens.back() != kEos;
  return out;
}

SceneGraphPrediction ReFormer::generate_scene_graph(
    Tape& tape, const EncoderOutput& enc,
    const std::optional<std::vector<int>>& labels, std::size_t top_k) const {
  if (top_k == 0) throw ConfigError("generate_scene_graph: top_k must be >= 1");
  InferenceGuard guard(tape);
  const std::size_t n = enc.size();
  const std::size_t nc = config_.num_object_classes;
  SceneGraphPrediction out;
  std::vector<double> label_prob(n, 1.0);
  if (labels) {
    out.labels = *labels;
  } else {
    const Tensor& ol = object_head(tape, enc).value();
    out.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = row_softmax(ol.ptr() + i * nc, nc);
      const std::size_t best = argmax(p);
      out.labels[i] = static_cast<int>(best);
      label_prob[i] = p[best];
    }
  }
  out.graph.boxes = enc.boxes;
  out.graph.labels = out.labels;
  out.graph.image_width = enc.image_width;
  out.graph.image_height = enc.image_height;

  const auto pairs = enumerate_pairs(n);
  if (!pairs.empty()) {
    const std::size_t r = config_.num_predicates;
    const Tensor& rl = relation_head(tape, enc, pairs).value();
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const auto prob = row_softmax(rl.ptr() + p * r, r);
      std::size_t best = 1;
      for (std::size_t c = 2; c < r; ++c) {
        if (prob[c] > prob[best]) best = c;
      }
      const auto [i, j] = pairs[p];
      ScoredTriplet t;
      t.subject = i;
      t.object = j;
      t.predicate = static_cast<int>(best);
      t.subject_label = out.labels[i];
      t.object_label = out.labels[j];
      t.subject_box = enc.boxes[i];
      t.object_box = enc.boxes[j];
      t.score = prob[best] * label_prob[i] * label_prob[j];
      out.triplets.push_back(t);
    }
    std::stable_sort(out.triplets.begin(), out.triplets.end(),
                     [](const ScoredTriplet& a, const ScoredTriplet& b) {
                       return a.score > b.score;
                     });
    if (out.triplets.size() > top_k) out.triplets.resize(top_k);
  }
  for (const auto& t : out.triplets) {
    out.graph.triplets.push_back({t.subject, t.predicate, t.object});
  }
  return out;
}

RelationLoss ReFormer::relation_loss(Tape& tape, const EncoderOutput& enc,
                                     const SceneGraph& gt,
                                     std::span<const double> weights) const {
  const std::size_t n = enc.size();
  if (gt.size() != n) {
    throw ShapeError(fmt::format("relation_loss: graph has {} regions, encoder {}",
                                 gt.size(), n));
  }
  RelationLoss out;
  if (config_.use_object_loss) {
    std::vector<int> labels(gt.labels.begin(), gt.labels.end());
    out.object = cross_entropy(object_head(tape, enc), labels);
  }
  const auto pairs = enumerate_pairs(n);
  out.no_pairs = pairs.empty();
  if (!out.no_pairs) {
    std::vector<int> targets(pairs.size());
    std::vector<std::size_t> background;
    std::size_t fg = 0;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      targets[p] = gt.predicate(pairs[p].first, pairs[p].second);
      if (targets[p] == kBackgroundPredicate) {
        background.push_back(p);
      } else {
        ++fg;
      }
    }
    const double ratio = config_.background_pair_sample_ratio;
    if (ratio >= 0.0) {
      const auto keep = std::min(
          background.size(),
          static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(std::max<std::size_t>(fg, 1)))));
      std::shuffle(background.begin(), background.end(), tape.rng());
      for (std::size_t b = keep; b < background.size(); ++b) {
        targets[background[b]] = -1;
      }
    }
    CrossEntropyOptions ce;
    ce.ignore_index = -1;
    if (config_.weighted_relation_loss) {
      if (weights.size() != config_.num_predicates) {
        throw ConfigError(fmt::format(
            "weighted relation loss needs {} predicate weights, got {}",
            config_.num_predicates, weights.size()));
      }
      ce.class_weights.assign(weights.begin(), weights.end());
    }
    out.predicate = cross_entropy(relation_head(tape, enc, pairs), targets, ce);
  }
  if (out.predicate.valid() && out.object.valid()) {
    out.loss = add(out.predicate, out.object);
  } else if (out.predicate.valid()) {
    out.loss = out.predicate;
  } else if (out.object.valid()) {
    out.loss = out.object;
  } else {
    out.loss = tape.constant(Tensor::scalar(0.0));
  }
  return out;
}

Var caption_loss(Var logits, std::span<const int> targets, int pad_id) {
  CrossEntropyOptions ce;
  ce.ignore_index = pad_id;
  return cross_entropy(logits, targets, ce);
}

TotalLoss total_loss(Var caption, const RelationLoss& relation, double lambda) {
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  TotalLoss out;
  out.values.caption = caption.value().item();
  if (relation.loss.valid()) {
    out.values.relation = relation.loss.value().item();
    out.values.no_pairs = relation.no_pairs;
    if (relation.object.valid()) out.values.object = relation.object.value().item();
  }
  if (lambda == 0.0 || !relation.loss.valid()) {
    out.total = caption;
  } else {
    out.total = add(caption, scale(relation.loss, lambda));
  }
  out.values.total = out.total.value().item();
  return out;
}

std::vector<double> predicate_class_weights(const std::vector<SceneGraph>& graphs,
                                            std::size_t num_predicates) {
  std::vector<double> count(num_predicates, 0.0);
  for (const SceneGraph& g : graphs) {
    const std::size_t n = g.size();
    const double pairs = n < 2 ? 0.0 : static_cast<double>(n * (n - 1));
    double fg = 0.0;
    for (const Triplet& t : g.triplets) {
      if (t.predicate <= 0 || static_cast<std::size_t>(t.predicate) >= num_predicates) {
        throw DataError(fmt::format("predicate {} outside [1, {})", t.predicate,
                                    num_predicates));
      }
      count[static_cast<std::size_t>(t.predicate)] += 1.0;
      fg += 1.0;
    }
    count[0] += pairs - fg;
  }
  const double total = std::accumulate(count.begin(), count.end(), 0.0);
  const auto seen = static_cast<double>(
      std::count_if(count.begin(), count.end(), [](double c) { return c > 0.0; }));
  std::vector<double> w(num_predicates, 1.0);
  for (std::size_t c = 0; c < num_predicates; ++c) {
    if (count[c] > 0.0) w[c] = total / (seen * count[c]);
  }
  w[0] = std::min(w[0], 1.0);
  return w;
}

std::pair<std::vector<int>, std::vector<int>> teacher_forcing_pair(
    const std::vector<int>& words, std::size_t max_len) {
  if (max_len == 0) throw ConfigError("max caption length must be positive");
  const std::size_t m = std::min(words.size(), max_len - 1);
  std::vector<int> in{kBos};
  in.insert(in.end(), words.begin(), words.begin() + static_cast<long>(m));
  std::vector<int> target(words.begin(), words.begin() + static_cast<long>(m));
  target.push_back(kEos);
  return {std::move(in), std::move(target)};
}

}  // namespace reformer
