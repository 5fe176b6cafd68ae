// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "reformer/gradcheck_suite.hpp"

#include <functional>
#include <random>

#include <fmt/format.h>

#include "reformer/autograd.hpp"
#include "reformer/data_io.hpp"
#include "reformer/model.hpp"
#include "reformer/nn.hpp"

namespace reformer {

namespace {

using Rng = std::mt19937_64;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor randn(Rng& rng, const Shape& shape, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(shape);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Random projection of a layer output to a scalar; a plain sum would hide
// directions the output is invariant to.
Var project(Tape& tape, Var y, const Tensor& weights) {
  return sum(mul(y, tape.constant(weights)));
}

AttentionMask random_mask(Rng& rng, std::size_t rows, std::size_t cols) {
  AttentionMask m{rows, cols, std::vector<std::uint8_t>(rows * cols, 0)};
  std::bernoulli_distribution keep(0.6);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m.allowed[r * cols + c] = keep(rng) ? 1 : 0;
    m.allowed[r * cols + pick(rng, 0, cols - 1)] = 1;
  }
  return m;
}

struct Checker {
  const GradCheckSuiteOptions& opt;
  std::vector<GradCheckCase>& out;

  void run(const std::string& name, nn::ParamStore& store,
           const std::function<Var(Tape&)>& f, std::size_t coords = 0) {
    ParamCheckOptions po;
    po.eps = opt.eps;
    po.max_coords_per_param = coords;
    po.seed = opt.seed + out.size();
    const GradCheckResult r = grad_check_params(f, store.all(), po);
    out.push_back({name, r.max_rel_error, r.worst_name, r.worst_analytic,
                   r.worst_numeric, r.coordinates, r.max_rel_error < opt.tolerance});
  }
};

BoundingBox random_box(Rng& rng, double w, double h) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double bw = w * (0.1 + 0.6 * u(rng));
  const double bh = h * (0.1 + 0.6 * u(rng));
  const double x1 = (w - bw) * u(rng);
  const double y1 = (h - bh) * u(rng);
  return {x1, y1, x1 + bw, y1 + bh};
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckSuiteOptions& opt) {
  std::vector<GradCheckCase> out;
  Checker check{opt, out};
  Rng rng(opt.seed);

  for (std::size_t c = 0; c < opt.configurations; ++c) {
    const std::string tag = fmt::format("#{}", c);
    const std::size_t heads = pick(rng, 1, 3);
    // LayerNorm over two features maps every row to +-1, leaving upstream
    // gradients near zero, so widths start at 4.
    const std::size_t d = heads * pick(rng, heads == 1 ? 4 : 2, heads == 1 ? 6 : 4);
    const std::size_t n = pick(rng, 1, 5);
    const std::size_t m = pick(rng, 1, 5);
    const std::uint64_t init_seed = rng();

    {
      nn::ParamStore s(init_seed);
      const std::size_t out_dim = pick(rng, 1, 6);
      nn::Linear lin(s, "linear", d, out_dim, c % 2 == 0);
      s.create("x", {n, d}, nn::Init::kZeros).value = randn(rng, {n, d});
      const Tensor w = randn(rng, {n, out_dim});
      check.run("linear" + tag, s, [&](Tape& t) {
        return project(t, lin.forward(t, t.param(s.get("x"))), w);
      });
    }
    {
      nn::ParamStore s(init_seed);
      nn::LayerNorm ln(s, "ln", d);
      s.get("ln.gamma").value = randn(rng, {d});
      s.get("ln.beta").value = randn(rng, {d});
      s.create("x", {n, d}, nn::Init::kZeros).value = randn(rng, {n, d});
      const Tensor w = randn(rng, {n, d});
      check.run("layer_norm" + tag, s, [&](Tape& t) {
        return project(t, ln.forward(t, t.param(s.get("x"))), w);
      });
    }
    {
      nn::ParamStore s(init_seed);
      const std::size_t count = pick(rng, 2, 6);
      nn::Embedding emb(s, "emb", count, d);
      s.get("emb.weight").value = randn(rng, {count, d});
      std::vector<std::size_t> ids(n);
      for (auto& i : ids) i = pick(rng, 0, count - 1);
      const Tensor w = randn(rng, {n, d});
      check.run("embedding" + tag, s, [&](Tape& t) {
        return project(t, emb.forward(t, ids), w);
      });
    }
    {
      nn::ParamStore s(init_seed);
      nn::MultiHeadAttention mha(s, "attn", d, heads);
      s.create("q", {n, d}, nn::Init::kZeros).value = randn(rng, {n, d});
      s.create("mem", {m, d}, nn::Init::kZeros).value = randn(rng, {m, d});
      const AttentionMask mask = random_mask(rng, n, m);
      const Tensor w = randn(rng, {n, d});
      check.run("attention" + tag, s, [&](Tape& t) {
        return project(
            t, mha.forward(t, t.param(s.get("q")), t.param(s.get("mem")), &mask), w);
      });
    }
    {
      nn::ParamStore s(init_seed);
      nn::FeedForward ffn(s, "ffn", d, 2 * d);
      s.create("x", {n, d}, nn::Init::kZeros).value = randn(rng, {n, d});
      const Tensor w = randn(rng, {n, d});
      check.run("feed_forward" + tag, s, [&](Tape& t) {
        return project(t, ffn.forward(t, t.param(s.get("x"))), w);
      });
    }
    {
      nn::ParamStore s(init_seed);
      nn::EncoderLayer layer(s, "enc", d, heads, 2 * d, 0.1);
      s.create("x", {n, d}, nn::Init::kZeros).value = randn(rng, {n, d});
      const Tensor w = randn(rng, {n, d});
      check.run("encoder_layer" + tag, s, [&](Tape& t) {
        return project(t, layer.forward(t, t.param(s.get("x"))), w);
      });
    }
    {
      nn::ParamStore s(init_seed);
      nn::DecoderLayer layer(s, "dec", d, heads, 2 * d, 0.1);
      s.create("y", {m, d}, nn::Init::kZeros).value = randn(rng, {m, d});
      s.create("mem", {n, d}, nn::Init::kZeros).value = randn(rng, {n, d});
      const AttentionMask causal = AttentionMask::causal(m);
      const Tensor w = randn(rng, {m, d});
      check.run("decoder_layer" + tag, s, [&](Tape& t) {
        return project(t,
                       layer.forward(t, t.param(s.get("y")), t.param(s.get("mem")), causal),
                       w);
      });
    }
    {
      nn::ParamStore s(init_seed);
      const std::size_t classes = pick(rng, 2, 6);
      s.create("logits", {n + 1, classes}, nn::Init::kZeros).value =
          randn(rng, {n + 1, classes}, 2.0);
      std::vector<int> targets(n + 1);
      for (auto& t : targets) t = static_cast<int>(pick(rng, 0, classes - 1));
      targets.back() = -1;
      CrossEntropyOptions ce;
      ce.ignore_index = -1;
      if (c % 2 == 1) {
        for (std::size_t k = 0; k < classes; ++k) {
          ce.class_weights.push_back(0.5 + std::uniform_real_distribution<double>(0, 1)(rng));
        }
      }
      ce.reduction = c % 3 == 0 ? Reduction::kSum : Reduction::kMean;
      check.run("cross_entropy" + tag, s, [&](Tape& t) {
        return cross_entropy(t.param(s.get("logits")), targets, ce);
      });
    }

    // Full objective on a random tiny model and image.
    {
      ReFormerConfig cfg;
      cfg.d_model = d;
      cfg.heads = heads;
      cfg.encoder_layers = pick(rng, 1, 2);
      cfg.decoder_layers = pick(rng, 1, 2);
      cfg.d_box = pick(rng, 2, 5);
      cfg.d_label = pick(rng, 2, 5);
      cfg.d_fused = pick(rng, 0, 1) ? d : pick(rng, 3, 8);
      cfg.d_visual = pick(rng, 2, 6);
      cfg.ffn_mult = 2;
      cfg.vocab_size = kNumSpecialTokens + pick(rng, 2, 5);
      cfg.num_object_classes = pick(rng, 2, 4);
      cfg.num_predicates = pick(rng, 2, 4);
      cfg.lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      cfg.weighted_relation_loss = c % 2 == 1;
      cfg.use_object_loss = c % 3 != 2;
      cfg.background_pair_sample_ratio = c % 4 == 3 ? -1.0 : 1.0;
      ReFormer model(cfg, init_seed);

      const std::size_t regions = pick(rng, 1, 4);
      RegionInput in;
      in.image_width = 100.0;
      in.image_height = 80.0;
      in.features = randn(rng, {regions, cfg.d_visual});
      std::vector<int> labels;
      for (std::size_t i = 0; i < regions; ++i) {
        in.boxes.push_back(random_box(rng, in.image_width, in.image_height));
        labels.push_back(static_cast<int>(pick(rng, 0, cfg.num_object_classes - 1)));
      }
      if (c % 2 == 0) in.labels = labels;
      SceneGraph gt;
      gt.boxes = in.boxes;
      gt.labels = labels;
      gt.image_width = in.image_width;
      gt.image_height = in.image_height;
      for (const auto& [i, j] : enumerate_pairs(regions)) {
        if (pick(rng, 0, 2) == 0) {
          gt.triplets.push_back(
              {i, static_cast<int>(pick(rng, 1, cfg.num_predicates - 1)), j});
        }
      }
      std::vector<int> words(pick(rng, 0, 3));
      for (int& w : words) {
        w = static_cast<int>(pick(rng, kNumSpecialTokens, cfg.vocab_size - 1));
      }
      const auto [cap_in, cap_target] = teacher_forcing_pair(words, 8);
      std::vector<double> weights(cfg.num_predicates);
      for (double& w : weights) w = 0.5 + std::uniform_real_distribution<double>(0, 1)(rng);

      check.run("reformer_loss" + tag, model.params(), [&](Tape& t) {
        const EncoderOutput enc = model.encode(t, in);
        Var lc = caption_loss(model.decode_teacher_forced(t, enc, cap_in), cap_target);
        const RelationLoss rel = model.relation_loss(t, enc, gt, weights);
        return total_loss(lc, rel, cfg.lambda).total;
      }, opt.model_coords_per_param);
    }
  }
  return out;
}

}  // namespace reformer
