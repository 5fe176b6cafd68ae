// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <sstream>

#include <doctest.h>

#include "helpers.hpp"
#include "reformer/data_io.hpp"
#include "reformer/errors.hpp"
#include "reformer/metrics.hpp"
#include "reformer/training.hpp"
#include "support/protocols.hpp"

using namespace reformer;
using reformer::testing::temp_path;
using reformer::testing::tiny_config;

namespace {

struct Small {
  SynthDataset synth;
  Vocabulary vocab;
  ReFormerConfig config;
  TrainingData data;
};

Small small_set(std::size_t images = 8) {
  SynthOptions o;
  o.seed = 3;
  o.n_images = images;
  o.d_visual = 8;
  Small s;
  s.synth = synth_generate(o);
  std::vector<std::string> caps;
  for (const auto& r : s.synth.records) caps.insert(caps.end(), r.captions.begin(), r.captions.end());
  s.vocab = build_vocab(caps, 1);
  s.config = tiny_config(s.vocab.size());
  s.data = prepare_training_data(s.synth.records, s.vocab, s.config);
  return s;
}

StageOptions quick(std::size_t epochs) {
  StageOptions o;
  o.epochs = epochs;
  o.batch_size = 4;
  o.warmup = 20;
  o.seed = 7;
  return o;
}

std::vector<Tensor> snapshot(const ReFormer& m, const std::string& prefix = "") {
  std::vector<Tensor> out;
  for (const Parameter* p : m.params().all()) {
    if (p->name.rfind(prefix, 0) == 0) out.push_back(p->value);
  }
  return out;
}

std::vector<double> losses(const StageResult& r) {
  std::vector<double> out;
  for (const StepLog& s : r.steps) out.push_back(s.loss_total);
  return out;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("adam leaves parameters alone under zero gradient") {
    Parameter p{"p", Tensor::from_values({1.0, -2.0, 3.0}), Tensor(Shape{3})};
    Adam adam({&p});
    for (int i = 0; i < 5; ++i) adam.step(0.1);
    CHECK(p.value == Tensor::from_values({1.0, -2.0, 3.0}));
    CHECK(adam.steps() == 5);
  }

  TEST_CASE("first adam step has magnitude lr") {
    for (double g : {1e-3, 0.5, -7.0, 250.0}) {
      Parameter p{"p", Tensor::from_values({2.0}), Tensor::from_values({g})};
      Adam adam({&p});
      adam.step(0.01);
      // m_hat = g and v_hat = g^2, so the step is lr * |g| / (|g| + eps).
      const double want = 0.01 * std::abs(g) / (std::abs(g) + 1e-8);
      CHECK(std::abs(2.0 - p.value[0]) == doctest::Approx(want).epsilon(1e-12));
      CHECK((p.value[0] < 2.0) == (g > 0));
    }
  }

  TEST_CASE("adam minimizes a quadratic") {
    Parameter p{"x", Tensor::from_values({3.0}), Tensor(Shape{1})};
    Adam adam({&p});
    for (int i = 0; i < 3000; ++i) {
      p.grad[0] = 2.0 * p.value[0];
      adam.step(0.01 * std::pow(0.999, i));
    }
    CHECK(std::abs(p.value[0]) < 1e-3);
  }

  TEST_CASE("adam skips frozen parameters and rejects non-finite gradients") {
    Parameter a{"a", Tensor::from_values({1.0}), Tensor::from_values({1.0})};
    Parameter b{"b", Tensor::from_values({1.0}), Tensor::from_values({1.0})};
    b.trainable = false;
    Adam adam({&a, &b});
    adam.step(0.1);
    CHECK(a.value[0] != 1.0);
    CHECK(b.value[0] == 1.0);
    CHECK(adam.second_moment(1)[0] == 0.0);

    a.grad[0] = std::nan("");
    const double before = a.value[0];
    try {
      adam.step(0.1);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("'a'") != std::string::npos);
    }
    CHECK(a.value[0] == before);
  }

  TEST_CASE("gradient clipping") {
    Parameter a{"a", Tensor(Shape{2}), Tensor::from_values({3.0, 0.0})};
    Parameter b{"b", Tensor(Shape{1}), Tensor::from_values({4.0})};
    std::vector<Parameter*> ps{&a, &b};
    CHECK(clip_grad_norm(ps, 1.0) == 5.0);
    CHECK(a.grad[0] == doctest::Approx(0.6));
    CHECK(b.grad[0] == doctest::Approx(0.8));
    CHECK(clip_grad_norm(ps, 10.0) == doctest::Approx(1.0));
    CHECK(b.grad[0] == doctest::Approx(0.8));
  }

  TEST_CASE("warmup schedule") {
    const double knee = warmup_lr(10000, 512, 10000);
    CHECK(std::abs(knee - std::pow(512.0, -0.5) * std::pow(10000.0, -0.5)) < 1e-12);
    const double ramp = std::pow(512.0, -0.5) * 10000.0 * std::pow(10000.0, -1.5);
    CHECK(std::abs(knee - ramp) < 1e-15);
    for (std::size_t s = 2; s <= 10000; ++s) {
      if (!(warmup_lr(s, 512) > warmup_lr(s - 1, 512))) {
        FAIL("not increasing at step " << s);
      }
    }
    for (std::size_t s = 10001; s <= 20000; s += 7) CHECK(warmup_lr(s, 512) < warmup_lr(s - 1, 512));
    CHECK(warmup_lr(20000, 512) < knee);
    CHECK(warmup_lr(1, 64, 4) == doctest::Approx(0.125 * 0.125));
    CHECK_THROWS_AS(warmup_lr(0, 512), ConfigError);
  }

  TEST_CASE("scst loss") {
    Tape t;
    const Var lp = t.leaf(Tensor::from_values({-1.0, -0.5, -1.5}));
    const Var loss = scst_loss(lp, 0.8, 0.5);
    CHECK(loss.value().item() == doctest::Approx(0.9).epsilon(1e-15));
    t.backward(loss);
    for (double g : t.grad(lp).data()) CHECK(g == doctest::Approx(-0.3));

    Tape z;
    const Var lp2 = z.leaf(Tensor::from_values({-2.0, -1.0}));
    const Var same = scst_loss(lp2, 0.4, 0.4);
    CHECK(same.value().item() == 0.0);
    z.backward(same);
    for (double g : z.grad(lp2).data()) CHECK(g == 0.0);
  }

  TEST_CASE("positive advantage raises the sampled caption's probability") {
    const Small s = small_set(4);
    ReFormer m(s.config, 1);
    const TrainingExample& ex = s.data.examples[0];
    auto sampled_logprob = [&]() {
      Tape t;
      const EncoderOutput enc = m.encode(t, ex.regions);
      CrossEntropyOptions ce;
      ce.reduction = Reduction::kSum;
      return -cross_entropy(m.decode_teacher_forced(t, enc, ex.caption_in), ex.caption_target, ce)
                  .value()
                  .item();
    };
    const double before = sampled_logprob();
    Tape t;
    const EncoderOutput enc = m.encode(t, ex.regions);
    CrossEntropyOptions ce;
    ce.reduction = Reduction::kSum;
    const Var nll = cross_entropy(m.decode_teacher_forced(t, enc, ex.caption_in),
                                  ex.caption_target, ce);
    m.params().zero_grad();
    t.backward(scst_loss(scale(nll, -1.0), 1.0, 0.2));
    for (Parameter* p : m.params().all()) {
      for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= 1e-3 * p->grad[i];
    }
    CHECK(sampled_logprob() > before);
  }

  TEST_CASE("training data uses the first caption") {
    const Small s = small_set(3);
    const TrainingExample& ex = s.data.examples[1];
    CHECK(ex.caption_in.front() == kBos);
    CHECK(ex.caption_target.back() == kEos);
    CHECK(detokenize(ex.caption_target, s.vocab) ==
          normalize_text(s.synth.records[1].captions[0]));
    CHECK(ex.references.size() == s.synth.records[1].captions.size());
    CHECK_THROWS_AS(prepare_training_data(s.synth.records, s.vocab, tiny_config(5)), DataError);
    CHECK_THROWS_AS(prepare_training_data({}, s.vocab, s.config), DataError);
  }

  TEST_CASE("step one lowers the relation loss and leaves the decoder alone") {
    const Small s = small_set(8);
    ReFormer m(s.config, 2);
    const auto decoder = snapshot(m, "decoder.");
    const auto encoder = snapshot(m, "encoder.");
    const StageResult r = run_step1_sgg(m, s.data, quick(40));
    CHECK(r.epoch_loss.size() == 40);
    CHECK(r.epoch_loss.back() < 0.5 * r.epoch_loss.front());
    CHECK(snapshot(m, "decoder.") == decoder);
    CHECK(snapshot(m, "encoder.") != encoder);
    CHECK(m.trained_stage() == 1);
    for (const Parameter* p : m.params().all()) CHECK(p->trainable);
  }

  TEST_CASE("step order is enforced") {
    const Small s = small_set(4);
    ReFormer m(s.config, 3);
    CHECK_THROWS_AS(run_step2_caption(m, s.data, quick(1)), ConfigError);
    StageOptions cold = quick(1);
    cold.cold_start = true;
    ReFormer c(s.config, 3);
    CHECK_NOTHROW(run_step2_caption(c, s.data, cold));
    CHECK(c.trained_stage() == 2);
    CHECK_THROWS_AS(run_step3_scst(m, s.data, quick(1)), ConfigError);
    run_step1_sgg(m, s.data, quick(1));
    CHECK_THROWS_AS(run_step3_scst(m, s.data, quick(1)), ConfigError);
    run_step2_caption(m, s.data, quick(1));
    StageOptions scst = quick(1);
    scst.max_steps = 1;
    const StageResult r = run_step3_scst(m, s.data, scst);
    CHECK(r.steps.size() == 1);
    CHECK(r.steps[0].lr == kScstLearningRate);
    CHECK(m.trained_stage() == 3);
  }

  TEST_CASE("frozen encoder is bit-unchanged by caption training") {
    Small s = small_set(6);
    s.config.freeze_encoder_in_caption = true;
    ReFormer m(s.config, 4);
    run_step1_sgg(m, s.data, quick(2));
    const auto encoder = snapshot(m, "encoder.");
    const auto embed = snapshot(m, "embed.");
    const auto decoder = snapshot(m, "decoder.");
    run_step2_caption(m, s.data, quick(3));
    CHECK(snapshot(m, "encoder.") == encoder);
    CHECK(snapshot(m, "embed.") == embed);
    CHECK(snapshot(m, "decoder.") != decoder);
  }

  TEST_CASE("training is deterministic under a seed") {
    const Small s = small_set(8);
    StageOptions o = quick(10);
    o.batch_size = 2;
    ReFormer a(s.config, 5), b(s.config, 5);
    std::ostringstream la, lb;
    o.log = &la;
    const auto ra = losses(run_step1_sgg(a, s.data, o));
    o.log = &lb;
    const auto rb = losses(run_step1_sgg(b, s.data, o));
    REQUIRE(ra.size() >= 10);
    CHECK(ra == rb);
    CHECK(la.str() == lb.str());
    CHECK(snapshot(a) == snapshot(b));
    const auto first = nlohmann::json::parse(la.str().substr(0, la.str().find('\n')));
    for (const char* key : {"step", "lr", "loss_total", "loss_caption", "loss_relation"}) {
      CHECK(first.contains(key));
    }
    o.log = nullptr;
    CHECK(losses(run_step2_caption(a, s.data, o)) == losses(run_step2_caption(b, s.data, o)));
  }

  TEST_CASE("resuming from a checkpoint reproduces the next steps") {
    const Small s = small_set(8);
    ReFormer a(s.config, 6);
    run_step1_sgg(a, s.data, quick(3));
    const std::string path = temp_path("resume.ckpt");
    save_checkpoint(path, a.params(), a.config(), {{"stage", 1}});
    // The checkpoint stores 32-bit values; continue from the same rounding.
    for (Parameter* p : a.params().all()) {
      for (double& v : p->value.data()) v = static_cast<double>(static_cast<float>(v));
    }
    const Checkpoint ck = load_checkpoint(path);
    ReFormer b(ck.config, 99);
    restore_parameters(b.params(), ck);
    b.set_trained_stage(ck.meta.at("stage").get<int>());
    StageOptions o = quick(1);
    o.max_steps = 4;
    CHECK(losses(run_step2_caption(a, s.data, o)) == losses(run_step2_caption(b, s.data, o)));
    CHECK(snapshot(a) == snapshot(b));
  }

  TEST_CASE("toy overfit through steps one and two") {
    const protocol::ToySet set = protocol::make_toy_set(42, 32);
    const protocol::OverfitRun run = protocol::overfit(set, 42, 0.99, 0.99);
    const ReFormer& m = *run.model;
    CHECK(run.step1_epochs + run.step2_epochs <= 300);
    CHECK(run.captions.accuracy >= 0.99);
    CHECK(run.graphs.predicate_accuracy >= 0.99);
    CHECK(run.captions.loss < 0.05);
    CHECK(run.graphs.object_accuracy >= 0.95);
    CHECK(run.exact_captions >= 30);

    const SggReport predcls = evaluate_sgg(m, set.synth.records, SggMode::kPredCls, {20});
    CHECK(predcls.rows[0].recall >= 0.95);
    std::size_t rank_one = 0;
    for (const ImageRecord& r : set.synth.records) {
      Tape t;
      t.set_grad_enabled(false);
      const EncoderOutput enc = m.encode(t, region_input(r, true));
      const auto p = m.generate_scene_graph(t, enc, r.graph().labels, 1);
      const Triplet top{p.triplets[0].subject, p.triplets[0].predicate, p.triplets[0].object};
      rank_one += std::find(r.triplets.begin(), r.triplets.end(), top) != r.triplets.end();
    }
    CHECK(rank_one >= 30);
  }
}
