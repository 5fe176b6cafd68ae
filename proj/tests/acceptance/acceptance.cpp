// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: evaluates each numbered criterion at its pinned tolerance
// and prints one PASS/FAIL line per criterion. Exit status is nonzero when any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "reformer/data_io.hpp"
#include "reformer/gradcheck_suite.hpp"
#include "reformer/metrics.hpp"
#include "reformer/model.hpp"
#include "reformer/training.hpp"
#include "support/oracles.hpp"
#include "support/protocols.hpp"

using namespace reformer;

namespace {

// Pinned tolerances and thresholds.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradEps = 1e-5;
constexpr std::size_t kGradConfigurations = 20;
constexpr std::uint64_t kGradSeed = 42;
constexpr double kGradCpuSeconds = 120.0;

constexpr double kOverfitAccuracy = 0.99;
constexpr std::size_t kOverfitMaxEpochs = 300;
constexpr double kOverfitCpuSeconds = 600.0;
constexpr std::size_t kOverfitExact = 30;

constexpr std::size_t kRecallGraphs = 200;
constexpr double kMetricTolerance = 1e-6;

constexpr std::size_t kSeeds = 10;
constexpr std::size_t kScstIterations = 50;
constexpr std::size_t kScstRequired = 9;
constexpr std::size_t kAblationRequired = 8;

constexpr std::size_t kDeterminismSteps = 10;
constexpr std::size_t kWarmup = 10000;
constexpr double kScheduleTolerance = 1e-12;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double cpu_seconds(std::clock_t since) {
  return static_cast<double>(std::clock() - since) / CLOCKS_PER_SEC;
}

Tokens words(const std::string& s) { return split_words(s); }

Outcome gradient_suite() {
  const std::clock_t t0 = std::clock();
  GradCheckSuiteOptions o;
  o.configurations = kGradConfigurations;
  o.seed = kGradSeed;
  o.tolerance = kGradTolerance;
  o.eps = kGradEps;
  const std::vector<GradCheckCase> cases = run_gradcheck_suite(o);
  const double cpu = cpu_seconds(t0);
  std::size_t failed = 0;
  const GradCheckCase* worst = nullptr;
  for (const GradCheckCase& c : cases) {
    if (!c.passed) ++failed;
    if (worst == nullptr || c.max_rel_error > worst->max_rel_error) worst = &c;
  }
  Outcome out;
  out.pass = failed == 0 && !cases.empty() && cpu < kGradCpuSeconds;
  out.detail = fmt::format("{} cases, {} failed, {:.1f}s cpu (limit {:.0f}s)", cases.size(),
                           failed, cpu, kGradCpuSeconds);
  if (worst != nullptr) {
    out.detail += fmt::format("; worst {} on {} rel-err {:.3e} (analytic {:.10e}, numeric {:.10e})",
                              worst->name, worst->worst, worst->max_rel_error, worst->analytic,
                              worst->numeric);
  }
  return out;
}

Outcome loss_algebra() {
  const protocol::ToySet set = protocol::make_toy_set(42, 4);
  const TrainingExample& ex = set.data.examples.front();
  bool ok = true;
  std::string detail;

  // total(lambda = 0) against the caption loss.
  {
    const ReFormer model(set.config, 1);
    Tape t(1, true);
    const EncoderOutput enc = model.encode(t, ex.regions);
    const Var lc = caption_loss(model.decode_teacher_forced(t, enc, ex.caption_in),
                                ex.caption_target);
    const TotalLoss tl = total_loss(lc, model.relation_loss(t, enc, ex.graph), 0.0);
    const bool same = tl.total.value().item() == lc.value().item() &&
                      tl.values.total == lc.value().item();
    ok = ok && same;
    detail += fmt::format("lambda=0 total {} caption", same ? "==" : "!=");
  }

  // Relation and object heads receive no gradient under lambda = 0 without
  // the object term.
  {
    ReFormerConfig cfg = set.config;
    cfg.use_object_loss = false;
    ReFormer model(cfg, 2);
    model.params().zero_grad();
    Tape t(2, true);
    const EncoderOutput enc = model.encode(t, ex.regions);
    const Var lc = caption_loss(model.decode_teacher_forced(t, enc, ex.caption_in),
                                ex.caption_target);
    t.backward(total_loss(lc, model.relation_loss(t, enc, ex.graph), 0.0).total);
    std::size_t tensors = 0, nonzero = 0;
    for (const char* prefix : {"relation.", "object."}) {
      for (const Parameter* p : model.params().with_prefix(prefix)) {
        ++tensors;
        for (double g : p->grad.data()) {
          if (g != 0.0) ++nonzero;
        }
      }
    }
    ok = ok && tensors > 0 && nonzero == 0;
    detail += fmt::format("; head grads nonzero {} over {} tensors", nonzero, tensors);
  }

  // Default lambda.
  {
    const ReFormer model(set.config, 3);
    Tape t(3, true);
    const EncoderOutput enc = model.encode(t, ex.regions);
    const Var lc = caption_loss(model.decode_teacher_forced(t, enc, ex.caption_in),
                                ex.caption_target);
    const RelationLoss rel = model.relation_loss(t, enc, ex.graph);
    const double lambda = ReFormerConfig{}.lambda;
    const TotalLoss tl = total_loss(lc, rel, lambda);
    const double want = lc.value().item() + 0.1 * rel.loss.value().item();
    const bool same = lambda == 0.1 && tl.total.value().item() == want && tl.values.total == want;
    ok = ok && same;
    detail += fmt::format("; default lambda {} total {} caption + 0.1 relation", lambda,
                          same ? "==" : "!=");
  }
  return {ok, detail};
}

Outcome overfit() {
  const std::clock_t t0 = std::clock();
  const protocol::ToySet set = protocol::make_toy_set(42, 32);
  const protocol::OverfitRun run =
      protocol::overfit(set, 42, kOverfitAccuracy, kOverfitAccuracy);
  const double cpu = cpu_seconds(t0);
  const std::size_t epochs = run.step1_epochs + run.step2_epochs;
  Outcome out;
  out.pass = run.captions.accuracy >= kOverfitAccuracy &&
             run.graphs.predicate_accuracy >= kOverfitAccuracy && epochs <= kOverfitMaxEpochs &&
             cpu < kOverfitCpuSeconds && run.exact_captions >= kOverfitExact;
  out.detail = fmt::format(
      "token acc {:.4f}, predicate acc {:.4f} (need {:.2f}); epochs {}+{} (limit {}); "
      "exact captions {}/{} (need {}); {:.1f}s cpu",
      run.captions.accuracy, run.graphs.predicate_accuracy, kOverfitAccuracy, run.step1_epochs,
      run.step2_epochs, kOverfitMaxEpochs, run.exact_captions, set.data.examples.size(),
      kOverfitExact, cpu);
  return out;
}

Outcome recall_protocol() {
  std::mt19937_64 rng(4);
  std::size_t comparisons = 0, mismatches = 0;
  for (std::size_t trial = 0; trial < kRecallGraphs; ++trial) {
    const SceneGraph gt = oracle::random_graph(rng, 2 + trial % 4);
    const auto preds = oracle::random_predictions(rng, gt);
    for (SggMode m : {SggMode::kPredCls, SggMode::kSgCls, SggMode::kSgDet}) {
      for (std::size_t k : {1, 5, 20}) {
        const auto got = recall_at_k(preds, gt, k, m);
        ++comparisons;
        if (!got.has_value() || *got != oracle::brute_recall(preds, gt, k, m)) ++mismatches;
      }
    }
  }
  return {mismatches == 0,
          fmt::format("{} graphs, {} comparisons, {} mismatches", kRecallGraphs, comparisons,
                      mismatches)};
}

Outcome metric_oracles() {
  std::vector<std::string> misses;
  auto near = [&](const std::string& what, double got, double want) {
    if (!(std::abs(got - want) <= kMetricTolerance)) {
      misses.push_back(fmt::format("{} {:.9f} vs {:.9f}", what, got, want));
    }
  };

  const BleuScore clip = corpus_bleu({words("the cat the cat")}, {{words("the cat sat")}});
  near("clipped precision", clip.precision[0], 2.0 / 4.0);
  near("clipped precision oracle",
       static_cast<double>(
           oracle::clipped_precision(words("the cat the cat"), {words("the cat sat")}, 1)),
       2.0 / 4.0);
  near("lcs", static_cast<double>(oracle::lcs(words("a b c d"), words("a c d"))), 3.0);
  const double p = 3.0 / 4.0, r = 1.0, b2 = 1.2 * 1.2;
  near("rouge-l", rouge_l(words("a b c d"), {words("a c d")}), (1 + b2) * p * r / (r + b2 * p));

  const std::vector<std::vector<Tokens>> refs = {
      {words("a man riding a horse"), words("a person on a horse")},
      {words("a dog on a table"), words("the dog sits on the table")},
      {words("a cat near a car"), words("a cat beside the red car")},
  };
  const std::vector<Tokens> cands = {words("a man on a horse"), words("a dog on the table"),
                                     words("a car near a cat")};
  const CiderResult cider = cider_d(cands, refs);
  long double mean = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const long double want = oracle::cider(cands[i], refs[i], refs);
    near(fmt::format("cider image {}", i), cider.per_image[i], static_cast<double>(want));
    mean += want;
  }
  near("cider corpus", cider.score, static_cast<double>(mean / 3));

  // Identical candidates reach the corpus maxima.
  std::mt19937_64 rng(5);
  const std::vector<std::string> pool = {"a",  "the",   "man", "dog", "on",
                                         "near", "horse", "table", "red", "big"};
  auto sentence = [&] {
    Tokens s(4 + rng() % 4);
    for (auto& w : s) w = pool[rng() % pool.size()];
    return s;
  };
  std::size_t maxima_failures = 0;
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<Tokens>> corpus;
    std::vector<Tokens> self, other;
    for (int img = 0; img < 4; ++img) {
      corpus.push_back({sentence()});
      self.push_back(corpus.back()[0]);
      other.push_back(sentence());
    }
    const CaptionScores s = score_captions(self, corpus);
    const CaptionScores o = score_captions(other, corpus);
    const bool top = std::abs(s.bleu1 - 1.0) <= kMetricTolerance &&
                     std::abs(s.bleu4 - 1.0) <= kMetricTolerance &&
                     std::abs(s.rouge_l - 1.0) <= kMetricTolerance && s.bleu1 >= o.bleu1 &&
                     s.bleu4 >= o.bleu4 && s.rouge_l >= o.rouge_l && s.cider_d >= o.cider_d;
    if (!top) ++maxima_failures;
  }
  if (maxima_failures > 0) misses.push_back(fmt::format("{} maxima failures", maxima_failures));

  Outcome out;
  out.pass = misses.empty();
  out.detail = misses.empty() ? fmt::format("all fixtures within {:.0e}; 30 corpora peak on "
                                            "identical candidates",
                                            kMetricTolerance)
                              : misses.front() + fmt::format(" ({} misses)", misses.size());
  return out;
}

Outcome scst_direction() {
  std::size_t improved = 0;
  std::string values;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    const protocol::ScstProbe p = protocol::scst_probe(seed, kScstLearningRate, kScstIterations);
    if (p.cider_after > p.cider_before) ++improved;
    values += fmt::format("{}{:+.2e}", seed == 1 ? "" : " ", p.cider_after - p.cider_before);
  }
  return {improved >= kScstRequired,
          fmt::format("lr {:.0e}, {} iterations: improved in {}/{} seeds (need {}); deltas {}",
                      kScstLearningRate, kScstIterations, improved, kSeeds, kScstRequired,
                      values)};
}

Outcome sequential_benefit() {
  std::size_t star = 0, minus = 0;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    const protocol::AblationProbe p = protocol::ablation_probe(seed);
    if (p.frozen_encoder >= p.full) ++star;
    if (p.no_relation_loss >= p.full) ++minus;
  }
  return {star >= kAblationRequired && minus >= kAblationRequired,
          fmt::format("frozen encoder >= full in {}/{}; without relation loss >= full in {}/{} "
                      "(need {} each)",
                      star, kSeeds, minus, kSeeds, kAblationRequired)};
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const protocol::ToySet set = protocol::make_toy_set(7, 8);
  auto first_losses = [&] {
    ReFormer m(set.config, 7);
    StageOptions o;
    o.max_steps = kDeterminismSteps;
    o.batch_size = 2;
    o.warmup = protocol::kToyWarmup;
    o.seed = 7;
    std::vector<double> losses;
    for (const StepLog& s : run_step1_sgg(m, set.data, o).steps) losses.push_back(s.loss_total);
    for (const StepLog& s : run_step2_caption(m, set.data, o).steps) {
      losses.push_back(s.loss_total);
    }
    return losses;
  };
  const std::vector<double> a = first_losses();
  const std::vector<double> b = first_losses();
  const bool same_losses = a.size() == 2 * kDeterminismSteps && a == b;

  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "reformer_acceptance";
  std::filesystem::create_directories(dir);
  const ReFormer model(set.config, 8);
  save_checkpoint(dir / "a.ckpt", model.params(), model.config(), {{"stage", 0}});
  save_checkpoint(dir / "b.ckpt", model.params(), model.config(), {{"stage", 0}});
  const bool identical = slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt");

  ReFormer restored(set.config, 99);
  restore_parameters(restored.params(), load_checkpoint(dir / "a.ckpt"));
  std::size_t off = 0, total = 0;
  const auto& src = model.params().all();
  const auto& dst = restored.params().all();
  for (std::size_t i = 0; i < src.size(); ++i) {
    for (std::size_t k = 0; k < src[i]->value.size(); ++k) {
      ++total;
      if (dst[i]->value[k] != static_cast<double>(static_cast<float>(src[i]->value[k]))) ++off;
    }
  }
  std::filesystem::remove_all(dir);

  return {same_losses && identical && off == 0 && total > 0,
          fmt::format("first {} losses of two stages {}; {} of {} values off the 32-bit "
                      "round trip; saves {}",
                      a.size(), same_losses ? "bit-identical" : "differ", off, total,
                      identical ? "byte-identical" : "differ")};
}

Outcome schedule() {
  const std::size_t d = ReFormerConfig{}.d_model;
  auto closed_form = [&](std::size_t step) {
    const long double s = static_cast<long double>(step);
    return std::pow(static_cast<long double>(d), -0.5L) *
           std::min(std::pow(s, -0.5L), s * std::pow(static_cast<long double>(kWarmup), -1.5L));
  };
  const double got = warmup_lr(kWarmup, d, kWarmup);
  const double err = std::abs(static_cast<double>(got - closed_form(kWarmup)));
  bool monotone = true;
  for (std::size_t s = kWarmup - 1000; s < kWarmup; ++s) {
    monotone = monotone && warmup_lr(s, d, kWarmup) < warmup_lr(s + 1, d, kWarmup);
  }
  for (std::size_t s = kWarmup; s < kWarmup + 1000; ++s) {
    monotone = monotone && warmup_lr(s, d, kWarmup) > warmup_lr(s + 1, d, kWarmup);
  }
  return {err <= kScheduleTolerance && monotone,
          fmt::format("lr({}) = {:.15e}, |err| {:.1e} (limit {:.0e}); {}", kWarmup, got, err,
                      kScheduleTolerance,
                      monotone ? "rises then falls around the knee" : "not monotone")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Evaluate only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {1, "gradient suite", gradient_suite},
      {2, "loss algebra", loss_algebra},
      {3, "overfit oracle", overfit},
      {4, "scene-graph recall oracle", recall_protocol},
      {5, "metric oracles", metric_oracles},
      {6, "scst direction", scst_direction},
      {7, "sequential-training benefit", sequential_benefit},
      {8, "determinism and persistence", determinism},
      {9, "schedule", schedule},
  };
  const std::set<int> selected(only.begin(), only.end());

  std::size_t evaluated = 0, failed = 0;
  for (const Criterion& c : criteria) {
    if (!selected.empty() && selected.count(c.id) == 0) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, fmt::format("threw: {}", e.what())};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++evaluated;
    if (!out.pass) ++failed;
    fmt::print("criterion {}: {} {}: {} [{:.1f}s]\n", c.id, out.pass ? "PASS" : "FAIL", c.name,
               out.detail, secs);
    std::fflush(stdout);
  }
  fmt::print("acceptance: {} criteria evaluated, {} passed, {} failed\n", evaluated,
             evaluated - failed, failed);
  return failed == 0 ? 0 : 1;
}
