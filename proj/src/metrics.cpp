// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "reformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

#include <fmt/format.h>

#include "reformer/errors.hpp"

namespace reformer {

namespace {

using NgramCounts = std::map<Tokens, double>;

NgramCounts ngrams(const Tokens& words, std::size_t n) {
  NgramCounts out;
  if (words.size() < n) return out;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    out[Tokens(words.begin() + static_cast<std::ptrdiff_t>(i),
               words.begin() + static_cast<std::ptrdiff_t>(i + n))] += 1.0;
  }
  return out;
}

NgramCounts all_ngrams(const Tokens& words, std::size_t max_n) {
  NgramCounts out;
  for (std::size_t n = 1; n <= max_n; ++n) {
    for (auto& [g, c] : ngrams(words, n)) out[g] += c;
  }
  return out;
}

void check_corpus(std::size_t cands, std::size_t refs) {
  if (cands != refs) {
    throw DataError(fmt::format("{} candidates but {} reference sets", cands, refs));
  }
  if (cands == 0) throw DataError("empty caption corpus");
}

}  // namespace

// ---------------------------------------------------------------------------
// BLEU

BleuScore corpus_bleu(const std::vector<Tokens>& candidates,
                      const std::vector<std::vector<Tokens>>& references) {
  check_corpus(candidates.size(), references.size());
  std::array<double, 4> matched{};
  std::array<double, 4> total{};
  double cand_len = 0.0;
  double ref_len = 0.0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const Tokens& cand = candidates[s];
    const auto& refs = references[s];
    if (refs.empty()) throw DataError(fmt::format("image {} has no references", s));
    cand_len += static_cast<double>(cand.size());
    std::size_t best = refs.front().size();
    for (const Tokens& r : refs) {
      const auto diff = [&cand](std::size_t len) {
        return len > cand.size() ? len - cand.size() : cand.size() - len;
      };
      if (diff(r.size()) < diff(best) ||
          (diff(r.size()) == diff(best) && r.size() < best)) {
        best = r.size();
      }
    }
    ref_len += static_cast<double>(best);
    for (std::size_t n = 1; n <= 4; ++n) {
      const NgramCounts c = ngrams(cand, n);
      NgramCounts max_ref;
      for (const Tokens& r : refs) {
        for (const auto& [g, k] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], k);
      }
      for (const auto& [g, k] : c) {
        total[n - 1] += k;
        auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[n - 1] += std::min(k, it->second);
      }
    }
  }
  BleuScore out;
  if (cand_len == 0.0) {
    out.empty_candidate = true;
    return out;
  }
  out.brevity_penalty = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    out.precision[n] = total[n] > 0.0 ? matched[n] / total[n] : 0.0;
    if (out.precision[n] == 0.0) zero = true;
    if (!zero) log_sum += std::log(out.precision[n]);
    out.bleu[n] = zero ? 0.0
                       : out.brevity_penalty *
                             std::exp(log_sum / static_cast<double>(n + 1));
  }
  return out;
}

double bleu(const Tokens& candidate, const std::vector<Tokens>& references,
            int n) {
  if (n < 1 || n > 4) throw ConfigError("BLEU order must lie in 1..4");
  return corpus_bleu({candidate}, {references}).bleu[static_cast<std::size_t>(n - 1)];
}

// ---------------------------------------------------------------------------
// ROUGE-L

double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references) {
  if (references.empty()) throw DataError("rouge_l: no references");
  constexpr double kBeta = 1.2;
  double best = 0.0;
  for (const Tokens& ref : references) {
    std::vector<std::size_t> prev(ref.size() + 1, 0);
    std::vector<std::size_t> cur(ref.size() + 1, 0);
    for (const auto& w : candidate) {
      for (std::size_t j = 1; j <= ref.size(); ++j) {
        cur[j] = w == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
      }
      std::swap(prev, cur);
    }
    const auto lcs = static_cast<double>(prev[ref.size()]);
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(candidate.size());
    const double r = lcs / static_cast<double>(ref.size());
    const double f = (1.0 + kBeta * kBeta) * p * r / (r + kBeta * kBeta * p);
    best = std::max(best, f);
  }
  return best;
}

double corpus_rouge_l(const std::vector<Tokens>& candidates,
                      const std::vector<std::vector<Tokens>>& references) {
  check_corpus(candidates.size(), references.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    sum += rouge_l(candidates[i], references[i]);
  }
  return sum / static_cast<double>(candidates.size());
}

// ---------------------------------------------------------------------------
// CIDEr-D

namespace {

constexpr std::size_t kCiderN = 4;
constexpr double kCiderSigma = 6.0;

struct CiderVector {
  std::array<std::map<Tokens, double>, kCiderN> vec;
  std::array<double, kCiderN> norm{};
  double length = 0.0;
};

}  // namespace

CiderD::CiderD(const std::vector<std::vector<Tokens>>& corpus)
    : corpus_size_(corpus.size()) {
  for (const auto& refs : corpus) {
    std::set<Tokens> seen;
    for (const Tokens& r : refs) {
      for (const auto& [g, c] : all_ngrams(r, kCiderN)) seen.insert(g);
    }
    for (const Tokens& g : seen) document_frequency_[g] += 1.0;
  }
}

double CiderD::score(const Tokens& candidate,
                     const std::vector<Tokens>& references) const {
  if (references.empty()) throw DataError("cider_d: no references");
  const double log_n = std::log(static_cast<double>(std::max<std::size_t>(corpus_size_, 1)));
  const auto to_vec = [&](const Tokens& words) {
    CiderVector v;
    for (const auto& [g, tf] : all_ngrams(words, kCiderN)) {
      auto it = document_frequency_.find(g);
      const double df = it == document_frequency_.end() ? 0.0 : it->second;
      const std::size_t n = g.size() - 1;
      const double w = tf * (log_n - std::log(std::max(1.0, df)));
      v.vec[n][g] = w;
      v.norm[n] += w * w;
      if (n == 1) v.length += tf;
    }
    for (double& x : v.norm) x = std::sqrt(x);
    return v;
  };
  const CiderVector hyp = to_vec(candidate);
  std::array<double, kCiderN> acc{};
  for (const Tokens& r : references) {
    const CiderVector ref = to_vec(r);
    const double delta = hyp.length - ref.length;
    const double penalty = std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
    for (std::size_t n = 0; n < kCiderN; ++n) {
      double val = 0.0;
      for (const auto& [g, w] : hyp.vec[n]) {
        auto it = ref.vec[n].find(g);
        if (it != ref.vec[n].end()) val += std::min(w, it->second) * it->second;
      }
      if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) val /= hyp.norm[n] * ref.norm[n];
      acc[n] += val * penalty;
    }
  }
  double mean = 0.0;
  for (double a : acc) mean += a;
  mean /= static_cast<double>(kCiderN);
  return 10.0 * mean / static_cast<double>(references.size());
}

CiderResult cider_d(const std::vector<Tokens>& candidates,
                    const std::vector<std::vector<Tokens>>& references) {
  check_corpus(candidates.size(), references.size());
  const CiderD scorer(references);
  CiderResult out;
  out.degenerate_idf = scorer.degenerate_idf();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out.per_image.push_back(scorer.score(candidates[i], references[i]));
    out.score += out.per_image.back();
  }
  out.score /= static_cast<double>(candidates.size());
  return out;
}

CaptionScores score_captions(const std::vector<Tokens>& candidates,
                             const std::vector<std::vector<Tokens>>& references) {
  CaptionScores s;
  const BleuScore b = corpus_bleu(candidates, references);
  s.bleu1 = b.bleu[0];
  s.bleu4 = b.bleu[3];
  s.rouge_l = corpus_rouge_l(candidates, references);
  const CiderResult c = cider_d(candidates, references);
  s.cider_d = c.score;
  s.degenerate = c.degenerate_idf || b.empty_candidate;
  return s;
}

nlohmann::json to_json(const CaptionScores& s) {
  return {{"bleu1", s.bleu1},
          {"bleu4", s.bleu4},
          {"rougeL", s.rouge_l},
          {"ciderD", s.cider_d}};
}

// ---------------------------------------------------------------------------
// Recall@K

const char* mode_name(SggMode mode) {
  switch (mode) {
    case SggMode::kPredCls:
      return "predcls";
    case SggMode::kSgCls:
      return "sgcls";
    case SggMode::kSgDet:
      return "sgdet";
  }
  return "?";
}

SggMode parse_mode(const std::string& name) {
  if (name == "predcls") return SggMode::kPredCls;
  if (name == "sgcls") return SggMode::kSgCls;
  if (name == "sgdet") return SggMode::kSgDet;
  throw ConfigError(fmt::format("unknown SGG mode '{}' (predcls|sgcls|sgdet)", name));
}

namespace {

bool matches(const ScoredTriplet& p, const Triplet& t, const SceneGraph& gt,
             SggMode mode) {
  if (p.predicate != t.predicate) return false;
  const int sl = gt.labels[t.subject];
  const int ol = gt.labels[t.object];
  switch (mode) {
    case SggMode::kPredCls:
      return p.subject == t.subject && p.object == t.object;
    case SggMode::kSgCls:
      return p.subject == t.subject && p.object == t.object &&
             p.subject_label == sl && p.object_label == ol;
    case SggMode::kSgDet:
      return p.subject_label == sl && p.object_label == ol &&
             iou(p.subject_box, gt.boxes[t.subject]) >= kSgDetIouThreshold &&
             iou(p.object_box, gt.boxes[t.object]) >= kSgDetIouThreshold;
  }
  return false;
}

}  // namespace

std::optional<double> recall_at_k(const std::vector<ScoredTriplet>& predictions,
                                  const SceneGraph& gt, std::size_t k,
                                  SggMode mode) {
  if (gt.triplets.empty()) return std::nullopt;
  for (const auto& p : predictions) {
    if (!std::isfinite(p.score)) throw NumericalError("recall_at_k: non-finite score");
    if (p.predicate <= kBackgroundPredicate) {
      throw DataError("recall_at_k: background predicted as a triplet");
    }
  }
  // Best prediction per ordered pair.
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> best;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto key = std::make_pair(predictions[i].subject, predictions[i].object);
    auto [it, inserted] = best.emplace(key, i);
    if (!inserted && predictions[i].score > predictions[it->second].score) {
      it->second = i;
    }
  }
  std::vector<std::size_t> kept;
  for (const auto& [key, i] : best) kept.push_back(i);
  std::sort(kept.begin(), kept.end());
  std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) {
    return predictions[a].score > predictions[b].score;
  });
  if (kept.size() > k) kept.resize(k);

  std::size_t hit = 0;
  for (const Triplet& t : gt.triplets) {
    for (std::size_t i : kept) {
      if (matches(predictions[i], t, gt, mode)) {
        ++hit;
        break;
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(gt.triplets.size());
}

nlohmann::json to_json(const SggReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"mode", mode_name(row.mode)}, {"k", row.k}, {"recall", row.recall}});
  }
  return {{"rows", rows}, {"images", r.images}, {"skipped", r.skipped}};
}

// ---------------------------------------------------------------------------
// Model evaluation

CaptionScores evaluate_captions(const ReFormer& model,
                                const std::vector<ImageRecord>& records,
                                const Vocabulary& vocab,
                                const DecodeOptions& decode,
                                std::vector<std::string>* generated) {
  std::vector<Tokens> cands;
  std::vector<std::vector<Tokens>> refs;
  for (const ImageRecord& r : records) {
    if (r.captions.empty()) {
      throw DataError(fmt::format("image '{}' has no reference captions", r.image_id));
    }
    Tape tape;
    tape.set_grad_enabled(false);
    const EncoderOutput enc = model.encode(tape, region_input(r, true));
    const GeneratedCaption g = model.generate_caption(tape, enc, decode);
    const std::string text = detokenize(g.tokens, vocab);
    if (generated != nullptr) generated->push_back(text);
    cands.push_back(split_words(text));
    std::vector<Tokens> rs;
    for (const auto& c : r.captions) rs.push_back(split_words(c));
    refs.push_back(std::move(rs));
  }
  return score_captions(cands, refs);
}

SggReport evaluate_sgg(const ReFormer& model,
                       const std::vector<ImageRecord>& records, SggMode mode,
                       const std::vector<std::size_t>& ks,
                       const std::vector<ImageRecord>* proposals) {
  if (ks.empty()) throw ConfigError("evaluate_sgg: no k values");
  std::unordered_map<std::string, const ImageRecord*> by_id;
  if (mode == SggMode::kSgDet) {
    if (proposals == nullptr) {
      throw DataError("sgdet evaluation needs region proposals (none given)");
    }
    for (const auto& p : *proposals) by_id.emplace(p.image_id, &p);
  }
  const std::size_t top = *std::max_element(ks.begin(), ks.end());
  std::vector<double> sums(ks.size(), 0.0);
  SggReport report;
  for (const ImageRecord& r : records) {
    const SceneGraph gt = r.graph();
    if (gt.triplets.empty()) {
      ++report.skipped;
      continue;
    }
    const ImageRecord* src = &r;
    if (mode == SggMode::kSgDet) {
      auto it = by_id.find(r.image_id);
      if (it == by_id.end()) {
        throw DataError(fmt::format("no proposals for image '{}'", r.image_id));
      }
      src = it->second;
    }
    const bool with_labels = mode == SggMode::kPredCls;
    Tape tape;
    tape.set_grad_enabled(false);
    const RegionInput in = region_input(*src, with_labels);
    const EncoderOutput enc = model.encode(tape, in);
    const SceneGraphPrediction pred =
        model.generate_scene_graph(tape, enc, in.labels, top);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      sums[i] += *recall_at_k(pred.triplets, gt, ks[i], mode);
    }
    ++report.images;
  }
  for (std::size_t i = 0; i < ks.size(); ++i) {
    report.rows.push_back(
        {mode, ks[i], report.images ? sums[i] / static_cast<double>(report.images) : 0.0});
  }
  return report;
}

}  // namespace reformer
