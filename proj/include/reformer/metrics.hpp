// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "reformer/data_io.hpp"
#include "reformer/model.hpp"
#include "reformer/scene_graph.hpp"

namespace reformer {

using Tokens = std::vector<std::string>;

// ---------------------------------------------------------------------------
// Caption metrics. Inputs are word sequences; `split_words` gives the
// standard lowercase, punctuation-free tokenization.

struct BleuScore {
  // bleu[n - 1] is BLEU-n.
  std::array<double, 4> bleu{};
  std::array<double, 4> precision{};
  double brevity_penalty = 0.0;
  bool empty_candidate = false;
};

// Corpus BLEU: clipped n-gram counts and lengths are summed over the corpus
// before combining; the reference length per sentence is the closest one
// (shorter wins ties). No smoothing.
BleuScore corpus_bleu(const std::vector<Tokens>& candidates,
                      const std::vector<std::vector<Tokens>>& references);
double bleu(const Tokens& candidate, const std::vector<Tokens>& references,
            int n);

// LCS F-measure with beta = 1.2, best over the references.
double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references);
double corpus_rouge_l(const std::vector<Tokens>& candidates,
                      const std::vector<std::vector<Tokens>>& references);

struct CiderResult {
  double score = 0.0;
  std::vector<double> per_image;
  // One-image corpora give every n-gram an IDF of zero.
  bool degenerate_idf = false;
};

// CIDEr-D with document frequencies taken from a fixed reference corpus:
// n = 1..4, tf-idf vectors with clipped candidate weights, cosine per n,
// Gaussian length penalty (sigma 6), averaged over n and references, x10.
class CiderD {
 public:
  explicit CiderD(const std::vector<std::vector<Tokens>>& reference_corpus);

  double score(const Tokens& candidate, const std::vector<Tokens>& references) const;
  bool degenerate_idf() const { return corpus_size_ <= 1; }

 private:
  std::map<Tokens, double> document_frequency_;
  std::size_t corpus_size_ = 0;
};

CiderResult cider_d(const std::vector<Tokens>& candidates,
                    const std::vector<std::vector<Tokens>>& references);

struct CaptionScores {
  double bleu1 = 0.0;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider_d = 0.0;
  bool degenerate = false;
};

CaptionScores score_captions(const std::vector<Tokens>& candidates,
                             const std::vector<std::vector<Tokens>>& references);
nlohmann::json to_json(const CaptionScores& s);

// ---------------------------------------------------------------------------
// Scene-graph recall

enum class SggMode { kPredCls, kSgCls, kSgDet };

const char* mode_name(SggMode mode);
SggMode parse_mode(const std::string& name);  // ConfigError when unknown

inline constexpr double kSgDetIouThreshold = 0.5;

// Graph-constrained Recall@k: only the highest-scoring prediction per ordered
// pair is kept (earlier entries win ties), the survivors are ranked by score
// and the first k are matched against the ground truth. nullopt when the
// ground truth has no triplets.
std::optional<double> recall_at_k(const std::vector<ScoredTriplet>& predictions,
                                  const SceneGraph& gt, std::size_t k,
                                  SggMode mode);

struct RecallRow {
  SggMode mode = SggMode::kPredCls;
  std::size_t k = 0;
  double recall = 0.0;
};

struct SggReport {
  std::vector<RecallRow> rows;
  std::size_t images = 0;
  std::size_t skipped = 0;  // images without ground-truth triplets
};

nlohmann::json to_json(const SggReport& r);

// ---------------------------------------------------------------------------
// Model evaluation

// Greedy (or beam) captions for every record, scored against all of the
// record's captions.
CaptionScores evaluate_captions(const ReFormer& model,
                                const std::vector<ImageRecord>& records,
                                const Vocabulary& vocab,
                                const DecodeOptions& decode = {},
                                std::vector<std::string>* generated = nullptr);

// PredCls feeds ground-truth boxes and labels; SGCls feeds ground-truth
// boxes only; SGDet uses `proposals` (matched by image_id) and IoU matching.
SggReport evaluate_sgg(const ReFormer& model,
                       const std::vector<ImageRecord>& records, SggMode mode,
                       const std::vector<std::size_t>& ks,
                       const std::vector<ImageRecord>* proposals = nullptr);

}  // namespace reformer
