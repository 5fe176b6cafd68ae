// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "reformer/config.hpp"
#include "reformer/model.hpp"
#include "reformer/nn.hpp"
#include "reformer/scene_graph.hpp"
#include "reformer/tensor.hpp"

namespace reformer {

// ---------------------------------------------------------------------------
// Captions

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr std::size_t kNumSpecialTokens = 4;

class Vocabulary {
 public:
  // Specials only.
  Vocabulary();
  // `words` must start with the four specials in id order.
  explicit Vocabulary(std::vector<std::string> words);

  std::size_t size() const { return words_.size(); }
  const std::string& word(int id) const;
  int id(const std::string& word) const;  // kUnk when absent
  bool contains(const std::string& word) const;
  const std::vector<std::string>& words() const { return words_; }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.words_ == b.words_;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

// Lowercases and replaces every non-alphanumeric character with a space.
std::string normalize_text(const std::string& text);
std::vector<std::string> split_words(const std::string& text);

// Keeps words seen at least `min_count` times; ids after the specials are
// ordered by descending frequency, then lexicographically.
Vocabulary build_vocab(const std::vector<std::string>& captions,
                       std::size_t min_count = 5);

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
// Drops special tokens.
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Dataset records

struct Region {
  BoundingBox box;
  int label_id = 0;
  std::vector<double> feature;

  friend bool operator==(const Region&, const Region&) = default;
};

struct ImageRecord {
  std::string image_id;
  double width = 0.0;
  double height = 0.0;
  std::vector<Region> regions;
  std::vector<std::string> captions;
  std::vector<Triplet> triplets;

  SceneGraph graph() const;
  // [regions, feature width]
  Tensor features() const;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

// Model input for a record's regions, with or without their labels.
RegionInput region_input(const ImageRecord& r, bool with_labels);

nlohmann::json record_to_json(const ImageRecord& r);
// Throws DataError on schema violations.
ImageRecord record_from_json(const nlohmann::json& j);

struct DatasetLimits {
  std::size_t num_object_classes = static_cast<std::size_t>(-1);
  std::size_t num_predicates = static_cast<std::size_t>(-1);
};

// One JSON record per line. Every record is validated; the first malformed
// line raises DataError naming the file and line number.
std::vector<ImageRecord> load_dataset(const std::filesystem::path& path,
                                      const DatasetLimits& limits = {});
std::vector<ImageRecord> parse_dataset(const std::string& text,
                                       const std::string& source = "<memory>",
                                       const DatasetLimits& limits = {});
void save_dataset(const std::vector<ImageRecord>& records,
                  const std::filesystem::path& path);
std::string serialize_dataset(const std::vector<ImageRecord>& records);

void save_vocab_file(const std::vector<std::string>& words,
                     const std::filesystem::path& path);
std::vector<std::string> load_vocab_file(const std::filesystem::path& path);

// Word-vector text file, one "word v1 ... vd" per line (GloVe layout). Rows
// of `table` [vocab, d] for in-vocabulary words are overwritten; the first
// occurrence of a word wins and specials are never touched. Every line must
// have exactly d components. Returns the number of rows set.
std::size_t load_word_vectors(const std::filesystem::path& path,
                              const Vocabulary& vocab, Tensor& table);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: "RFMR1\n", uint32 little-endian manifest length, JSON manifest
// {format_version, config, tensors: [{name, shape, byte_offset}], meta},
// then the float32 little-endian payload (offsets are payload-relative).

inline constexpr char kCheckpointMagic[] = "RFMR1\n";
inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ReFormerConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;
  // Free-form metadata (vocabularies, training stage).
  nlohmann::json meta = nlohmann::json::object();
};

std::string encode_checkpoint(const nn::ParamStore& params,
                              const ReFormerConfig& config,
                              const nlohmann::json& meta = {});
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path,
                     const nn::ParamStore& params, const ReFormerConfig& config,
                     const nlohmann::json& meta = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint tensors into matching parameters. Every parameter must be
// present with an identical shape.
void restore_parameters(nn::ParamStore& params, const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SynthOptions {
  std::uint64_t seed = 42;
  std::size_t n_images = 32;
  std::size_t n_object_classes = 6;
  // Foreground predicates; background is added at id 0.
  std::size_t n_predicates = 5;
  std::size_t min_regions = 3;
  std::size_t max_regions = 6;
  std::size_t d_visual = 64;
  double feature_noise = 0.1;
};

struct SynthDataset {
  std::vector<ImageRecord> records;
  NameVocab objects;
  NameVocab predicates;  // includes background at id 0
};

// Deterministic function of `options`. Region features are a per-class
// prototype plus Gaussian noise. The two largest regions always carry a
// relation, which the first caption describes; up to two more random
// foreground pairs are added. Predicates are a fixed function of the two
// labels and whether the subject sits above the object.
SynthDataset synth_generate(const SynthOptions& options);

// Predicate assigned by the generator to a labelled, oriented pair.
int synth_predicate(int subject_label, int object_label, bool subject_above,
                    std::size_t n_predicates);

}  // namespace reformer
