// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace reformer {

// Pixel-space box; (x1, y1) top-left, (x2, y2) bottom-right.
struct BoundingBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const;

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// Reserved predicate id for ordered pairs without a relation.
inline constexpr int kBackgroundPredicate = 0;

struct Triplet {
  std::size_t subject = 0;
  int predicate = 0;
  std::size_t object = 0;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

// Boxes, their object labels, and the listed (foreground) relations. Any
// ordered pair not listed carries the background predicate.
struct SceneGraph {
  std::vector<BoundingBox> boxes;
  std::vector<int> labels;
  std::vector<Triplet> triplets;
  double image_width = 0.0;
  double image_height = 0.0;

  std::size_t size() const { return boxes.size(); }
  // Predicate for (subject, object), background when not listed.
  int predicate(std::size_t subject, std::size_t object) const;

  friend bool operator==(const SceneGraph&, const SceneGraph&) = default;
};

// A predicted relation between two regions of the evaluated region set.
// Labels are -1 when not predicted.
struct ScoredTriplet {
  std::size_t subject = 0;
  std::size_t object = 0;
  int predicate = 1;
  int subject_label = -1;
  int object_label = -1;
  BoundingBox subject_box;
  BoundingBox object_box;
  double score = 0.0;
};

// Bijective id <-> name table. For predicates, id 0 is the background class.
class NameVocab {
 public:
  NameVocab() = default;
  explicit NameVocab(std::vector<std::string> names);

  static NameVocab predicates(const std::vector<std::string>& foreground);

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t id) const { return names_.at(id); }
  // -1 when absent.
  int id(const std::string& name) const;
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> ids_;
};

inline constexpr const char* kBackgroundName = "__background__";

double iou(const BoundingBox& a, const BoundingBox& b);

// (x1/w, y1/h, x2/w, y2/h, area fraction, width/height aspect).
std::array<double, 6> box_base_features(const BoundingBox& b, double img_w,
                                        double img_h);

// Ordered-pair geometry: center offset normalized by image size, log width
// and height ratios, and IoU. Swapping the boxes negates the first four.
inline constexpr std::size_t kPairGeometryWidth = 5;
std::array<double, kPairGeometryWidth> pair_geometry(const BoundingBox& subj,
                                                     const BoundingBox& obj,
                                                     double img_w,
                                                     double img_h);

// All ordered (i, j), i != j, in lexicographic order.
std::vector<std::pair<std::size_t, std::size_t>> enumerate_pairs(
    std::size_t n);

struct Violation {
  std::string kind;
  std::string detail;
};

struct ValidationReport {
  std::vector<Violation> violations;
  // Non-fatal notes (e.g. region count outside the usual 10..50 range).
  std::vector<std::string> warnings;

  bool ok() const { return violations.empty(); }
};

ValidationReport validate_graph(const SceneGraph& g, const NameVocab& objects,
                                const NameVocab& predicates);
// Range checks against raw class counts instead of vocab tables.
ValidationReport validate_graph(const SceneGraph& g,
                                std::size_t num_object_classes,
                                std::size_t num_predicate_classes);

}  // namespace reformer
