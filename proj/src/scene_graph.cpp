// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "reformer/scene_graph.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "reformer/errors.hpp"

namespace reformer {

bool BoundingBox::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
         std::isfinite(y2) && x1 >= 0.0 && y1 >= 0.0 && x1 < x2 && y1 < y2;
}

int SceneGraph::predicate(std::size_t subject, std::size_t object) const {
  for (const Triplet& t : triplets) {
    if (t.subject == subject && t.object == object) return t.predicate;
  }
  return kBackgroundPredicate;
}

NameVocab::NameVocab(std::vector<std::string> names)
    : names_(std::move(names)) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (!ids_.emplace(names_[i], static_cast<int>(i)).second) {
      throw DataError(fmt::format("duplicate vocabulary entry '{}'", names_[i]));
    }
  }
}

NameVocab NameVocab::predicates(const std::vector<std::string>& foreground) {
  std::vector<std::string> names;
  names.reserve(foreground.size() + 1);
  names.emplace_back(kBackgroundName);
  names.insert(names.end(), foreground.begin(), foreground.end());
  return NameVocab(std::move(names));
}

int NameVocab::id(const std::string& name) const {
  auto it = ids_.find(name);
  return it == ids_.end() ? -1 : it->second;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

std::array<double, 6> box_base_features(const BoundingBox& b, double img_w,
                                        double img_h) {
  if (!(img_w > 0.0) || !(img_h > 0.0)) {
    throw DataError(
        fmt::format("degenerate image dimensions {}x{}", img_w, img_h));
  }
  return {b.x1 / img_w,
          b.y1 / img_h,
          b.x2 / img_w,
          b.y2 / img_h,
          b.area() / (img_w * img_h),
          b.width() / b.height()};
}

std::array<double, kPairGeometryWidth> pair_geometry(const BoundingBox& subj,
                                                     const BoundingBox& obj,
                                                     double img_w,
                                                     double img_h) {
  const double dcx = 0.5 * ((obj.x1 + obj.x2) - (subj.x1 + subj.x2)) / img_w;
  const double dcy = 0.5 * ((obj.y1 + obj.y2) - (subj.y1 + subj.y2)) / img_h;
  return {dcx, dcy, std::log(obj.width() / subj.width()),
          std::log(obj.height() / subj.height()), iou(subj, obj)};
}

std::vector<std::pair<std::size_t, std::size_t>> enumerate_pairs(
    std::size_t n) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (n < 2) return out;
  out.reserve(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) out.emplace_back(i, j);
    }
  }
  return out;
}

ValidationReport validate_graph(const SceneGraph& g,
                                std::size_t num_object_classes,
                                std::size_t num_predicate_classes) {
  ValidationReport rep;
  auto add = [&rep](std::string kind, std::string detail) {
    rep.violations.push_back({std::move(kind), std::move(detail)});
  };
  if (g.boxes.size() != g.labels.size()) {
    add("count", fmt::format("{} boxes but {} labels", g.boxes.size(),
                             g.labels.size()));
  }
  for (std::size_t i = 0; i < g.boxes.size(); ++i) {
    if (!g.boxes[i].valid()) {
      const auto& b = g.boxes[i];
      add("box", fmt::format("box {} = ({}, {}, {}, {}) is degenerate", i,
                             b.x1, b.y1, b.x2, b.y2));
    }
  }
  for (std::size_t i = 0; i < g.labels.size(); ++i) {
    if (g.labels[i] < 0 ||
        static_cast<std::size_t>(g.labels[i]) >= num_object_classes) {
      add("label", fmt::format("label {} of region {} outside [0, {})",
                               g.labels[i], i, num_object_classes));
    }
  }
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (std::size_t t = 0; t < g.triplets.size(); ++t) {
    const Triplet& tr = g.triplets[t];
    if (tr.subject >= g.boxes.size() || tr.object >= g.boxes.size()) {
      add("index", fmt::format("triplet {} references region {}->{} of {}", t,
                               tr.subject, tr.object, g.boxes.size()));
    }
    if (tr.subject == tr.object) {
      add("self_loop",
          fmt::format("triplet {} relates region {} to itself", t, tr.subject));
    }
    if (tr.predicate <= kBackgroundPredicate ||
        static_cast<std::size_t>(tr.predicate) >= num_predicate_classes) {
      add("predicate",
          fmt::format("triplet {} predicate {} outside [1, {})", t,
                      tr.predicate, num_predicate_classes));
    }
    if (!seen.emplace(tr.subject, tr.object).second) {
      add("duplicate_pair", fmt::format("triplet {} repeats pair ({}, {})", t,
                                        tr.subject, tr.object));
    }
  }
  if (!g.boxes.empty() && (g.boxes.size() < 10 || g.boxes.size() > 50)) {
    rep.warnings.push_back(fmt::format(
        "{} regions is outside the typical 10..50 range", g.boxes.size()));
  }
  return rep;
}

ValidationReport validate_graph(const SceneGraph& g, const NameVocab& objects,
                                const NameVocab& predicates) {
  return validate_graph(g, objects.size(), predicates.size());
}

}  // namespace reformer
