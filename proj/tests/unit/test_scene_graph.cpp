// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <doctest.h>

#include "reformer/errors.hpp"
#include "reformer/scene_graph.hpp"

using namespace reformer;

namespace {

BoundingBox random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 100.0);
  const double x1 = u(rng), y1 = u(rng);
  return {x1, y1, x1 + 1.0 + u(rng), y1 + 1.0 + u(rng)};
}

bool has_kind(const ValidationReport& r, const std::string& kind) {
  return std::any_of(r.violations.begin(), r.violations.end(),
                     [&](const Violation& v) { return v.kind == kind; });
}

SceneGraph small_graph(std::size_t n) {
  SceneGraph g;
  g.image_width = 200;
  g.image_height = 100;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = 10.0 * static_cast<double>(i);
    g.boxes.push_back({x, 5.0, x + 8.0, 20.0});
    g.labels.push_back(static_cast<int>(i % 3));
  }
  return g;
}

}  // namespace

TEST_SUITE("scene_graph") {
  TEST_CASE("iou fixtures") {
    const BoundingBox a{0, 0, 2, 2};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
    CHECK(iou(a, {2, 0, 4, 2}) == 0.0);
    CHECK(iou(a, {5, 5, 6, 6}) == 0.0);
    CHECK(iou(a, {0, 0, 1, 1}) == doctest::Approx(0.25));
  }

  TEST_CASE("iou is symmetric and bounded") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 500; ++i) {
      const BoundingBox a = random_box(rng), b = random_box(rng);
      const double v = iou(a, b);
      CHECK(v == iou(b, a));
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }

  TEST_CASE("box base features") {
    const auto f = box_base_features({0, 0, 640, 480}, 640, 480);
    CHECK(f[0] == 0.0);
    CHECK(f[1] == 0.0);
    CHECK(f[2] == 1.0);
    CHECK(f[3] == 1.0);
    CHECK(f[4] == 1.0);
    CHECK(f[5] == doctest::Approx(640.0 / 480.0));
    const auto g = box_base_features({10, 20, 30, 60}, 100, 200);
    CHECK(g[0] == doctest::Approx(0.1));
    CHECK(g[1] == doctest::Approx(0.1));
    CHECK(g[2] == doctest::Approx(0.3));
    CHECK(g[3] == doctest::Approx(0.3));
    CHECK(g[4] == doctest::Approx(800.0 / 20000.0));
    CHECK(g[5] == doctest::Approx(0.5));
    CHECK_THROWS_AS(box_base_features({0, 0, 1, 1}, 0, 10), DataError);
    CHECK_THROWS_AS(box_base_features({0, 0, 1, 1}, 10, -1), DataError);
  }

  TEST_CASE("box features are invariant to uniform rescaling") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 100; ++i) {
      const BoundingBox b = random_box(rng);
      const double s = 0.5 + static_cast<double>(i) * 0.1;
      const auto f = box_base_features(b, 300, 250);
      const auto g = box_base_features({b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s}, 300 * s, 250 * s);
      for (std::size_t k = 0; k < 6; ++k) CHECK(g[k] == doctest::Approx(f[k]).epsilon(1e-12));
    }
  }

  TEST_CASE("pair geometry negates under swap") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 200; ++i) {
      const BoundingBox a = random_box(rng), b = random_box(rng);
      const auto ab = pair_geometry(a, b, 320, 240);
      const auto ba = pair_geometry(b, a, 320, 240);
      for (std::size_t k = 0; k < 4; ++k) CHECK(ab[k] == doctest::Approx(-ba[k]).epsilon(1e-12));
      CHECK(ab[4] == ba[4]);
    }
    const auto self = pair_geometry({1, 2, 5, 9}, {1, 2, 5, 9}, 10, 10);
    for (std::size_t k = 0; k < 4; ++k) CHECK(self[k] == 0.0);
    CHECK(self[4] == 1.0);
    const auto g = pair_geometry({0, 0, 2, 2}, {4, 0, 8, 1}, 10, 20);
    CHECK(g[0] == doctest::Approx(0.5));
    CHECK(g[1] == doctest::Approx(-0.025));
    CHECK(g[2] == doctest::Approx(std::log(2.0)));
    CHECK(g[3] == doctest::Approx(std::log(0.5)));
    CHECK(g[4] == 0.0);
  }

  TEST_CASE("enumerate pairs") {
    CHECK(enumerate_pairs(0).empty());
    CHECK(enumerate_pairs(1).empty());
    const auto p3 = enumerate_pairs(3);
    const std::vector<std::pair<std::size_t, std::size_t>> want{
        {0, 1}, {0, 2}, {1, 0}, {1, 2}, {2, 0}, {2, 1}};
    CHECK(p3 == want);
    for (std::size_t n = 2; n < 12; ++n) {
      const auto p = enumerate_pairs(n);
      CHECK(p.size() == n * (n - 1));
      CHECK(std::set(p.begin(), p.end()).size() == p.size());
      CHECK(std::is_sorted(p.begin(), p.end()));
    }
  }

  TEST_CASE("predicate lookup defaults to background") {
    SceneGraph g = small_graph(3);
    g.triplets = {{0, 2, 1}, {2, 1, 0}};
    CHECK(g.predicate(0, 1) == 2);
    CHECK(g.predicate(1, 0) == kBackgroundPredicate);
    CHECK(g.predicate(2, 0) == 1);
  }

  TEST_CASE("valid graph passes") {
    SceneGraph g = small_graph(12);
    g.triplets = {{0, 1, 1}, {1, 3, 0}, {4, 2, 11}};
    const ValidationReport r = validate_graph(g, 3, 4);
    CHECK(r.ok());
    CHECK(r.warnings.empty());
  }

  TEST_CASE("each violation kind is reported") {
    const SceneGraph base = small_graph(12);
    struct Case {
      const char* kind;
      void (*mutate)(SceneGraph&);
    };
    const Case cases[] = {
        {"count", [](SceneGraph& g) { g.labels.pop_back(); }},
        {"box", [](SceneGraph& g) { g.boxes[2].x2 = g.boxes[2].x1; }},
        {"box", [](SceneGraph& g) { g.boxes[0].y1 = -1.0; }},
        {"box", [](SceneGraph& g) { g.boxes[1].x2 = std::nan(""); }},
        {"label", [](SceneGraph& g) { g.labels[0] = 3; }},
        {"label", [](SceneGraph& g) { g.labels[0] = -1; }},
        {"index", [](SceneGraph& g) { g.triplets.push_back({0, 1, 12}); }},
        {"self_loop", [](SceneGraph& g) { g.triplets.push_back({4, 1, 4}); }},
        {"predicate", [](SceneGraph& g) { g.triplets.push_back({0, 0, 1}); }},
        {"predicate", [](SceneGraph& g) { g.triplets.push_back({0, 4, 1}); }},
        {"duplicate_pair",
         [](SceneGraph& g) { g.triplets = {{0, 1, 1}, {0, 2, 1}}; }},
    };
    for (const Case& c : cases) {
      SceneGraph g = base;
      c.mutate(g);
      const ValidationReport r = validate_graph(g, 3, 4);
      CAPTURE(c.kind);
      CHECK_FALSE(r.ok());
      CHECK(has_kind(r, c.kind));
    }
  }

  TEST_CASE("validation is invariant to region relabeling") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      SceneGraph g = small_graph(12);
      g.triplets = {{0, 1, 1}, {1, 3, 0}, {4, 2, 11}, {5, 1, 5}, {0, 2, 1}};
      if (trial % 2 == 0) g.labels[3] = 7;
      std::vector<std::size_t> perm(12);
      for (std::size_t i = 0; i < 12; ++i) perm[i] = i;
      std::shuffle(perm.begin(), perm.end(), rng);
      SceneGraph h = g;
      for (std::size_t i = 0; i < 12; ++i) {
        h.boxes[perm[i]] = g.boxes[i];
        h.labels[perm[i]] = g.labels[i];
      }
      for (Triplet& t : h.triplets) {
        t.subject = perm[t.subject];
        t.object = perm[t.object];
      }
      const ValidationReport a = validate_graph(g, 3, 4);
      const ValidationReport b = validate_graph(h, 3, 4);
      CHECK(a.ok() == b.ok());
      std::multiset<std::string> ka, kb;
      for (const auto& v : a.violations) ka.insert(v.kind);
      for (const auto& v : b.violations) kb.insert(v.kind);
      CHECK(ka == kb);
    }
  }

  TEST_CASE("region count outside the usual range warns") {
    CHECK(validate_graph(small_graph(3), 3, 4).warnings.size() == 1);
    CHECK(validate_graph(small_graph(3), 3, 4).ok());
    CHECK(validate_graph(small_graph(51), 3, 4).warnings.size() == 1);
    CHECK(validate_graph(small_graph(10), 3, 4).warnings.empty());
    CHECK(validate_graph(small_graph(0), 3, 4).warnings.empty());
  }

  TEST_CASE("name vocab") {
    const NameVocab objects({"cat", "dog"});
    CHECK(objects.size() == 2);
    CHECK(objects.id("dog") == 1);
    CHECK(objects.id("cow") == -1);
    CHECK(objects.name(0) == "cat");
    const NameVocab preds = NameVocab::predicates({"on", "near"});
    CHECK(preds.size() == 3);
    CHECK(preds.id(kBackgroundName) == kBackgroundPredicate);
    CHECK(preds.name(2) == "near");
    CHECK_THROWS_AS(NameVocab({"a", "a"}), DataError);
    SceneGraph g = small_graph(2);
    g.labels = {0, 1};
    g.triplets = {{0, 2, 1}};
    CHECK(validate_graph(g, objects, preds).ok());
    g.triplets = {{0, 3, 1}};
    CHECK(has_kind(validate_graph(g, objects, preds), "predicate"));
  }
}
