// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "reformer/data_io.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "reformer/errors.hpp"

namespace reformer {

namespace {

const std::array<std::string, kNumSpecialTokens> kSpecials = {
    "<pad>", "<bos>", "<eos>", "<unk>"};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(fmt::format("short write to '{}'", path.string()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary()
    : Vocabulary(std::vector<std::string>(kSpecials.begin(), kSpecials.end())) {
}

Vocabulary::Vocabulary(std::vector<std::string> words)
    : words_(std::move(words)) {
  if (words_.size() < kNumSpecialTokens ||
      !std::equal(kSpecials.begin(), kSpecials.end(), words_.begin())) {
    throw DataError("vocabulary must begin with <pad> <bos> <eos> <unk>");
  }
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!ids_.emplace(words_[i], static_cast<int>(i)).second) {
      throw DataError(fmt::format("duplicate vocabulary word '{}'", words_[i]));
    }
  }
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw DataError(fmt::format("token id {} outside vocabulary of {}", id,
                                words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(const std::string& w) const {
  auto it = ids_.find(w);
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& w) const {
  return ids_.contains(w);
}

nlohmann::json Vocabulary::to_json() const {
  return nlohmann::json{{"words", words_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("words") || !j["words"].is_array()) {
    throw DataError("vocabulary JSON needs a \"words\" array");
  }
  return Vocabulary(j["words"].get<std::vector<std::string>>());
}

std::string normalize_text(const std::string& text) {
  std::string out(text.size(), ' ');
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    out[i] = std::isalnum(c) ? static_cast<char>(std::tolower(c)) : ' ';
  }
  return out;
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream ss(normalize_text(text));
  std::vector<std::string> words;
  for (std::string w; ss >> w;) words.push_back(std::move(w));
  return words;
}

Vocabulary build_vocab(const std::vector<std::string>& captions,
                       std::size_t min_count) {
  if (captions.empty()) throw DataError("build_vocab: empty caption corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& c : captions) {
    for (auto& w : split_words(c)) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [w, n] : counts) {
    if (n >= min_count && std::find(kSpecials.begin(), kSpecials.end(), w) ==
                              kSpecials.end()) {
      kept.emplace_back(w, n);
    }
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> words(kSpecials.begin(), kSpecials.end());
  for (auto& [w, n] : kept) words.push_back(w);
  return Vocabulary(std::move(words));
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id >= 0 && id < static_cast<int>(kNumSpecialTokens)) continue;
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records

SceneGraph ImageRecord::graph() const {
  SceneGraph g;
  g.image_width = width;
  g.image_height = height;
  for (const Region& r : regions) {
    g.boxes.push_back(r.box);
    g.labels.push_back(r.label_id);
  }
  g.triplets = triplets;
  return g;
}

Tensor ImageRecord::features() const {
  const std::size_t w = regions.empty() ? 0 : regions.front().feature.size();
  Tensor t(Shape{regions.size(), w});
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (regions[i].feature.size() != w) {
      throw DataError(fmt::format("image '{}': ragged region features",
                                  image_id));
    }
    std::copy(regions[i].feature.begin(), regions[i].feature.end(),
              t.ptr() + i * w);
  }
  return t;
}

RegionInput region_input(const ImageRecord& r, bool with_labels) {
  RegionInput in;
  in.features = r.features();
  in.image_width = r.width;
  in.image_height = r.height;
  std::vector<int> labels;
  for (const Region& reg : r.regions) {
    in.boxes.push_back(reg.box);
    labels.push_back(reg.label_id);
  }
  if (with_labels) in.labels = std::move(labels);
  return in;
}

nlohmann::json record_to_json(const ImageRecord& r) {
  nlohmann::json regions = nlohmann::json::array();
  for (const Region& reg : r.regions) {
    regions.push_back({{"box", {reg.box.x1, reg.box.y1, reg.box.x2, reg.box.y2}},
                       {"label_id", reg.label_id},
                       {"feature", reg.feature}});
  }
  nlohmann::json triplets = nlohmann::json::array();
  for (const Triplet& t : r.triplets) {
    triplets.push_back({t.subject, t.predicate, t.object});
  }
  return {{"image_id", r.image_id}, {"width", r.width},
          {"height", r.height},     {"regions", regions},
          {"captions", r.captions}, {"triplets", triplets}};
}

ImageRecord record_from_json(const nlohmann::json& j) {
  auto field = [&j](const char* name) -> const nlohmann::json& {
    if (!j.contains(name)) {
      throw DataError(fmt::format("missing field \"{}\"", name));
    }
    return j[name];
  };
  try {
    if (!j.is_object()) throw DataError("record is not a JSON object");
    ImageRecord r;
    r.image_id = field("image_id").get<std::string>();
    r.width = field("width").get<double>();
    r.height = field("height").get<double>();
    for (const auto& reg : field("regions")) {
      Region region;
      const auto box = reg.at("box").get<std::vector<double>>();
      if (box.size() != 4) throw DataError("box must have 4 coordinates");
      region.box = {box[0], box[1], box[2], box[3]};
      region.label_id = reg.at("label_id").get<int>();
      region.feature = reg.at("feature").get<std::vector<double>>();
      r.regions.push_back(std::move(region));
    }
    r.captions = field("captions").get<std::vector<std::string>>();
    for (const auto& t : field("triplets")) {
      if (!t.is_array() || t.size() != 3) {
        throw DataError("triplet must be [subject, predicate, object]");
      }
      const auto s = t[0].get<long long>();
      const auto o = t[2].get<long long>();
      if (s < 0 || o < 0) throw DataError("negative triplet index");
      r.triplets.push_back({static_cast<std::size_t>(s), t[1].get<int>(),
                            static_cast<std::size_t>(o)});
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("schema violation: {}", e.what()));
  }
}

namespace {

void check_record(const ImageRecord& r, const DatasetLimits& limits,
                  std::size_t& feature_width) {
  if (r.regions.empty()) throw DataError("record has no regions");
  if (!(r.width > 0.0) || !(r.height > 0.0)) {
    throw DataError(fmt::format("image size {}x{} is degenerate", r.width,
                                r.height));
  }
  for (const Region& reg : r.regions) {
    if (feature_width == 0) feature_width = reg.feature.size();
    if (reg.feature.size() != feature_width || feature_width == 0) {
      throw DataError(fmt::format("feature width {} differs from {}",
                                  reg.feature.size(), feature_width));
    }
  }
  const auto rep =
      validate_graph(r.graph(), limits.num_object_classes, limits.num_predicates);
  if (!rep.ok()) {
    throw DataError(fmt::format("{}: {}", rep.violations.front().kind,
                                rep.violations.front().detail));
  }
}

}  // namespace

std::vector<ImageRecord> parse_dataset(const std::string& text,
                                       const std::string& source,
                                       const DatasetLimits& limits) {
  std::vector<ImageRecord> out;
  std::istringstream in(text);
  std::size_t line_no = 0;
  std::size_t feature_width = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw DataError(fmt::format("malformed JSON: {}", e.what()));
      }
      ImageRecord r = record_from_json(j);
      check_record(r, limits, feature_width);
      out.push_back(std::move(r));
    } catch (const DataError& e) {
      throw DataError(fmt::format("{}:{}: {}", source, line_no, e.what()));
    }
  }
  return out;
}

std::vector<ImageRecord> load_dataset(const std::filesystem::path& path,
                                      const DatasetLimits& limits) {
  return parse_dataset(read_file(path), path.string(), limits);
}

std::string serialize_dataset(const std::vector<ImageRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

void save_dataset(const std::vector<ImageRecord>& records,
                  const std::filesystem::path& path) {
  write_file(path, serialize_dataset(records));
}

void save_vocab_file(const std::vector<std::string>& words,
                     const std::filesystem::path& path) {
  write_file(path, nlohmann::json{{"words", words}}.dump() + "\n");
}

std::vector<std::string> load_vocab_file(const std::filesystem::path& path) {
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    return j.at("words").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::size_t load_word_vectors(const std::filesystem::path& path,
                              const Vocabulary& vocab, Tensor& table) {
  if (table.rank() != 2 || table.rows() != vocab.size()) {
    throw ShapeError(fmt::format("word vectors: table {} for a vocabulary of {}",
                                 shape_str(table.shape()), vocab.size()));
  }
  std::istringstream in(read_file(path));
  const std::size_t d = table.cols();
  std::vector<bool> seen(vocab.size(), false);
  std::size_t count = 0;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    std::istringstream fields(line);
    std::string word;
    if (!(fields >> word)) continue;
    std::vector<double> values;
    for (std::string v; fields >> v;) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(v, &used));
        if (used != v.size()) throw std::invalid_argument(v);
      } catch (const std::exception&) {
        throw DataError(fmt::format("{}:{}: bad number '{}'", path.string(), line_no, v));
      }
    }
    if (values.size() != d) {
      throw DataError(fmt::format("{}:{}: vector width {}, embedding width {}",
                                  path.string(), line_no, values.size(), d));
    }
    if (!vocab.contains(word)) continue;
    const auto id = static_cast<std::size_t>(vocab.id(word));
    if (id < kNumSpecialTokens || seen[id]) continue;
    seen[id] = true;
    std::copy(values.begin(), values.end(), table.ptr() + id * d);
    ++count;
  }
  return count;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i]))
         << (8 * i);
  }
  return v;
}

}  // namespace

std::string encode_checkpoint(const nn::ParamStore& params,
                              const ReFormerConfig& config,
                              const nlohmann::json& meta) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string payload;
  for (const Parameter* p : params.all()) {
    tensors.push_back({{"name", p->name},
                       {"shape", p->value.shape()},
                       {"byte_offset", payload.size()}});
    for (double v : p->value.data()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      put_u32(payload, bits);
    }
  }
  nlohmann::json manifest = {{"format_version", kCheckpointFormatVersion},
                             {"config", config},
                             {"tensors", tensors},
                             {"meta", meta.is_null() ? nlohmann::json::object()
                                                     : meta}};
  const std::string m = manifest.dump();
  std::string out(kCheckpointMagic);
  put_u32(out, static_cast<std::uint32_t>(m.size()));
  out += m;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  const std::size_t magic_len = std::strlen(kCheckpointMagic);
  if (bytes.size() < magic_len + 4 ||
      bytes.compare(0, magic_len, kCheckpointMagic) != 0) {
    throw DataError("checkpoint: bad magic (not an RFMR1 file)");
  }
  const std::uint32_t mlen = get_u32(bytes, magic_len);
  const std::size_t payload_start = magic_len + 4 + mlen;
  if (payload_start > bytes.size()) {
    throw DataError("checkpoint: manifest length exceeds file size");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(magic_len + 4, mlen));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(fmt::format("checkpoint: corrupt manifest: {}", e.what()));
  }
  Checkpoint ck;
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw DataError("checkpoint: unsupported format_version");
    }
    apply_json(manifest.at("config"), ck.config);
    if (manifest.contains("meta")) ck.meta = manifest["meta"];
    const std::size_t payload_size = bytes.size() - payload_start;
    std::size_t expected = 0;
    for (const auto& t : manifest.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      const std::size_t off = t.at("byte_offset").get<std::size_t>();
      const std::size_t n = numel(shape);
      if (off != expected || off + 4 * n > payload_size) {
        throw DataError(fmt::format(
            "checkpoint: payload truncated or misaligned at tensor '{}'",
            t.at("name").get<std::string>()));
      }
      Tensor value(shape);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t bits = get_u32(bytes, payload_start + off + 4 * i);
        float f;
        std::memcpy(&f, &bits, sizeof f);
        value[i] = static_cast<double>(f);
      }
      expected = off + 4 * n;
      ck.tensors.emplace_back(t.at("name").get<std::string>(), std::move(value));
    }
    if (expected != payload_size) {
      throw DataError(fmt::format(
          "checkpoint: manifest describes {} payload bytes, file has {}",
          expected, payload_size));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("checkpoint: bad manifest: {}", e.what()));
  } catch (const ConfigError& e) {
    throw DataError(fmt::format("checkpoint: bad config: {}", e.what()));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path,
                     const nn::ParamStore& params, const ReFormerConfig& config,
                     const nlohmann::json& meta) {
  write_file(path, encode_checkpoint(params, config, meta));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const DataError& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

void restore_parameters(nn::ParamStore& params, const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name.emplace(name, &t);
  if (by_name.size() != params.all().size()) {
    throw DataError(fmt::format(
        "checkpoint holds {} tensors but the model has {} parameters",
        by_name.size(), params.all().size()));
  }
  for (Parameter* p : params.all()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      throw DataError(fmt::format("checkpoint lacks parameter '{}'", p->name));
    }
    if (it->second->shape() != p->value.shape()) {
      throw DataError(fmt::format("checkpoint tensor '{}' has shape {}, model expects {}",
                                  p->name, shape_str(it->second->shape()),
                                  shape_str(p->value.shape())));
    }
  }
  for (Parameter* p : params.all()) {
    p->value = *by_name.at(p->name);
    p->zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

const std::vector<std::string> kObjectNames = {
    "man",   "dog",   "table", "car",  "tree",  "horse", "shirt", "racket",
    "bike",  "glass", "plate", "boat", "bird",  "chair", "woman", "cat",
    "lamp",  "book",  "cup",   "kite", "train", "bench", "clock", "phone"};

const std::vector<std::string> kPredicateNames = {
    "on",     "near",    "holding", "under",  "behind", "riding",
    "wearing", "above",  "beside",  "has",    "with",   "watching",
    "carrying", "against", "along", "inside"};

std::string pick_name(const std::vector<std::string>& list, std::size_t i,
                      const char* fallback) {
  return i < list.size() ? list[i] : fmt::format("{}{}", fallback, i);
}

}  // namespace

int synth_predicate(int subject_label, int object_label, bool subject_above,
                    std::size_t n_predicates) {
  const auto s = static_cast<std::size_t>(subject_label);
  const auto o = static_cast<std::size_t>(object_label);
  const std::size_t key = 3 * s + 5 * o + (subject_above ? 2 : 0);
  return 1 + static_cast<int>(key % n_predicates);
}

SynthDataset synth_generate(const SynthOptions& opt) {
  if (opt.n_predicates < 1) {
    throw ConfigError("synth: need at least one foreground predicate");
  }
  if (opt.n_object_classes < 1) throw ConfigError("synth: need object classes");
  if (opt.min_regions < 2 || opt.min_regions > opt.max_regions) {
    throw ConfigError(fmt::format(
        "synth: impossible region range [{}, {}] (minimum is 2)",
        opt.min_regions, opt.max_regions));
  }
  if (opt.d_visual == 0) throw ConfigError("synth: d_visual must be positive");

  SynthDataset ds;
  std::vector<std::string> objects;
  for (std::size_t i = 0; i < opt.n_object_classes; ++i) {
    objects.push_back(pick_name(kObjectNames, i, "object"));
  }
  std::vector<std::string> predicates;
  for (std::size_t i = 0; i < opt.n_predicates; ++i) {
    predicates.push_back(pick_name(kPredicateNames, i, "rel"));
  }
  ds.objects = NameVocab(objects);
  ds.predicates = NameVocab::predicates(predicates);

  std::mt19937_64 proto_rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<double>> prototypes(opt.n_object_classes);
  for (auto& p : prototypes) {
    p.resize(opt.d_visual);
    for (double& v : p) v = unit(proto_rng);
  }

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> noise(0.0, opt.feature_noise);
  std::uniform_int_distribution<std::size_t> n_regions(opt.min_regions,
                                                       opt.max_regions);
  std::uniform_int_distribution<int> label_dist(
      0, static_cast<int>(opt.n_object_classes) - 1);
  std::uniform_real_distribution<double> unit_u(0.0, 1.0);

  for (std::size_t img = 0; img < opt.n_images; ++img) {
    ImageRecord r;
    r.image_id = fmt::format("synth-{:06d}", img);
    r.width = std::round(320.0 + 320.0 * unit_u(rng));
    r.height = std::round(240.0 + 240.0 * unit_u(rng));
    const std::size_t n = n_regions(rng);
    for (std::size_t i = 0; i < n; ++i) {
      Region reg;
      const double bw = r.width * (0.1 + 0.5 * unit_u(rng));
      const double bh = r.height * (0.1 + 0.5 * unit_u(rng));
      const double x1 = (r.width - bw) * unit_u(rng);
      const double y1 = (r.height - bh) * unit_u(rng);
      reg.box = {x1, y1, x1 + bw, y1 + bh};
      reg.label_id = label_dist(rng);
      reg.feature = prototypes[static_cast<std::size_t>(reg.label_id)];
      for (double& v : reg.feature) v += noise(rng);
      r.regions.push_back(std::move(reg));
    }

    auto oriented_predicate = [&](std::size_t s, std::size_t o) {
      const auto& bs = r.regions[s].box;
      const auto& bo = r.regions[o].box;
      const bool above = (bs.y1 + bs.y2) < (bo.y1 + bo.y2);
      return synth_predicate(r.regions[s].label_id, r.regions[o].label_id,
                             above, opt.n_predicates);
    };

    // The two largest regions form the salient relation.
    std::vector<std::size_t> by_area(n);
    for (std::size_t i = 0; i < n; ++i) by_area[i] = i;
    std::stable_sort(by_area.begin(), by_area.end(),
                     [&r](std::size_t a, std::size_t b) {
                       return r.regions[a].box.area() > r.regions[b].box.area();
                     });
    const std::size_t subj = by_area[0];
    const std::size_t obj = by_area[1];
    r.triplets.push_back({subj, oriented_predicate(subj, obj), obj});

    auto pairs = enumerate_pairs(n);
    std::shuffle(pairs.begin(), pairs.end(), rng);
    const std::size_t extra =
        std::uniform_int_distribution<std::size_t>(0, 2)(rng);
    std::size_t added = 0;
    for (const auto& [s, o] : pairs) {
      if (added == extra) break;
      if ((s == subj && o == obj) || (s == obj && o == subj)) continue;
      r.triplets.push_back({s, oriented_predicate(s, o), o});
      ++added;
    }

    const std::string& sn = objects[static_cast<std::size_t>(r.regions[subj].label_id)];
    const std::string& on = objects[static_cast<std::size_t>(r.regions[obj].label_id)];
    const std::string& pn =
        ds.predicates.name(static_cast<std::size_t>(r.triplets.front().predicate));
    r.captions.push_back(fmt::format("a {} {} a {}", sn, pn, on));
    r.captions.push_back(fmt::format("the {} {} the {}", sn, pn, on));
    ds.records.push_back(std::move(r));
  }
  return ds;
}

}  // namespace reformer
