// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "reformer/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "reformer/config.hpp"
#include "reformer/data_io.hpp"
#include "reformer/errors.hpp"
#include "reformer/gradcheck_suite.hpp"
#include "reformer/metrics.hpp"
#include "reformer/model.hpp"
#include "reformer/training.hpp"

namespace reformer {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct Flags {
  std::uint64_t seed = 42;
  std::string data;
  std::string config;
  std::string out;
  std::string init;
  std::string ckpt;
  std::string vocab;
  std::string names;
  std::string word_vectors;
  std::string log;
  std::string captions;
  std::string record;
  std::string proposals;
  std::string mode = "predcls";
  std::vector<std::size_t> ks{20, 50, 100};

  std::size_t images = 32;
  std::size_t objects = 6;
  std::size_t predicates = 5;
  std::size_t min_regions = 3;
  std::size_t max_regions = 6;
  std::size_t d_visual = 64;
  std::size_t min_count = 5;

  std::size_t epochs = 1;
  std::size_t iterations = 0;
  std::size_t batch_size = 8;
  std::size_t warmup = 10000;
  double lr_factor = 1.0;
  double lr = kScstLearningRate;
  double lambda = 0.1;
  bool freeze_encoder = false;
  bool no_relation_loss = false;

  std::size_t beam = 0;  // 0 uses the config value
  std::size_t top_k = 20;
  bool predict_labels = false;

  std::size_t configurations = 20;
};

// Object and predicate names; empty when unknown.
struct Names {
  std::vector<std::string> objects;
  std::vector<std::string> predicates;
};

json read_json_file(const std::string& path, const char* flag) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("{} {}: cannot open", flag, path));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(fmt::format("{} {}: {}", flag, path, e.what()));
  }
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("{}: cannot open for writing", path));
  out << j.dump(2) << '\n';
}

Names load_names(const std::string& path) {
  Names n;
  if (path.empty()) return n;
  const json j = read_json_file(path, "--names");
  try {
    n.objects = j.at("objects").get<std::vector<std::string>>();
    n.predicates = j.at("predicates").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(fmt::format("--names {}: {}", path, e.what()));
  }
  return n;
}

std::vector<ImageRecord> load_records(const std::string& path, const char* flag) {
  if (path.empty()) throw ConfigError(fmt::format("{} is required", flag));
  if (!fs::exists(path)) throw DataError(fmt::format("{} {}: no such file", flag, path));
  std::vector<ImageRecord> records = load_dataset(path);
  if (records.empty()) throw DataError(fmt::format("{} {}: no records", flag, path));
  return records;
}

std::vector<std::string> all_captions(const std::vector<ImageRecord>& records) {
  std::vector<std::string> caps;
  for (const auto& r : records) caps.insert(caps.end(), r.captions.begin(), r.captions.end());
  return caps;
}

// Sizes that the data determines. A config file or flag may still override
// them.
void infer_from_data(ReFormerConfig& c, const std::vector<ImageRecord>& records,
                     const Vocabulary& vocab, const Names& names) {
  c.d_visual = records.front().regions.front().feature.size();
  c.vocab_size = vocab.size();
  int max_label = 0;
  int max_pred = 0;
  for (const auto& r : records) {
    for (const auto& reg : r.regions) max_label = std::max(max_label, reg.label_id);
    for (const auto& t : r.triplets) max_pred = std::max(max_pred, t.predicate);
  }
  c.num_object_classes =
      names.objects.empty() ? static_cast<std::size_t>(max_label) + 1 : names.objects.size();
  c.num_predicates = names.predicates.empty()
                         ? std::max<std::size_t>(2, static_cast<std::size_t>(max_pred) + 1)
                         : names.predicates.size();
}

ReFormerConfig resolve_config(ReFormerConfig base, const std::string& file,
                              const json& overrides, std::ostream& err) {
  if (!file.empty()) {
    const json j = read_json_file(file, "--config");
    try {
      apply_json(j, base);
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("--config {}: {}", file, e.what()));
    }
  }
  apply_json(overrides, base);
  base.validate();
  err << "config: " << json(base).dump() << '\n';
  return base;
}

json make_meta(const Vocabulary& vocab, const Names& names, int stage) {
  json meta = json::object();
  meta["stage"] = stage;
  meta["vocab"] = vocab.words();
  if (!names.objects.empty()) meta["objects"] = names.objects;
  if (!names.predicates.empty()) meta["predicates"] = names.predicates;
  return meta;
}

struct LoadedModel {
  std::unique_ptr<ReFormer> model;
  Vocabulary vocab;
  Names names;
};

LoadedModel load_model(const std::string& path, const char* flag,
                       const std::string& config_file, const json& overrides,
                       std::uint64_t seed, std::ostream& err) {
  if (path.empty()) throw ConfigError(fmt::format("{} is required", flag));
  const Checkpoint ckpt = load_checkpoint(path);
  LoadedModel lm;
  try {
    lm.vocab = Vocabulary(ckpt.meta.at("vocab").get<std::vector<std::string>>());
    if (ckpt.meta.contains("objects")) {
      lm.names.objects = ckpt.meta.at("objects").get<std::vector<std::string>>();
    }
    if (ckpt.meta.contains("predicates")) {
      lm.names.predicates = ckpt.meta.at("predicates").get<std::vector<std::string>>();
    }
  } catch (const json::exception& e) {
    throw DataError(fmt::format("{} {}: bad metadata: {}", flag, path, e.what()));
  }
  const ReFormerConfig cfg = resolve_config(ckpt.config, config_file, overrides, err);
  lm.model = std::make_unique<ReFormer>(cfg, seed);
  try {
    restore_parameters(lm.model->params(), ckpt);
  } catch (const DataError& e) {
    throw DataError(fmt::format("{} {}: {}", flag, path, e.what()));
  }
  lm.model->set_trained_stage(ckpt.meta.value("stage", 0));
  return lm;
}

json config_overrides(const Flags& f, const CLI::App& sub) {
  json o = json::object();
  const CLI::Option* lambda = sub.get_option_no_throw("--lambda");
  if (lambda != nullptr && lambda->count() > 0) o["lambda"] = f.lambda;
  if (f.freeze_encoder) o["freeze_encoder_in_caption"] = true;
  if (f.no_relation_loss) o["use_relation_loss"] = false;
  return o;
}

class LogFile {
 public:
  explicit LogFile(const Flags& f)
      : path_(f.log.empty() ? f.out + ".log.jsonl" : f.log), out_(path_, std::ios::binary) {
    if (!out_) throw DataError(fmt::format("--log {}: cannot open for writing", path_));
  }
  std::ostream* stream() { return &out_; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

StageOptions stage_options(const Flags& f, std::ostream* log, std::ostream& err) {
  StageOptions so;
  so.epochs = f.epochs;
  so.max_steps = f.iterations;
  so.batch_size = f.batch_size;
  so.warmup = f.warmup;
  so.lr_factor = f.lr_factor;
  so.seed = f.seed;
  so.log = log;
  so.after_epoch = [&err](std::size_t epoch) {
    err << "epoch " << epoch << " done\n";
    return true;
  };
  return so;
}

json stage_summary(const StageResult& r, const std::string& out, const std::string& log,
                   int stage) {
  json j;
  j["checkpoint"] = out;
  j["log"] = log;
  j["stage"] = stage;
  j["steps"] = r.steps.size();
  j["epoch_loss"] = r.epoch_loss;
  return j;
}

void require_out(const Flags& f) {
  if (f.out.empty()) throw ConfigError("--out is required");
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_synth(const Flags& f, std::ostream& out) {
  require_out(f);
  SynthOptions o;
  o.seed = f.seed;
  o.n_images = f.images;
  o.n_object_classes = f.objects;
  o.n_predicates = f.predicates;
  o.min_regions = f.min_regions;
  o.max_regions = f.max_regions;
  o.d_visual = f.d_visual;
  const SynthDataset ds = synth_generate(o);
  save_dataset(ds.records, f.out);
  const std::string names_path = f.out + ".names.json";
  write_json_file(names_path, json{{"objects", ds.objects.names()},
                                   {"predicates", ds.predicates.names()}});
  out << json{{"images", ds.records.size()}, {"out", f.out}, {"names", names_path}}.dump()
      << '\n';
  return kExitOk;
}

int cmd_vocab(const Flags& f, std::ostream& out) {
  require_out(f);
  std::ifstream in(f.captions);
  if (!in) throw DataError(fmt::format("--captions {}: cannot open", f.captions));
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  std::vector<std::string> captions;
  if (first != std::string::npos && text[first] == '{') {
    captions = all_captions(parse_dataset(text, f.captions));
  } else {
    std::istringstream lines(text);
    for (std::string line; std::getline(lines, line);) {
      if (!split_words(line).empty()) captions.push_back(line);
    }
  }
  const Vocabulary v = build_vocab(captions, f.min_count);
  save_vocab_file(v.words(), f.out);
  out << json{{"size", v.size()}, {"out", f.out}}.dump() << '\n';
  return kExitOk;
}

// Builds a fresh model from data for runs without --init.
LoadedModel fresh_model(const Flags& f, const std::vector<ImageRecord>& records,
                        const json& overrides, std::ostream& err) {
  LoadedModel lm;
  lm.names = load_names(f.names);
  lm.vocab = f.vocab.empty()
                 ? build_vocab(all_captions(records), f.min_count)
                 : Vocabulary(load_vocab_file(f.vocab));
  ReFormerConfig cfg;
  infer_from_data(cfg, records, lm.vocab, lm.names);
  cfg = resolve_config(cfg, f.config, overrides, err);
  lm.model = std::make_unique<ReFormer>(cfg, f.seed);
  if (!f.word_vectors.empty()) {
    const std::size_t n = load_word_vectors(
        f.word_vectors, lm.vocab, lm.model->params().get("decoder.word.weight").value);
    err << fmt::format("word vectors: {} of {} words initialized\n", n, lm.vocab.size());
  }
  return lm;
}

int cmd_train(const Flags& f, const CLI::App& sub, int stage, std::ostream& out,
              std::ostream& err) {
  require_out(f);
  const std::vector<ImageRecord> records = load_records(f.data, "--data");
  const json overrides = config_overrides(f, sub);
  LoadedModel lm;
  if (stage == 1 || (stage == 2 && f.init.empty())) {
    lm = fresh_model(f, records, overrides, err);
  } else {
    lm = load_model(f.init, "--init", f.config, overrides, f.seed, err);
  }
  ReFormer& model = *lm.model;
  const TrainingData data = prepare_training_data(records, lm.vocab, model.config());
  LogFile log(f);
  StageOptions so = stage_options(f, log.stream(), err);
  StageResult result;
  if (stage == 1) {
    result = run_step1_sgg(model, data, so);
  } else if (stage == 2) {
    so.cold_start = f.init.empty() && f.no_relation_loss;
    if (f.init.empty() && !f.no_relation_loss) {
      throw ConfigError("train-caption needs --init from train-sgg "
                        "(only --no-relation-loss may start from scratch)");
    }
    result = run_step2_caption(model, data, so);
  } else {
    so.fixed_lr = f.lr;
    result = run_step3_scst(model, data, so);
  }
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
    err << fmt::format("epoch {} mean loss {:.6f}\n", e + 1, result.epoch_loss[e]);
  }
  save_checkpoint(f.out, model.params(), model.config(),
                  make_meta(lm.vocab, lm.names, model.trained_stage()));
  out << stage_summary(result, f.out, log.path(), model.trained_stage()).dump() << '\n';
  return kExitOk;
}

DecodeOptions decode_options(const Flags& f, const ReFormerConfig& cfg) {
  DecodeOptions d;
  d.beam_size = f.beam > 0 ? f.beam : cfg.beam_size;
  d.mode = d.beam_size > 1 ? DecodeMode::kBeam : DecodeMode::kGreedy;
  return d;
}

int cmd_eval_caption(const Flags& f, const CLI::App& sub, std::ostream& out,
                     std::ostream& err) {
  const std::vector<ImageRecord> records = load_records(f.data, "--data");
  LoadedModel lm =
      load_model(f.ckpt, "--ckpt", f.config, config_overrides(f, sub), f.seed, err);
  const CaptionScores s = evaluate_captions(*lm.model, records, lm.vocab,
                                            decode_options(f, lm.model->config()));
  if (s.degenerate) err << "warning: CIDEr-D document frequencies are degenerate\n";
  out << to_json(s).dump() << '\n';
  return kExitOk;
}

int cmd_eval_sgg(const Flags& f, const CLI::App& sub, std::ostream& out, std::ostream& err) {
  const SggMode mode = parse_mode(f.mode);
  if (mode == SggMode::kSgDet && f.proposals.empty()) {
    throw DataError(
        "--mode sgdet needs detector regions via --proposals <jsonl>; "
        "ground-truth boxes are not used in this mode");
  }
  if (f.ks.empty() || std::find(f.ks.begin(), f.ks.end(), 0u) != f.ks.end()) {
    throw ConfigError("--k values must be positive");
  }
  const std::vector<ImageRecord> records = load_records(f.data, "--data");
  std::vector<ImageRecord> proposals;
  if (!f.proposals.empty()) proposals = load_records(f.proposals, "--proposals");
  LoadedModel lm =
      load_model(f.ckpt, "--ckpt", f.config, config_overrides(f, sub), f.seed, err);
  const SggReport r = evaluate_sgg(*lm.model, records, mode, f.ks,
                                   mode == SggMode::kSgDet ? &proposals : nullptr);
  out << to_json(r).dump() << '\n';
  return kExitOk;
}

std::string name_or_id(const std::vector<std::string>& names, int id) {
  if (id >= 0 && static_cast<std::size_t>(id) < names.size()) return names[id];
  return std::to_string(id);
}

int cmd_infer(const Flags& f, const CLI::App& sub, std::ostream& out, std::ostream& err) {
  if (f.record.empty()) throw ConfigError("--record is required");
  if (f.top_k == 0) throw ConfigError("--top-k must be positive");
  const auto first = f.record.find_first_not_of(" \t");
  const std::vector<ImageRecord> records =
      first != std::string::npos && f.record[first] == '{'
          ? parse_dataset(f.record, "--record")
          : load_records(f.record, "--record");
  LoadedModel lm =
      load_model(f.ckpt, "--ckpt", f.config, config_overrides(f, sub), f.seed, err);
  const ReFormer& model = *lm.model;
  const DecodeOptions decode = decode_options(f, model.config());
  for (const ImageRecord& r : records) {
    Tape tape;
    tape.set_grad_enabled(false);
    const RegionInput in = region_input(r, !f.predict_labels);
    const EncoderOutput enc = model.encode(tape, in);
    const GeneratedCaption cap = model.generate_caption(tape, enc, decode);
    const SceneGraphPrediction sg = model.generate_scene_graph(tape, enc, in.labels, f.top_k);
    json triplets = json::array();
    for (const ScoredTriplet& t : sg.triplets) {
      triplets.push_back({{"subject", t.subject},
                          {"object", t.object},
                          {"subject_label", name_or_id(lm.names.objects, t.subject_label)},
                          {"object_label", name_or_id(lm.names.objects, t.object_label)},
                          {"predicate", name_or_id(lm.names.predicates, t.predicate)},
                          {"score", t.score}});
    }
    out << json{{"image_id", r.image_id},
                {"caption", detokenize(cap.tokens, lm.vocab)},
                {"triplets", triplets}}
               .dump()
        << '\n';
  }
  return kExitOk;
}

int cmd_gradcheck(const Flags& f, std::ostream& out, std::ostream& err) {
  GradCheckSuiteOptions o;
  o.seed = f.seed;
  o.configurations = f.configurations;
  const std::vector<GradCheckCase> cases = run_gradcheck_suite(o);
  std::size_t failed = 0;
  const GradCheckCase* worst = nullptr;
  for (const auto& c : cases) {
    if (!c.passed) {
      ++failed;
      err << fmt::format("FAIL {} {} analytic {:.9e} numeric {:.9e} rel-err {:.3e}\n",
                         c.name, c.worst, c.analytic, c.numeric, c.max_rel_error);
    }
    if (worst == nullptr || c.max_rel_error > worst->max_rel_error) worst = &c;
  }
  json j{{"cases", cases.size()}, {"failed", failed}, {"tolerance", o.tolerance}};
  if (worst != nullptr) {
    j["max_rel_error"] = worst->max_rel_error;
    j["worst_case"] = worst->name;
    j["worst_parameter"] = worst->worst;
  }
  out << j.dump() << '\n';
  return failed == 0 ? kExitOk : kExitNumerical;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Flags f;
  CLI::App app{"Relational transformer for captioning and scene graphs", "reformer"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--seed", f.seed, "Seed for every random choice")->capture_default_str();

  auto add_training = [&f](CLI::App* s) {
    s->add_option("--data", f.data, "Training records (JSONL)")->required();
    s->add_option("--config", f.config, "JSON config overlay");
    s->add_option("--out", f.out, "Output checkpoint")->required();
    s->add_option("--epochs", f.epochs)->capture_default_str();
    s->add_option("--iterations", f.iterations, "Stop after this many steps (0: off)")
        ->capture_default_str();
    s->add_option("--batch-size", f.batch_size)->capture_default_str();
    s->add_option("--warmup", f.warmup)->capture_default_str();
    s->add_option("--lr-factor", f.lr_factor)->capture_default_str();
    s->add_option("--log", f.log, "Step log (default <out>.log.jsonl)");
    s->add_option("--lambda", f.lambda, "Relation loss weight")->capture_default_str();
  };
  auto add_fresh = [&f](CLI::App* s) {
    s->add_option("--vocab", f.vocab, "Vocabulary JSON (default: built from --data)");
    s->add_option("--min-count", f.min_count)->capture_default_str();
    s->add_option("--names", f.names, "Object and predicate names JSON");
    s->add_option("--word-vectors", f.word_vectors,
                  "GloVe-style text file for the word embedding");
  };

  CLI::App* synth = app.add_subcommand("synth", "Write a synthetic dataset");
  synth->add_option("--images", f.images)->capture_default_str();
  synth->add_option("--objects", f.objects)->capture_default_str();
  synth->add_option("--predicates", f.predicates, "Foreground predicates")
      ->capture_default_str();
  synth->add_option("--min-regions", f.min_regions)->capture_default_str();
  synth->add_option("--max-regions", f.max_regions)->capture_default_str();
  synth->add_option("--d-vis", f.d_visual)->capture_default_str();
  synth->add_option("--out", f.out)->required();

  CLI::App* vocab = app.add_subcommand("vocab", "Build a vocabulary");
  vocab->add_option("--captions", f.captions, "Dataset JSONL or one caption per line")
      ->required();
  vocab->add_option("--min-count", f.min_count)->capture_default_str();
  vocab->add_option("--out", f.out)->required();

  CLI::App* sgg = app.add_subcommand("train-sgg", "Step (i): scene-graph pre-training");
  add_training(sgg);
  add_fresh(sgg);

  CLI::App* cap = app.add_subcommand("train-caption", "Step (ii): caption training");
  add_training(cap);
  add_fresh(cap);
  cap->add_option("--init", f.init, "Checkpoint from train-sgg");
  cap->add_flag("--freeze-encoder", f.freeze_encoder, "Freeze embedding and encoder");
  cap->add_flag("--no-relation-loss", f.no_relation_loss, "Train on the caption loss only");

  CLI::App* scst = app.add_subcommand("train-scst", "Step (iii): CIDEr-D fine-tuning");
  add_training(scst);
  scst->add_option("--init", f.init, "Checkpoint from train-caption")->required();
  scst->add_option("--lr", f.lr)->capture_default_str();

  CLI::App* evc = app.add_subcommand("eval-caption", "BLEU, ROUGE-L and CIDEr-D");
  evc->add_option("--data", f.data)->required();
  evc->add_option("--ckpt", f.ckpt)->required();
  evc->add_option("--config", f.config);
  evc->add_option("--beam", f.beam, "Beam size (default from config; 1 is greedy)");

  CLI::App* evs = app.add_subcommand("eval-sgg", "Scene-graph recall@K");
  evs->add_option("--data", f.data)->required();
  evs->add_option("--ckpt", f.ckpt)->required();
  evs->add_option("--config", f.config);
  evs->add_option("--mode", f.mode)
      ->check(CLI::IsMember(std::vector<std::string>{"predcls", "sgcls", "sgdet"}))
      ->capture_default_str();
  evs->add_option("--k", f.ks)->delimiter(',')->capture_default_str();
  evs->add_option("--proposals", f.proposals, "Detector regions (JSONL) for sgdet");

  CLI::App* inf = app.add_subcommand("infer", "Caption and scene graph for records");
  inf->add_option("--record", f.record, "A JSONL line or a JSONL file")->required();
  inf->add_option("--ckpt", f.ckpt)->required();
  inf->add_option("--config", f.config);
  inf->add_option("--beam", f.beam, "Beam size (default from config; 1 is greedy)");
  inf->add_option("--top-k", f.top_k)->capture_default_str();
  inf->add_flag("--predict-labels", f.predict_labels,
                "Ignore region labels and use the object head");

  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--configurations", f.configurations)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(f, out);
    if (vocab->parsed()) return cmd_vocab(f, out);
    if (sgg->parsed()) return cmd_train(f, *sgg, 1, out, err);
    if (cap->parsed()) return cmd_train(f, *cap, 2, out, err);
    if (scst->parsed()) return cmd_train(f, *scst, 3, out, err);
    if (evc->parsed()) return cmd_eval_caption(f, *evc, out, err);
    if (evs->parsed()) return cmd_eval_sgg(f, *evs, out, err);
    if (inf->parsed()) return cmd_infer(f, *inf, out, err);
    if (gc->parsed()) return cmd_gradcheck(f, out, err);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace reformer
