// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "helpers.hpp"
#include "reformer/cli.hpp"
#include "reformer/data_io.hpp"

using namespace reformer;
using reformer::testing::temp_path;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "reformer");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Files of one smoke pipeline rooted at a fresh directory.
struct Pipeline {
  std::string dir;
  std::string data, names, vocab, config, sgg, cap, scst;

  explicit Pipeline(const std::string& tag) {
    dir = temp_path(tag);
    std::filesystem::create_directories(dir);
    data = dir + "/data.jsonl";
    names = data + ".names.json";
    vocab = dir + "/vocab.json";
    config = dir + "/config.json";
    sgg = dir + "/sgg.ckpt";
    cap = dir + "/cap.ckpt";
    scst = dir + "/scst.ckpt";
    std::ofstream(config) << R"({"d_model": 16, "heads": 2, "encoder_layers": 1,
      "decoder_layers": 1, "d_box": 4, "d_label": 4, "d_fused": 16, "ffn_mult": 2})";
  }

  std::vector<Run> run_all() {
    std::vector<Run> r;
    r.push_back(cli({"synth", "--seed", "5", "--images", "6", "--d-vis", "8", "--out", data}));
    r.push_back(cli({"vocab", "--captions", data, "--min-count", "1", "--out", vocab}));
    r.push_back(cli({"train-sgg", "--data", data, "--config", config, "--vocab", vocab, "--names",
                     names, "--epochs", "2", "--batch-size", "3", "--warmup", "20", "--out",
                     sgg}));
    r.push_back(cli({"train-caption", "--data", data, "--init", sgg, "--lambda", "0.2",
                     "--epochs", "2", "--batch-size", "3", "--warmup", "20", "--out", cap}));
    r.push_back(cli({"train-scst", "--data", data, "--init", cap, "--iterations", "2", "--out",
                     scst}));
    r.push_back(cli({"eval-caption", "--data", data, "--ckpt", scst}));
    r.push_back(cli({"eval-sgg", "--data", data, "--ckpt", scst, "--mode", "sgcls", "--k",
                     "1,5,20"}));
    r.push_back(cli({"infer", "--record", data, "--ckpt", scst, "--beam", "2", "--top-k", "3"}));
    return r;
  }
};

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("smoke pipeline") {
    Pipeline p("smoke");
    const std::vector<Run> runs = p.run_all();
    for (std::size_t i = 0; i < runs.size(); ++i) {
      CAPTURE(i);
      CAPTURE(runs[i].err);
      CHECK(runs[i].code == kExitOk);
    }
    CHECK(load_dataset(p.data).size() == 6);
    CHECK(load_checkpoint(p.sgg).meta.at("stage") == 1);
    CHECK(load_checkpoint(p.cap).meta.at("stage") == 2);
    CHECK(load_checkpoint(p.cap).config.lambda == 0.2);
    CHECK(load_checkpoint(p.scst).meta.at("stage") == 3);
    CHECK(std::filesystem::exists(p.sgg + ".log.jsonl"));

    const auto caption = nlohmann::json::parse(runs[5].out);
    for (const char* key : {"bleu1", "bleu4", "rougeL", "ciderD"}) CHECK(caption.contains(key));
    const auto sgg = nlohmann::json::parse(runs[6].out);
    CHECK(sgg.at("rows").size() == 3);
    CHECK(sgg.at("rows")[0].at("mode") == "sgcls");

    std::istringstream lines(runs[7].out);
    std::string line;
    std::size_t count = 0;
    while (std::getline(lines, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.contains("caption"));
      CHECK(j.at("triplets").size() <= 3);
      if (!j.at("triplets").empty()) CHECK(j.at("triplets")[0].at("predicate").is_string());
      ++count;
    }
    CHECK(count == 6);
    CHECK(runs[2].err.find("config: ") != std::string::npos);
  }

  TEST_CASE("pipeline outputs are byte-identical across runs") {
    Pipeline a("det_a"), b("det_b");
    const auto ra = a.run_all();
    const auto rb = b.run_all();
    auto strip = [](std::string text, const std::string& dir) {
      for (auto at = text.find(dir); at != std::string::npos; at = text.find(dir)) {
        text.replace(at, dir.size(), "<dir>");
      }
      return text;
    };
    for (std::size_t i = 0; i < ra.size(); ++i) {
      CHECK(strip(ra[i].out, a.dir) == strip(rb[i].out, b.dir));
    }
    CHECK(slurp(a.data) == slurp(b.data));
    CHECK(slurp(a.vocab) == slurp(b.vocab));
    CHECK(slurp(a.sgg) == slurp(b.sgg));
    CHECK(slurp(a.cap) == slurp(b.cap));
    CHECK(slurp(a.scst) == slurp(b.scst));
    CHECK(slurp(a.cap + ".log.jsonl") == slurp(b.cap + ".log.jsonl"));
  }

  TEST_CASE("exit codes") {
    Pipeline p("codes");
    REQUIRE(cli({"synth", "--images", "4", "--d-vis", "8", "--out", p.data}).code == kExitOk);
    CHECK(cli({}).code == kExitUsage);
    CHECK(cli({"bogus"}).code == kExitUsage);
    CHECK(cli({"synth", "--out", p.data, "--no-such-flag"}).code == kExitUsage);
    CHECK(cli({"synth"}).code == kExitUsage);
    CHECK(cli({"synth", "--help"}).code == kExitOk);
    CHECK(cli({"synth", "--min-regions", "1", "--out", p.data + ".x"}).code == kExitData);
    CHECK(cli({"eval-sgg", "--data", p.data, "--ckpt", p.dir + "/missing.ckpt"}).code == kExitData);
    CHECK(cli({"train-sgg", "--data", p.dir + "/missing.jsonl", "--out", p.sgg}).code == kExitData);

    std::ofstream(p.dir + "/bad.jsonl") << "{\"image_id\": 1}\n";
    const Run bad = cli({"train-sgg", "--data", p.dir + "/bad.jsonl", "--out", p.sgg});
    CHECK(bad.code == kExitData);
    CHECK(bad.err.find("bad.jsonl:1") != std::string::npos);

    const std::vector<std::string> common{"--data",   p.data,  "--config", p.config,
                                          "--names",  p.data + ".names.json",
                                          "--min-count", "1", "--epochs", "1"};
    std::vector<std::string> sgg{"train-sgg", "--out", p.sgg};
    sgg.insert(sgg.end(), common.begin(), common.end());
    REQUIRE(cli(sgg).code == kExitOk);

    // Caption training without --init is only allowed as the cold-start ablation.
    std::vector<std::string> cold{"train-caption", "--out", p.cap};
    cold.insert(cold.end(), common.begin(), common.end());
    CHECK(cli(cold).code == kExitData);
    cold.push_back("--no-relation-loss");
    CHECK(cli(cold).code == kExitOk);

    // SCST from a step-one checkpoint is rejected.
    CHECK(cli({"train-scst", "--data", p.data, "--init", p.sgg, "--iterations", "1", "--out",
               p.scst})
              .code == kExitData);
    const Run sgdet = cli({"eval-sgg", "--data", p.data, "--ckpt", p.sgg, "--mode", "sgdet"});
    CHECK(sgdet.code == kExitData);
    CHECK(sgdet.err.find("--proposals") != std::string::npos);
    CHECK(cli({"eval-sgg", "--data", p.data, "--ckpt", p.sgg, "--mode", "sgdet", "--proposals",
               p.data})
              .code == kExitOk);
    CHECK(cli({"eval-sgg", "--data", p.data, "--ckpt", p.sgg, "--mode", "detcls"}).code ==
          kExitUsage);
  }

  TEST_CASE("gradcheck subcommand reports its worst case") {
    const Run r = cli({"gradcheck", "--configurations", "1"});
    const auto j = nlohmann::json::parse(r.out);
    for (const char* key : {"cases", "failed", "tolerance", "max_rel_error", "worst_case"}) {
      CHECK(j.contains(key));
    }
    CHECK(j.at("tolerance") == 1e-4);
    CHECK(r.code == (j.at("failed") == 0 ? kExitOk : kExitNumerical));
  }
}
