// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "reformer/config.hpp"

#include <fmt/format.h>

#include "reformer/errors.hpp"

namespace reformer {

void ReFormerConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  require(d_model > 0, "d_model must be positive");
  require(heads > 0, "heads must be positive");
  if (d_model % heads != 0) {
    throw ConfigError(fmt::format(
        "d_model {} must be divisible by heads {}", d_model, heads));
  }
  require(encoder_layers >= 1, "encoder_layers must be >= 1");
  require(decoder_layers >= 1, "decoder_layers must be >= 1");
  require(d_box > 0 && d_label > 0 && d_fused > 0 && d_visual > 0,
          "embedding widths must be positive");
  require(ffn_mult > 0, "ffn_mult must be positive");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  require(lambda >= 0.0, "lambda must be >= 0");
  require(vocab_size > 4, "vocab_size must exceed the 4 special tokens");
  require(num_object_classes >= 1, "num_object_classes must be >= 1");
  require(num_predicates >= 2,
          "num_predicates must include background plus one predicate");
  require(max_caption_len >= 1, "max_caption_len must be >= 1");
  require(beam_size >= 1, "beam_size must be >= 1");
  require(label_dropout >= 0.0 && label_dropout <= 1.0,
          "label_dropout must lie in [0, 1]");
}

#define REFORMER_CONFIG_FIELDS(X) \
  X(d_model)                      \
  X(heads)                        \
  X(encoder_layers)               \
  X(decoder_layers)               \
  X(d_box)                        \
  X(d_label)                      \
  X(d_fused)                      \
  X(d_visual)                     \
  X(ffn_mult)                     \
  X(dropout)                      \
  X(lambda)                       \
  X(vocab_size)                   \
  X(num_object_classes)           \
  X(num_predicates)               \
  X(max_caption_len)              \
  X(beam_size)                    \
  X(freeze_encoder_in_caption)    \
  X(use_relation_loss)            \
  X(weighted_relation_loss)       \
  X(use_object_loss)              \
  X(background_pair_sample_ratio)  \
  X(label_dropout)

void to_json(nlohmann::json& j, const ReFormerConfig& c) {
  j = nlohmann::json::object();
#define X(field) j[#field] = c.field;
  REFORMER_CONFIG_FIELDS(X)
#undef X
}

void apply_json(const nlohmann::json& j, ReFormerConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    bool known = false;
    try {
#define X(field)                                  \
  if (key == #field) {                            \
    c.field = it.value().get<decltype(c.field)>(); \
    known = true;                                 \
  }
      REFORMER_CONFIG_FIELDS(X)
#undef X
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(
          fmt::format("config field '{}' has the wrong type: {}", key, e.what()));
    }
    if (!known) throw ConfigError(fmt::format("unknown config field '{}'", key));
  }
}

void from_json(const nlohmann::json& j, ReFormerConfig& c) { apply_json(j, c); }

}  // namespace reformer
