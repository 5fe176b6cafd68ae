// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "reformer/nn.hpp"

#include <cmath>

#include <fmt/format.h>

#include "reformer/errors.hpp"

namespace reformer::nn {

ParamStore::ParamStore(std::uint64_t seed, bool allocate)
    : rng_(seed), allocate_(allocate) {}

Parameter& ParamStore::create(const std::string& name, const Shape& shape,
                              Init init) {
  if (index_.contains(name)) {
    throw ConfigError(fmt::format("duplicate parameter name '{}'", name));
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  shapes_.push_back(shape);
  if (allocate_) {
    p->value = Tensor(shape);
    switch (init) {
      case Init::kZeros:
        break;
      case Init::kOnes:
        p->value = Tensor(shape, 1.0);
        break;
      case Init::kXavierUniform: {
        const std::size_t fan_out = shape.back();
        const std::size_t fan_in = numel(shape) / fan_out;
        const double a =
            std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> u(-a, a);
        for (double& v : p->value.data()) v = u(rng_);
        break;
      }
      case Init::kNormal002: {
        std::normal_distribution<double> n(0.0, 0.02);
        for (double& v : p->value.data()) v = n(rng_);
        break;
      }
    }
    p->zero_grad();
  } else {
    p->value = Tensor(Shape{0});
  }
  Parameter* raw = p.get();
  owned_.push_back(std::move(p));
  order_.push_back(raw);
  index_.emplace(name, raw);
  return *raw;
}

Parameter& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError(fmt::format("unknown parameter '{}'", name));
  }
  return *it->second;
}

const Parameter& ParamStore::get(const std::string& name) const {
  return const_cast<ParamStore*>(this)->get(name);
}

bool ParamStore::contains(const std::string& name) const {
  return index_.contains(name);
}

std::vector<Parameter*> ParamStore::with_prefix(
    const std::string& prefix) const {
  std::vector<Parameter*> out;
  for (Parameter* p : order_) {
    if (p->name.starts_with(prefix)) out.push_back(p);
  }
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const Shape& s : shapes_) n += numel(s);
  return n;
}

void ParamStore::zero_grad() {
  for (Parameter* p : order_) p->zero_grad();
}

// ---------------------------------------------------------------------------

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in,
               std::size_t out, bool with_bias) {
  weight = &store.create(name + ".weight", {in, out}, Init::kXavierUniform);
  if (with_bias) bias = &store.create(name + ".bias", {out}, Init::kZeros);
}

Var Linear::forward(Tape& tape, Var x) const {
  Var y = matmul(x, tape.param(*weight));
  return bias ? add(y, tape.param(*bias)) : y;
}

Embedding::Embedding(ParamStore& store, const std::string& name,
                     std::size_t count, std::size_t dim) {
  table = &store.create(name + ".weight", {count, dim}, Init::kNormal002);
}

Var Embedding::forward(Tape& tape, std::span<const std::size_t> ids) const {
  return gather_rows(tape.param(*table), ids);
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name,
                     std::size_t dim, double eps_)
    : eps(eps_) {
  gamma = &store.create(name + ".gamma", {dim}, Init::kOnes);
  beta = &store.create(name + ".beta", {dim}, Init::kZeros);
}

Var LayerNorm::forward(Tape& tape, Var x) const {
  return layer_norm(x, tape.param(*gamma), tape.param(*beta), eps);
}

MultiHeadAttention::MultiHeadAttention(ParamStore& store,
                                       const std::string& name, std::size_t d,
                                       std::size_t heads_)
    : heads(heads_) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError(fmt::format(
        "{}: model width {} is not divisible by {} heads", name, d, heads));
  }
  q = Linear(store, name + ".q", d, d);
  k = Linear(store, name + ".k", d, d, /*bias=*/false);
  v = Linear(store, name + ".v", d, d);
  out = Linear(store, name + ".out", d, d);
}

Var MultiHeadAttention::forward(Tape& tape, Var query, Var memory,
                                const AttentionMask* mask) const {
  Var qp = q.forward(tape, query);
  Var kp = k.forward(tape, memory);
  Var vp = v.forward(tape, memory);
  return out.forward(tape, attention(qp, kp, vp, heads, mask));
}

FeedForward::FeedForward(ParamStore& store, const std::string& name,
                         std::size_t d, std::size_t inner) {
  up = Linear(store, name + ".up", d, inner);
  down = Linear(store, name + ".down", inner, d);
}

Var FeedForward::forward(Tape& tape, Var x) const {
  return down.forward(tape, gelu(up.forward(tape, x)));
}

EncoderLayer::EncoderLayer(ParamStore& store, const std::string& name,
                           std::size_t d, std::size_t heads,
                           std::size_t ffn_inner, double dropout_)
    : dropout(dropout_) {
  ln1 = LayerNorm(store, name + ".ln1", d);
  self_attn = MultiHeadAttention(store, name + ".self_attn", d, heads);
  ln2 = LayerNorm(store, name + ".ln2", d);
  ffn = FeedForward(store, name + ".ffn", d, ffn_inner);
}

Var EncoderLayer::forward(Tape& tape, Var x, const AttentionMask* mask) const {
  Var h = ln1.forward(tape, x);
  x = add(x, reformer::dropout(self_attn.forward(tape, h, h, mask), dropout));
  h = ln2.forward(tape, x);
  return add(x, reformer::dropout(ffn.forward(tape, h), dropout));
}

DecoderLayer::DecoderLayer(ParamStore& store, const std::string& name,
                           std::size_t d, std::size_t heads,
                           std::size_t ffn_inner, double dropout_)
    : dropout(dropout_) {
  ln1 = LayerNorm(store, name + ".ln1", d);
  self_attn = MultiHeadAttention(store, name + ".self_attn", d, heads);
  ln2 = LayerNorm(store, name + ".ln2", d);
  cross_attn = MultiHeadAttention(store, name + ".cross_attn", d, heads);
  ln3 = LayerNorm(store, name + ".ln3", d);
  ffn = FeedForward(store, name + ".ffn", d, ffn_inner);
}

Var DecoderLayer::forward(Tape& tape, Var y, Var memory,
                          const AttentionMask& causal,
                          const AttentionMask* memory_mask) const {
  Var h = ln1.forward(tape, y);
  y = add(y, reformer::dropout(self_attn.forward(tape, h, h, &causal),
                               dropout));
  h = ln2.forward(tape, y);
  y = add(y, reformer::dropout(
                 cross_attn.forward(tape, h, memory, memory_mask), dropout));
  h = ln3.forward(tape, y);
  return add(y, reformer::dropout(ffn.forward(tape, h), dropout));
}

Tensor positional_encoding(std::size_t length, std::size_t d) {
  if (length == 0) throw ShapeError("positional_encoding: length must be >= 1");
  Tensor pe(Shape{length, d});
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle =
          static_cast<double>(pos) /
          std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe.at(pos, i) = std::sin(angle);
      if (i + 1 < d) pe.at(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

}  // namespace reformer::nn
