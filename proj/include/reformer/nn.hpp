// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "reformer/autograd.hpp"

namespace reformer::nn {

enum class Init { kZeros, kOnes, kXavierUniform, kNormal002 };

// Owns every parameter of a model under a unique dotted name, in creation
// order. With `allocate == false` only shapes are recorded, which lets
// callers size a configuration without materializing it.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0, bool allocate = true);

  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter& create(const std::string& name, const Shape& shape, Init init);

  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<Parameter*>& all() const { return order_; }
  std::vector<Parameter*> with_prefix(const std::string& prefix) const;
  // Total number of scalars across all parameters.
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> owned_;
  std::vector<Parameter*> order_;
  std::map<std::string, Parameter*> index_;
  std::vector<Shape> shapes_;
  std::mt19937_64 rng_;
  bool allocate_;
};

// y = x W + b with W stored [in, out].
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in,
         std::size_t out, bool bias = true);

  Var forward(Tape& tape, Var x) const;

  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(ParamStore& store, const std::string& name, std::size_t count,
            std::size_t dim);

  Var forward(Tape& tape, std::span<const std::size_t> ids) const;

  Parameter* table = nullptr;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t dim,
            double eps = 1e-5);

  Var forward(Tape& tape, Var x) const;

  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  double eps = 1e-5;
};

// Projections for multi-head attention. The key projection has no bias: a
// key bias shifts every score in a row equally and cancels in the softmax.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name,
                     std::size_t d, std::size_t heads);

  Var forward(Tape& tape, Var query, Var memory,
              const AttentionMask* mask = nullptr) const;

  Linear q, k, v, out;
  std::size_t heads = 1;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParamStore& store, const std::string& name, std::size_t d,
              std::size_t inner);

  Var forward(Tape& tape, Var x) const;

  Linear up, down;
};

// Pre-norm encoder block:
//   x += drop(attn(ln1(x)));  x += drop(ffn(ln2(x)))
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParamStore& store, const std::string& name, std::size_t d,
               std::size_t heads, std::size_t ffn_inner, double dropout);

  Var forward(Tape& tape, Var x, const AttentionMask* mask = nullptr) const;

  LayerNorm ln1, ln2;
  MultiHeadAttention self_attn;
  FeedForward ffn;
  double dropout = 0.0;
};

// Pre-norm decoder block: causal self-attention, cross-attention over the
// encoder memory, then the feed-forward sublayer.
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(ParamStore& store, const std::string& name, std::size_t d,
               std::size_t heads, std::size_t ffn_inner, double dropout);

  Var forward(Tape& tape, Var y, Var memory, const AttentionMask& causal,
              const AttentionMask* memory_mask = nullptr) const;

  LayerNorm ln1, ln2, ln3;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;
  double dropout = 0.0;
};

// Sinusoidal table: PE(p, 2i) = sin(p / 10000^(2i/d)), PE(p, 2i+1) = cos(.).
Tensor positional_encoding(std::size_t length, std::size_t d);

}  // namespace reformer::nn
