// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "reformer/tensor.hpp"

namespace reformer {

class Tape;

// A named trainable tensor. `grad` accumulates across every tape that binds
// the parameter until zeroed by the optimizer.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad() { grad = Tensor::zeros_like(value); }
};

// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  bool valid() const { return tape != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Row-by-column permission matrix for attention; true = may attend.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask full(std::size_t rows, std::size_t cols);
  static AttentionMask causal(std::size_t n);
  // Every query may attend only to keys whose `valid` flag is set.
  static AttentionMask key_padding(std::size_t rows,
                                   const std::vector<bool>& valid);

  bool allows(std::size_t r, std::size_t c) const {
    return allowed[r * cols + c] != 0;
  }
};

// Append-only record of operations for reverse-mode differentiation.
//
// Node k's parents always have ids < k, so a single reverse sweep suffices.
// Values produced only from untracked inputs are stored without a backward
// rule and never receive a gradient slot.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(std::uint64_t seed = 0, bool training = false);

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  // Frozen (non-trainable) parameters are bound as constants.
  Var param(Parameter& p);

  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  // Gradient of the last backward() w.r.t. a tracked node.
  const Tensor& grad(Var v) const;

  // Adds `g` into the gradient slot of `v` (no-op for untracked nodes).
  void accumulate_grad(Var v, const Tensor& g);
  // Mutable slot, zero-initialized on first access.
  Tensor& grad_slot(Var v);

  void backward(Var loss);
  void reset();

  bool training() const { return training_; }
  void set_training(bool on) { training_ = on; }
  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  std::mt19937_64& rng() { return rng_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool tracked = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor>> grads_;
  std::unordered_map<const Parameter*, std::uint32_t> param_nodes_;
  std::mt19937_64 rng_;
  std::uint64_t seed_;
  bool training_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Every op reads its operands' tape from the Var
// handles; mixing tapes is an error.

enum class BinaryKind { kAdd, kSub, kMul };

// Trailing-axis broadcast of a against b (numpy alignment, extents equal or 1).
Shape broadcast_shape(const Shape& a, const Shape& b);

Var elementwise(Var a, Var b, BinaryKind kind);
inline Var add(Var a, Var b) { return elementwise(a, b, BinaryKind::kAdd); }
inline Var sub(Var a, Var b) { return elementwise(a, b, BinaryKind::kSub); }
inline Var mul(Var a, Var b) { return elementwise(a, b, BinaryKind::kMul); }
Var scale(Var a, double s);

// [..., m, k] x [..., k, n]; leading extents must agree, or b may be 2-D and
// shared across the batch.
Var matmul(Var a, Var b);

Var sum(Var a);
Var mean(Var a);
Var softmax(Var x, int axis = -1);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var gelu(Var x);
Var relu(Var x);
// Inverted dropout driven by the tape's RNG; identity outside training.
Var dropout(Var x, double p);

// Rows of a 2-D tensor selected by index (embedding lookup).
Var gather_rows(Var table, std::span<const std::size_t> rows);
// Concatenation of 2-D tensors with equal row counts along the last axis.
Var concat_cols(const std::vector<Var>& parts);

enum class Reduction { kMean, kSum };

struct CrossEntropyOptions {
  std::optional<int> ignore_index;
  // Per-class weights; empty means uniform. With kMean the result is the
  // weighted mean sum(w_t * nll_t) / sum(w_t).
  std::vector<double> class_weights;
  Reduction reduction = Reduction::kMean;
};

// Mean (or sum) of -log softmax(logits)[target] over non-ignored rows,
// evaluated through a fused log-sum-exp.
Var cross_entropy(Var logits, std::span<const int> targets,
                  const CrossEntropyOptions& options = {});

// Multi-head scaled dot-product attention on pre-projected inputs.
// q: [n_q, d], k/v: [n_k, d]; heads split d into equal slices.
Var attention(Var q, Var k, Var v, std::size_t heads,
              const AttentionMask* mask = nullptr);

// Per-head attention weights [heads, n_q, n_k] for inspection (untracked).
Tensor attention_weights(const Tensor& q, const Tensor& k, std::size_t heads,
                         const AttentionMask* mask = nullptr);

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::string worst_name;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

inline constexpr double kRelativeErrorFloor = 1e-8;

// Relative error used throughout: |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric);

// Compares the tape gradient of scalar f at x with central differences.
// f is evaluated twice up front; disagreement raises NumericalError.
GradCheckResult grad_check(const std::function<Var(Tape&, Var)>& f,
                           const Tensor& x, double eps = 1e-5);

struct ParamCheckOptions {
  double eps = 1e-5;
  // Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

// Same check against parameters bound inside f via Tape::param.
GradCheckResult grad_check_params(const std::function<Var(Tape&)>& f,
                                  std::span<Parameter* const> params,
                                  const ParamCheckOptions& options = {});

}  // namespace reformer
