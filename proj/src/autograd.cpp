// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "reformer/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstring>
#include <numbers>

#include <fmt/format.h>

#include "reformer/errors.hpp"
#include "reformer/kernels.hpp"

namespace reformer {

// ---------------------------------------------------------------------------
// Masks

AttentionMask AttentionMask::full(std::size_t rows, std::size_t cols) {
  return {rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c <= r; ++c) m.allowed[r * n + c] = 1;
  }
  return m;
}

AttentionMask AttentionMask::key_padding(std::size_t rows,
                                         const std::vector<bool>& valid) {
  AttentionMask m{rows, valid.size(),
                  std::vector<std::uint8_t>(rows * valid.size(), 0)};
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < valid.size(); ++c) {
      m.allowed[r * valid.size() + c] = valid[c] ? 1 : 0;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape->value(*this); }

Tape::Tape(std::uint64_t seed, bool training)
    : rng_(seed), seed_(seed), training_(training) {}

Var Tape::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) {
    throw TapeError("tape node limit exceeded");
  }
  nodes_.push_back(std::move(node));
  grads_.emplace_back();
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  return push(Node{std::move(value), nullptr, nullptr, false});
}

Var Tape::leaf(Tensor value) {
  return push(Node{std::move(value), nullptr, nullptr, grad_enabled_});
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
    return Var{this, it->second};
  }
  const bool tracked = grad_enabled_ && p.trainable;
  // Parameter values are referenced, not copied: they must stay untouched
  // while this tape is alive.
  Var v = push(Node{Tensor(Shape{0}), nullptr, &p, tracked});
  param_nodes_.emplace(&p, v.id);
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents,
                 BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(parents), std::move(fn));
}

Var Tape::record(Tensor value, const std::vector<Var>& parents,
                 BackwardFn fn) {
  bool tracked = false;
  for (const Var& p : parents) {
    if (p.tape != this) throw TapeError("operands recorded on different tapes");
    tracked = tracked || nodes_[p.id].tracked;
  }
  tracked = tracked && grad_enabled_;
  return push(Node{std::move(value), tracked ? std::move(fn) : nullptr,
                   nullptr, tracked});
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.param != nullptr ? n.param->value : n.value;
}

bool Tape::requires_grad(Var v) const { return nodes_.at(v.id).tracked; }

const Tensor& Tape::grad(Var v) const {
  if (!nodes_.at(v.id).tracked) {
    throw TapeError("gradient requested for an untracked value");
  }
  if (!backward_done_) throw TapeError("gradient requested before backward()");
  if (!grads_[v.id]) {
    // Tracked but unreachable from the loss: zero gradient.
    const_cast<Tape*>(this)->grads_[v.id] = Tensor::zeros_like(value(v));
  }
  return *grads_[v.id];
}

Tensor& Tape::grad_slot(Var v) {
  auto& slot = grads_[v.id];
  if (!slot) slot = Tensor::zeros_like(value(v));
  return *slot;
}

void Tape::accumulate_grad(Var v, const Tensor& g) {
  if (!nodes_[v.id].tracked) return;
  auto& slot = grads_[v.id];
  if (!slot) {
    slot = g;
    return;
  }
  kernels::active().add(slot->ptr(), g.ptr(), slot->ptr(), g.size());
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw TapeError("loss belongs to another tape");
  if (backward_done_) {
    throw TapeError("backward() called twice without reset()");
  }
  const Tensor& lv = value(loss);
  if (lv.size() != 1) {
    throw TapeError(fmt::format("backward() needs a scalar loss, got shape {}",
                                shape_str(lv.shape())));
  }
  if (!nodes_[loss.id].tracked) {
    throw TapeError("backward() on a loss that does not depend on any tracked value");
  }
  backward_done_ = true;
  grads_[loss.id] = Tensor(lv.shape(), 1.0);
  for (std::int64_t id = loss.id; id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (!node.tracked || !g) continue;
    if (node.backward) node.backward(*this, *g);
    if (node.param != nullptr) {
      Parameter& p = *node.param;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      kernels::active().add(p.grad.ptr(), g->ptr(), p.grad.ptr(), g->size());
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
  param_nodes_.clear();
  backward_done_ = false;
  rng_.seed(seed_);
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw TapeError("operation on an empty Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw TapeError("operands recorded on different tapes");
  return tape_of(a);
}

// Index into a right-aligned broadcast input for every output position.
std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& in) {
  const std::size_t r = out.size();
  std::vector<std::size_t> in_stride(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t axis_in = in.size() - 1 - k;
    const std::size_t axis_out = r - 1 - k;
    in_stride[axis_out] = in[axis_in] == 1 ? 0 : stride;
    stride *= in[axis_in];
  }
  const std::size_t total = numel(out);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t o = 0; o < total; ++o) {
    map[o] = offset;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      offset += in_stride[ax];
      if (idx[ax] < out[ax]) break;
      offset -= in_stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return map;
}

// True when `small` equals the trailing extents of `big`.
bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(),
                    big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

double apply_scalar(BinaryKind kind, double x, double y) {
  switch (kind) {
    case BinaryKind::kAdd:
      return x + y;
    case BinaryKind::kSub:
      return x - y;
    case BinaryKind::kMul:
      return x * y;
  }
  return 0.0;
}

void apply_kernel(BinaryKind kind, const double* a, const double* b,
                  double* out, std::size_t n) {
  const auto& k = kernels::active();
  switch (kind) {
    case BinaryKind::kAdd:
      k.add(a, b, out, n);
      break;
    case BinaryKind::kSub:
      k.sub(a, b, out, n);
      break;
    case BinaryKind::kMul:
      k.mul(a, b, out, n);
      break;
  }
}

Tensor apply_binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor out(out_shape);
  if (a.shape() == b.shape()) {
    apply_kernel(kind, a.ptr(), b.ptr(), out.ptr(), out.size());
    return out;
  }
  if (a.shape() == out_shape && is_suffix(b.shape(), out_shape) &&
      b.size() > 0) {
    const std::size_t period = b.size();
    for (std::size_t off = 0; off < out.size(); off += period) {
      apply_kernel(kind, a.ptr() + off, b.ptr(), out.ptr() + off, period);
    }
    return out;
  }
  if (b.shape() == out_shape && is_suffix(a.shape(), out_shape) &&
      a.size() > 0) {
    const std::size_t period = a.size();
    for (std::size_t off = 0; off < out.size(); off += period) {
      apply_kernel(kind, a.ptr(), b.ptr() + off, out.ptr() + off, period);
    }
    return out;
  }
  const auto amap = broadcast_map(out_shape, a.shape());
  const auto bmap = broadcast_map(out_shape, b.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = apply_scalar(kind, a[amap[i]], b[bmap[i]]);
  }
  return out;
}

// Sums a broadcast gradient back down to `target`.
Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out(target);
  if (is_suffix(target, g.shape()) && out.size() > 0) {
    const std::size_t period = out.size();
    const auto& k = kernels::active();
    for (std::size_t off = 0; off < g.size(); off += period) {
      k.add(out.ptr(), g.ptr() + off, out.ptr(), period);
    }
    return out;
  }
  const auto map = broadcast_map(g.shape(), target);
  for (std::size_t i = 0; i < g.size(); ++i) out[map[i]] += g[i];
  return out;
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(fmt::format("axis {} out of range for rank {}", axis, r));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(fmt::format("shape mismatch: {} vs {}", shape_str(a),
                                   shape_str(b)));
    }
    out[r - 1 - k] = da == 1 ? db : da;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

Var elementwise(Var a, Var b, BinaryKind kind) {
  Tape& t = tape_of(a, b);
  Tensor out = apply_binary(t.value(a), t.value(b), kind);
  return t.record(std::move(out), {a, b},
                  [a, b, kind](Tape& tp, const Tensor& g) {
                    const Tensor& av = tp.value(a);
                    const Tensor& bv = tp.value(b);
                    if (tp.requires_grad(a)) {
                      if (kind == BinaryKind::kMul) {
                        tp.accumulate_grad(
                            a, reduce_to(apply_binary(g, bv, BinaryKind::kMul),
                                         av.shape()));
                      } else {
                        tp.accumulate_grad(a, reduce_to(g, av.shape()));
                      }
                    }
                    if (tp.requires_grad(b)) {
                      if (kind == BinaryKind::kMul) {
                        tp.accumulate_grad(
                            b, reduce_to(apply_binary(g, av, BinaryKind::kMul),
                                         bv.shape()));
                      } else if (kind == BinaryKind::kSub) {
                        Tensor neg = reduce_to(g, bv.shape());
                        kernels::active().scale(-1.0, neg.ptr(), neg.ptr(),
                                                neg.size());
                        tp.accumulate_grad(b, neg);
                      } else {
                        tp.accumulate_grad(b, reduce_to(g, bv.shape()));
                      }
                    }
                  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  Tensor out(av.shape());
  kernels::active().scale(s, av.ptr(), out.ptr(), av.size());
  return t.record(std::move(out), {a}, [a, s](Tape& tp, const Tensor& g) {
    Tensor ga(g.shape());
    kernels::active().scale(s, g.ptr(), ga.ptr(), g.size());
    tp.accumulate_grad(a, ga);
  });
}

// ---------------------------------------------------------------------------
// Matmul

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() < 2 || bv.rank() < 2) {
    throw ShapeError(fmt::format("matmul needs rank >= 2, got {} and {}",
                                 shape_str(av.shape()), shape_str(bv.shape())));
  }
  const std::size_t m = av.shape()[av.rank() - 2];
  const std::size_t k = av.shape().back();
  const std::size_t k2 = bv.shape()[bv.rank() - 2];
  const std::size_t n = bv.shape().back();
  if (k != k2) {
    throw ShapeError(fmt::format("matmul inner dimension mismatch: {} vs {}",
                                 shape_str(av.shape()), shape_str(bv.shape())));
  }
  const bool shared_b = bv.rank() == 2;
  Shape lead(av.shape().begin(), av.shape().end() - 2);
  if (!shared_b) {
    Shape blead(bv.shape().begin(), bv.shape().end() - 2);
    if (lead != blead) {
      throw ShapeError(fmt::format("matmul batch dimensions differ: {} vs {}",
                                   shape_str(av.shape()),
                                   shape_str(bv.shape())));
    }
  }
  const std::size_t batch = numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  const auto& kt = kernels::active();
  if (shared_b) {
    kt.gemm_nn(av.ptr(), bv.ptr(), out.ptr(), batch * m, k, n, false);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      kt.gemm_nn(av.ptr() + i * m * k, bv.ptr() + i * k * n,
                 out.ptr() + i * m * n, m, k, n, false);
    }
  }
  return t.record(
      std::move(out), {a, b},
      [a, b, batch, m, k, n, shared_b](Tape& tp, const Tensor& g) {
        const auto& kt2 = kernels::active();
        const Tensor& av2 = tp.value(a);
        const Tensor& bv2 = tp.value(b);
        if (tp.requires_grad(a)) {
          Tensor& ga = tp.grad_slot(a);
          if (shared_b) {
            kt2.gemm_nt(g.ptr(), bv2.ptr(), ga.ptr(), batch * m, n, k, true);
          } else {
            for (std::size_t i = 0; i < batch; ++i) {
              kt2.gemm_nt(g.ptr() + i * m * n, bv2.ptr() + i * k * n,
                          ga.ptr() + i * m * k, m, n, k, true);
            }
          }
        }
        if (tp.requires_grad(b)) {
          Tensor& gb = tp.grad_slot(b);
          if (shared_b) {
            kt2.gemm_tn(av2.ptr(), g.ptr(), gb.ptr(), k, batch * m, n, true);
          } else {
            for (std::size_t i = 0; i < batch; ++i) {
              kt2.gemm_tn(av2.ptr() + i * m * k, g.ptr() + i * m * n,
                          gb.ptr() + i * k * n, k, m, n, true);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const double s = kernels::active().sum(av.ptr(), av.size());
  return t.record(Tensor::scalar(s), {a}, [a](Tape& tp, const Tensor& g) {
    tp.accumulate_grad(a, Tensor(tp.value(a).shape(), g.item()));
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Softmax

Var softmax(Var x, int axis) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  if (xv.rank() == 0) throw ShapeError("softmax of a rank-0 tensor");
  const std::size_t ax = normalize_axis(axis, xv.rank());
  const std::size_t len = xv.shape()[ax];
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < xv.rank(); ++i) inner *= xv.shape()[i];
  const std::size_t outer = len * inner == 0 ? 0 : xv.size() / (len * inner);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) {
        mx = std::max(mx, xv[base + j * inner]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  Tensor y = out;
  return t.record(
      std::move(out), {x},
      [x, y = std::move(y), outer, len, inner](Tape& tp, const Tensor& g) {
        Tensor gx(y.shape());
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double dotgy = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
              dotgy += g[base + j * inner] * y[base + j * inner];
            }
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t p = base + j * inner;
              gx[p] = y[p] * (g[p] - dotgy);
            }
          }
        }
        tp.accumulate_grad(x, gx);
      });
}

// ---------------------------------------------------------------------------
// Layer norm

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  tape_of(x, beta);
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  const std::size_t d = xv.cols();
  if (gv.size() != d || bv.size() != d) {
    throw ShapeError(fmt::format("layer_norm: input {} with gamma {} beta {}",
                                 shape_str(xv.shape()), shape_str(gv.shape()),
                                 shape_str(bv.shape())));
  }
  if (!(eps > 0.0)) throw ShapeError("layer_norm eps must be positive");
  const std::size_t rows = xv.rows();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return t.record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std),
       rows, d](Tape& tp, const Tensor& g) {
        const Tensor& gv2 = tp.value(gamma);
        if (tp.requires_grad(gamma) || tp.requires_grad(beta)) {
          Tensor gg(gv2.shape());
          Tensor gb(gv2.shape());
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += g[r * d + j] * xhat[r * d + j];
              gb[j] += g[r * d + j];
            }
          }
          tp.accumulate_grad(gamma, gg);
          tp.accumulate_grad(beta, gb);
        }
        if (tp.requires_grad(x)) {
          Tensor gx(xhat.shape());
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0;
            double m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * gv2[j];
              m1 += dh;
              m2 += dh * xhat[r * d + j];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * gv2[j];
              gx[r * d + j] = inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
            }
          }
          tp.accumulate_grad(x, gx);
        }
      });
}

// ---------------------------------------------------------------------------
// Activations

Var gelu(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape());
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  }
  return t.record(std::move(out), {x}, [x](Tape& tp, const Tensor& g) {
    const Tensor& xv2 = tp.value(x);
    Tensor gx(xv2.shape());
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < xv2.size(); ++i) {
      const double v = xv2[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      gx[i] = g[i] * (cdf + v * pdf);
    }
    tp.accumulate_grad(x, gx);
  });
}

Var relu(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0 ? xv[i] : 0.0;
  return t.record(std::move(out), {x}, [x](Tape& tp, const Tensor& g) {
    const Tensor& xv2 = tp.value(x);
    Tensor gx(xv2.shape());
    for (std::size_t i = 0; i < xv2.size(); ++i) {
      gx[i] = xv2[i] > 0 ? g[i] : 0.0;
    }
    tp.accumulate_grad(x, gx);
  });
}

Var dropout(Var x, double p) {
  Tape& t = tape_of(x);
  if (!t.training() || p <= 0.0) return x;
  if (p >= 1.0) throw ShapeError("dropout probability must be < 1");
  const Tensor& xv = t.value(x);
  Tensor keep(xv.shape());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double s = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    keep[i] = u(t.rng()) >= p ? s : 0.0;
  }
  Tensor out(xv.shape());
  kernels::active().mul(xv.ptr(), keep.ptr(), out.ptr(), out.size());
  return t.record(std::move(out), {x},
                  [x, keep = std::move(keep)](Tape& tp, const Tensor& g) {
                    Tensor gx(g.shape());
                    kernels::active().mul(g.ptr(), keep.ptr(), gx.ptr(),
                                          g.size());
                    tp.accumulate_grad(x, gx);
                  });
}

// ---------------------------------------------------------------------------
// Indexing

Var gather_rows(Var table, std::span<const std::size_t> rows) {
  Tape& t = tape_of(table);
  const Tensor& tv = t.value(table);
  if (tv.rank() != 2) {
    throw ShapeError(fmt::format("gather_rows needs a 2-D table, got {}",
                                 shape_str(tv.shape())));
  }
  const std::size_t c = tv.cols();
  const std::size_t n_rows = tv.shape()[0];
  Tensor out(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n_rows) {
      throw ShapeError(fmt::format("row index {} out of range for table {}",
                                   rows[i], shape_str(tv.shape())));
    }
    std::copy_n(tv.ptr() + rows[i] * c, c, out.ptr() + i * c);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {table},
                  [table, idx = std::move(idx), c](Tape& tp, const Tensor& g) {
                    Tensor& gt = tp.grad_slot(table);
                    const auto& k = kernels::active();
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                      k.add(gt.ptr() + idx[i] * c, g.ptr() + i * c,
                            gt.ptr() + idx[i] * c, c);
                    }
                  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  Tape& t = tape_of(parts.front());
  const std::size_t rows = t.value(parts.front()).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    tape_of(parts.front(), p);
    const Tensor& v = t.value(p);
    if (v.rank() != 2 || v.shape()[0] != rows) {
      throw ShapeError(fmt::format("concat_cols: part {} incompatible with {} rows",
                                   shape_str(v.shape()), rows));
    }
    widths.push_back(v.cols());
    total += v.cols();
  }
  Tensor out(Shape{rows, total});
  std::size_t off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor& v = t.value(parts[pi]);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.ptr() + r * widths[pi], widths[pi],
                  out.ptr() + r * total + off);
    }
    off += widths[pi];
  }
  return t.record(std::move(out), parts,
                  [parts, widths, rows, total](Tape& tp, const Tensor& g) {
                    std::size_t o = 0;
                    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
                      if (tp.requires_grad(parts[pi])) {
                        Tensor gp(Shape{rows, widths[pi]});
                        for (std::size_t r = 0; r < rows; ++r) {
                          std::copy_n(g.ptr() + r * total + o, widths[pi],
                                      gp.ptr() + r * widths[pi]);
                        }
                        tp.accumulate_grad(parts[pi], gp);
                      }
                      o += widths[pi];
                    }
                  });
}

// ---------------------------------------------------------------------------
// Cross entropy

Var cross_entropy(Var logits, std::span<const int> targets,
                  const CrossEntropyOptions& options) {
  Tape& t = tape_of(logits);
  const Tensor& lv = t.value(logits);
  if (lv.rank() != 2) {
    throw ShapeError(fmt::format("cross_entropy needs [n, c] logits, got {}",
                                 shape_str(lv.shape())));
  }
  const std::size_t n = lv.shape()[0];
  const std::size_t c = lv.shape()[1];
  if (targets.size() != n) {
    throw ShapeError(fmt::format("cross_entropy: {} targets for {} rows",
                                 targets.size(), n));
  }
  if (!options.class_weights.empty() && options.class_weights.size() != c) {
    throw ShapeError(fmt::format("cross_entropy: {} class weights for {} classes",
                                 options.class_weights.size(), c));
  }
  Tensor probs(lv.shape());
  std::vector<double> row_weight(n, 0.0);
  double total = 0.0;
  double denom = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int tgt = targets[r];
    if (options.ignore_index && tgt == *options.ignore_index) continue;
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= c) {
      throw ShapeError(fmt::format("cross_entropy: target {} outside [0, {})",
                                   tgt, c));
    }
    const double* row = lv.ptr() + r * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(row[j] - mx);
      probs[r * c + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    const double lse = mx + std::log(z);
    const double w = options.class_weights.empty()
                         ? 1.0
                         : options.class_weights[static_cast<std::size_t>(tgt)];
    row_weight[r] = w;
    total += w * (lse - row[tgt]);
    denom += w;
  }
  if (denom == 0.0) {
    throw EmptyLossError("cross_entropy: every row is ignored (empty loss)");
  }
  const double norm = options.reduction == Reduction::kMean ? denom : 1.0;
  std::vector<int> tg(targets.begin(), targets.end());
  return t.record(
      Tensor::scalar(total / norm), {logits},
      [logits, probs = std::move(probs), row_weight = std::move(row_weight),
       tg = std::move(tg), norm, n, c](Tape& tp, const Tensor& g) {
        Tensor gl(Shape{n, c});
        const double gs = g.item() / norm;
        for (std::size_t r = 0; r < n; ++r) {
          if (row_weight[r] == 0.0) continue;
          const double coef = gs * row_weight[r];
          for (std::size_t j = 0; j < c; ++j) {
            gl[r * c + j] = coef * probs[r * c + j];
          }
          gl[r * c + static_cast<std::size_t>(tg[r])] -= coef;
        }
        tp.accumulate_grad(logits, gl);
      });
}

// ---------------------------------------------------------------------------
// Attention

namespace {

struct AttentionGeometry {
  std::size_t nq, nk, d, heads, dh;
};

AttentionGeometry check_attention(const Tensor& q, const Tensor& k,
                                  const Tensor* v, std::size_t heads,
                                  const AttentionMask* mask) {
  if (q.rank() != 2 || k.rank() != 2 || (v && v->rank() != 2)) {
    throw ShapeError("attention expects 2-D q, k, v");
  }
  const std::size_t d = q.cols();
  if (k.cols() != d || (v && v->cols() != d)) {
    throw ShapeError(fmt::format("attention width mismatch: q {} k {}",
                                 shape_str(q.shape()), shape_str(k.shape())));
  }
  if (v && v->shape()[0] != k.shape()[0]) {
    throw ShapeError(fmt::format("attention: keys {} vs values {}",
                                 shape_str(k.shape()), shape_str(v->shape())));
  }
  if (heads == 0 || d % heads != 0) {
    throw ShapeError(fmt::format(
        "attention: model width {} is not divisible by {} heads", d, heads));
  }
  const std::size_t nq = q.shape()[0];
  const std::size_t nk = k.shape()[0];
  if (mask) {
    if (mask->rows != nq || mask->cols != nk) {
      throw ShapeError(fmt::format("attention mask {}x{} for scores {}x{}",
                                   mask->rows, mask->cols, nq, nk));
    }
    for (std::size_t r = 0; r < nq; ++r) {
      bool any = false;
      for (std::size_t c = 0; c < nk; ++c) any = any || mask->allows(r, c);
      if (!any) {
        throw ShapeError(fmt::format(
            "attention: query row {} has every key masked", r));
      }
    }
  }
  return {nq, nk, d, heads, d / heads};
}

void copy_head(const Tensor& src, std::size_t rows, std::size_t d,
               std::size_t dh, std::size_t h, std::vector<double>& dst) {
  dst.resize(rows * dh);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(src.ptr() + r * d + h * dh, dh, dst.data() + r * dh);
  }
}

// probs[h] = softmax(scale * Q_h K_h^T) with masked scores pinned to -1e9.
std::vector<std::vector<double>> head_probabilities(
    const Tensor& q, const Tensor& k, const AttentionGeometry& geo,
    const AttentionMask* mask) {
  const auto& kt = kernels::active();
  const double scale = 1.0 / std::sqrt(static_cast<double>(geo.dh));
  std::vector<std::vector<double>> probs(geo.heads);
  std::vector<double> qh, kh;
  for (std::size_t h = 0; h < geo.heads; ++h) {
    copy_head(q, geo.nq, geo.d, geo.dh, h, qh);
    copy_head(k, geo.nk, geo.d, geo.dh, h, kh);
    auto& p = probs[h];
    p.resize(geo.nq * geo.nk);
    kt.gemm_nt(qh.data(), kh.data(), p.data(), geo.nq, geo.dh, geo.nk, false);
    for (std::size_t r = 0; r < geo.nq; ++r) {
      double* row = p.data() + r * geo.nk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < geo.nk; ++c) {
        row[c] = (mask && !mask->allows(r, c)) ? -1e9 : row[c] * scale;
        mx = std::max(mx, row[c]);
      }
      double z = 0.0;
      for (std::size_t c = 0; c < geo.nk; ++c) {
        row[c] = std::exp(row[c] - mx);
        z += row[c];
      }
      for (std::size_t c = 0; c < geo.nk; ++c) row[c] /= z;
    }
  }
  return probs;
}

}  // namespace

Tensor attention_weights(const Tensor& q, const Tensor& k, std::size_t heads,
                         const AttentionMask* mask) {
  const auto geo = check_attention(q, k, nullptr, heads, mask);
  const auto probs = head_probabilities(q, k, geo, mask);
  Tensor out(Shape{geo.heads, geo.nq, geo.nk});
  for (std::size_t h = 0; h < geo.heads; ++h) {
    std::copy(probs[h].begin(), probs[h].end(),
              out.ptr() + h * geo.nq * geo.nk);
  }
  return out;
}

Var attention(Var q, Var k, Var v, std::size_t heads,
              const AttentionMask* mask) {
  Tape& t = tape_of(q, k);
  tape_of(q, v);
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  const Tensor& vv = t.value(v);
  const auto geo = check_attention(qv, kv, &vv, heads, mask);
  auto probs = head_probabilities(qv, kv, geo, mask);
  const auto& kt = kernels::active();
  Tensor out(Shape{geo.nq, geo.d});
  std::vector<double> vh, oh(geo.nq * geo.dh);
  for (std::size_t h = 0; h < geo.heads; ++h) {
    copy_head(vv, geo.nk, geo.d, geo.dh, h, vh);
    kt.gemm_nn(probs[h].data(), vh.data(), oh.data(), geo.nq, geo.nk, geo.dh,
               false);
    for (std::size_t r = 0; r < geo.nq; ++r) {
      std::copy_n(oh.data() + r * geo.dh, geo.dh,
                  out.ptr() + r * geo.d + h * geo.dh);
    }
  }
  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, geo, probs = std::move(probs)](Tape& tp, const Tensor& g) {
        const auto& k2 = kernels::active();
        const double scale = 1.0 / std::sqrt(static_cast<double>(geo.dh));
        const Tensor& qv2 = tp.value(q);
        const Tensor& kv2 = tp.value(k);
        const Tensor& vv2 = tp.value(v);
        const bool need_q = tp.requires_grad(q);
        const bool need_k = tp.requires_grad(k);
        const bool need_v = tp.requires_grad(v);
        Tensor gq(qv2.shape()), gk(kv2.shape()), gv(vv2.shape());
        std::vector<double> go, qh, kh, vh;
        std::vector<double> dp(geo.nq * geo.nk);
        std::vector<double> tmp_q(geo.nq * geo.dh), tmp_k(geo.nk * geo.dh);
        for (std::size_t h = 0; h < geo.heads; ++h) {
          const auto& p = probs[h];
          copy_head(g, geo.nq, geo.d, geo.dh, h, go);
          if (need_v) {
            k2.gemm_tn(p.data(), go.data(), tmp_k.data(), geo.nk, geo.nq,
                       geo.dh, false);
            for (std::size_t r = 0; r < geo.nk; ++r) {
              std::copy_n(tmp_k.data() + r * geo.dh, geo.dh,
                          gv.ptr() + r * geo.d + h * geo.dh);
            }
          }
          if (!need_q && !need_k) continue;
          copy_head(vv2, geo.nk, geo.d, geo.dh, h, vh);
          k2.gemm_nt(go.data(), vh.data(), dp.data(), geo.nq, geo.dh, geo.nk,
                     false);
          for (std::size_t r = 0; r < geo.nq; ++r) {
            double* drow = dp.data() + r * geo.nk;
            const double* prow = p.data() + r * geo.nk;
            double s = 0.0;
            for (std::size_t c = 0; c < geo.nk; ++c) s += drow[c] * prow[c];
            for (std::size_t c = 0; c < geo.nk; ++c) {
              drow[c] = prow[c] * (drow[c] - s) * scale;
            }
          }
          if (need_q) {
            copy_head(kv2, geo.nk, geo.d, geo.dh, h, kh);
            k2.gemm_nn(dp.data(), kh.data(), tmp_q.data(), geo.nq, geo.nk,
                       geo.dh, false);
            for (std::size_t r = 0; r < geo.nq; ++r) {
              std::copy_n(tmp_q.data() + r * geo.dh, geo.dh,
                          gq.ptr() + r * geo.d + h * geo.dh);
            }
          }
          if (need_k) {
            copy_head(qv2, geo.nq, geo.d, geo.dh, h, qh);
            k2.gemm_tn(dp.data(), qh.data(), tmp_k.data(), geo.nk, geo.nq,
                       geo.dh, false);
            for (std::size_t r = 0; r < geo.nk; ++r) {
              std::copy_n(tmp_k.data() + r * geo.dh, geo.dh,
                          gk.ptr() + r * geo.d + h * geo.dh);
            }
          }
        }
        if (need_q) tp.accumulate_grad(q, gq);
        if (need_k) tp.accumulate_grad(k, gk);
        if (need_v) tp.accumulate_grad(v, gv);
      });
}

// ---------------------------------------------------------------------------
// Gradient checking

double relative_error(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), kRelativeErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double eval_scalar(const std::function<Var(Tape&, Var)>& f, const Tensor& x) {
  Tape t;
  t.set_grad_enabled(false);
  Var xv = t.leaf(x);
  return f(t, xv).value().item();
}

double eval_scalar(const std::function<Var(Tape&)>& f) {
  Tape t;
  t.set_grad_enabled(false);
  return f(t).value().item();
}

void require_deterministic(double a, double b) {
  if (std::memcmp(&a, &b, sizeof(double)) != 0) {
    throw NumericalError(fmt::format(
        "grad_check: function is not deterministic ({} vs {})", a, b));
  }
}

}  // namespace

GradCheckResult grad_check(const std::function<Var(Tape&, Var)>& f,
                           const Tensor& x, double eps) {
  require_deterministic(eval_scalar(f, x), eval_scalar(f, x));
  Tape t;
  Var xv = t.leaf(x);
  Var y = f(t, xv);
  t.backward(y);
  const Tensor g = t.grad(xv);
  GradCheckResult res;
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + eps;
    const double fp = eval_scalar(f, xp);
    xp[i] = orig - eps;
    const double fm = eval_scalar(f, xp);
    xp[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = relative_error(g[i], numeric);
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
      res.worst_analytic = g[i];
      res.worst_numeric = numeric;
    }
    ++res.coordinates;
  }
  return res;
}

GradCheckResult grad_check_params(const std::function<Var(Tape&)>& f,
                                  std::span<Parameter* const> params,
                                  const ParamCheckOptions& options) {
  require_deterministic(eval_scalar(f), eval_scalar(f));
  for (Parameter* p : params) p->zero_grad();
  {
    Tape t;
    Var y = f(t);
    t.backward(y);
  }
  GradCheckResult res;
  std::mt19937_64 rng(options.seed);
  for (Parameter* p : params) {
    const Tensor g = p->grad;
    std::vector<std::size_t> coords(p->value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (options.max_coords_per_param > 0 &&
        coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
    }
    for (std::size_t i : coords) {
      const double orig = p->value[i];
      p->value[i] = orig + options.eps;
      const double fp = eval_scalar(f);
      p->value[i] = orig - options.eps;
      const double fm = eval_scalar(f);
      p->value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * options.eps);
      const double err = relative_error(g[i], numeric);
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_index = i;
        res.worst_name = p->name;
        res.worst_analytic = g[i];
        res.worst_numeric = numeric;
      }
      ++res.coordinates;
    }
  }
  return res;
}

}  // namespace reformer
