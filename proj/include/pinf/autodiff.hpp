/*
 * Copyright 2026 The pinf Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pinf/error.hpp"
#include "pinf/tensor.hpp"

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every executed operation together with the values it needs
// for its gradient. `backward` walks the record once in reverse order. Values
// are 64-bit; every op output is checked for NaN/Inf.
namespace pinf {

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradients of named parameters, keyed by the name given to Tape::parameter.
using GradTable = std::map<std::string, Tensor>;

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) { return push(std::move(t), {}, nullptr, false, "constant"); }

  // Unnamed differentiable leaf; its gradient is read back through grad().
  Var leaf(Tensor t, bool requires_grad = true) {
    return push(std::move(t), {}, nullptr, requires_grad, "leaf");
  }

  // Named differentiable leaf; reported by backward() under `name`.
  Var parameter(Tensor t, std::string name) {
    Var v = push(std::move(t), {}, nullptr, true, "parameter");
    nodes_[v.id_].param_name = std::move(name);
    return v;
  }

  // Records an op output. `fn` runs only if some input requires a gradient.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn,
             const char* op) {
    bool rg = false;
    for (std::size_t i : inputs) rg = rg || nodes_.at(i).requires_grad;
    return push(std::move(value), std::move(inputs), rg ? std::move(fn) : nullptr,
                rg, op);
  }

  GradTable backward(Var loss) {
    if (loss.tape_ != this) throw UsageError("backward: loss belongs to another tape");
    if (loss.value().size() != 1 || loss.value().rank() != 0)
      throw UsageError("backward: loss must be a scalar, got shape " +
                       shape_str(loss.value().shape()));
    if (backward_done_) throw UsageError("backward: tape already consumed");
    backward_done_ = true;
    if (!nodes_[loss.id_].requires_grad) return {};
    grad_buffer(loss.id_)[0] = 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.fn && n.has_grad) n.fn(*this, i);
    }
    GradTable out;
    for (auto& n : nodes_) {
      if (n.param_name.empty()) continue;
      if (n.has_grad)
        out.emplace(n.param_name, n.grad);
      else
        out.emplace(n.param_name, Tensor::zeros(n.value.shape()));
    }
    return out;
  }

  // Gradient reaching `v` during backward, or nullptr if none did.
  const Tensor* grad(Var v) const {
    const Node& n = nodes_.at(v.id_);
    return n.has_grad ? &n.grad : nullptr;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // Helpers for op implementations.
  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }
  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t input(std::size_t node, std::size_t k) const { return nodes_[node].inputs[k]; }
  std::size_t input_count(std::size_t node) const { return nodes_[node].inputs.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_[id].op; }
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor::zeros(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }
  // Opaque per-node storage for values saved during forward (e.g. im2col).
  std::vector<double>& saved(std::size_t id) { return nodes_[id].saved; }

 private:
  friend class Var;
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn fn;
    std::vector<double> saved;
    std::string param_name;
    const char* op = "";
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool rg,
           const char* op) {
    if (!value.all_finite())
      throw NumericError(std::string("non-finite value produced by ") + op);
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.fn = std::move(fn);
    n.requires_grad = rg;
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw UsageError("use of an empty Var");
  return tape_->nodes_[id_].value;
}
inline bool Var::requires_grad() const { return tape_->nodes_[id_].requires_grad; }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

inline CMatMap cmat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMatMap(t.data().data(), static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
}
inline MatMap mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

inline Tape& same_tape(std::initializer_list<Var> vs) {
  Tape* t = nullptr;
  for (const Var& v : vs) {
    if (!v.valid()) throw UsageError("use of an empty Var");
    if (t && v.tape() != t) throw UsageError("Vars from different tapes");
    t = v.tape();
  }
  return *t;
}

inline void require_rank(const Var& v, std::size_t r, const char* op) {
  if (v.value().rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) +
                         ", got shape " + shape_str(v.shape()));
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

// out = f(x) elementwise; dx = dout * df(x, f(x)).
template <class F, class DF>
Var unary(Var x, F f, DF df, const char* op) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return tape.record(std::move(out), {x.id()},
                     [df](Tape& t, std::size_t self) {
                       std::size_t xi = t.input(self, 0);
                       if (!t.wants_grad(xi)) return;
                       const Tensor& xv = t.value_of(xi);
                       const Tensor& yv = t.value_of(self);
                       const Tensor& g = t.grad_of(self);
                       Tensor& gx = t.grad_buffer(xi);
                       for (std::size_t i = 0; i < g.size(); ++i)
                         gx[i] += g[i] * df(xv[i], yv[i]);
                     },
                     op);
}

inline double softplus_value(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}
inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense layers

// out[b,o] = sum_i x[b,i] * w[o,i] + bias[o]
inline Var linear(Var x, Var w, Var bias) {
  Tape& tape = detail::same_tape({x, w, bias});
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  detail::require_rank(bias, 1, "linear");
  const std::size_t B = x.shape()[0], I = x.shape()[1], O = w.shape()[0];
  if (w.shape()[1] != I || bias.shape()[0] != O)
    throw DimensionError("linear: x " + shape_str(x.shape()) + ", w " +
                         shape_str(w.shape()) + ", b " + shape_str(bias.shape()));
  Tensor out({B, O});
  auto Y = detail::mat(out, B, O);
  Y.noalias() = detail::cmat(x.value(), B, I) * detail::cmat(w.value(), O, I).transpose();
  Y.rowwise() += detail::cmat(bias.value(), 1, O).row(0);
  return tape.record(
      std::move(out), {x.id(), w.id(), bias.id()},
      [B, I, O](Tape& t, std::size_t self) {
        const std::size_t xi = t.input(self, 0), wi = t.input(self, 1), bi = t.input(self, 2);
        auto G = detail::cmat(t.grad_of(self), B, O);
        if (t.wants_grad(xi))
          detail::mat(t.grad_buffer(xi), B, I).noalias() += G * detail::cmat(t.value_of(wi), O, I);
        if (t.wants_grad(wi))
          detail::mat(t.grad_buffer(wi), O, I).noalias() +=
              G.transpose() * detail::cmat(t.value_of(xi), B, I);
        if (t.wants_grad(bi))
          detail::mat(t.grad_buffer(bi), 1, O).row(0) += G.colwise().sum();
      },
      "linear");
}

// 3x3 cross-correlation with zero padding. x[B,C,H,W], k[F,C,3,3].
inline Var conv2d(Var x, Var k, int stride, int pad) {
  Tape& tape = detail::same_tape({x, k});
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(k, 4, "conv2d");
  if (stride != 1 && stride != 2) throw DimensionError("conv2d: stride must be 1 or 2");
  if (pad != 0 && pad != 1) throw DimensionError("conv2d: pad must be 0 or 1");
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t F = k.shape()[0];
  if (k.shape()[1] != C || k.shape()[2] != 3 || k.shape()[3] != 3)
    throw DimensionError("conv2d: kernel " + shape_str(k.shape()) +
                         " does not conform to input " + shape_str(x.shape()));
  if (H < 3 || W < 3) throw DimensionError("conv2d: spatial dims must be >= 3");
  const std::size_t S = static_cast<std::size_t>(stride), P = static_cast<std::size_t>(pad);
  const std::size_t Ho = (H + 2 * P - 3) / S + 1, Wo = (W + 2 * P - 3) / S + 1;
  const std::size_t CK = C * 9, HWo = Ho * Wo, N = B * HWo;

  // cols[(c,ky,kx), (b,oy,ox)]
  std::vector<double> cols(CK * N, 0.0);
  const Tensor& xv = x.value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = cols.data() + ((c * 3 + ky) * 3 + kx) * N;
        for (std::size_t b = 0; b < B; ++b) {
          const double* img = xv.data().data() + (b * C + c) * H * W;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * S + ky) - static_cast<std::ptrdiff_t>(P);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            double* dst = row + b * HWo + oy * Wo;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * S + kx) - static_cast<std::ptrdiff_t>(P);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) dst[ox] = img[iy * static_cast<std::ptrdiff_t>(W) + ix];
            }
          }
        }
      }
  detail::RowMat prod(static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(N));
  prod.noalias() = detail::cmat(k.value(), F, CK) *
                   detail::CMatMap(cols.data(), static_cast<Eigen::Index>(CK), static_cast<Eigen::Index>(N));
  Tensor out({B, F, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f)
      std::copy_n(prod.data() + f * N + b * HWo, HWo, out.data().data() + (b * F + f) * HWo);

  Var y = tape.record(
      std::move(out), {x.id(), k.id()},
      [=](Tape& t, std::size_t self) {
        const std::size_t xi = t.input(self, 0), ki = t.input(self, 1);
        const Tensor& g = t.grad_of(self);
        detail::RowMat G(static_cast<Eigen::Index>(F), static_cast<Eigen::Index>(N));
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t f = 0; f < F; ++f)
            std::copy_n(g.data().data() + (b * F + f) * HWo, HWo, G.data() + f * N + b * HWo);
        if (t.wants_grad(ki)) {
          std::vector<double>& cols = t.saved(self);
          detail::CMatMap Cm(cols.data(), static_cast<Eigen::Index>(CK), static_cast<Eigen::Index>(N));
          detail::mat(t.grad_buffer(ki), F, CK).noalias() += G * Cm.transpose();
        }
        if (!t.wants_grad(xi)) return;
        detail::RowMat dcols = detail::cmat(t.value_of(ki), F, CK).transpose() * G;
        Tensor& gx = t.grad_buffer(xi);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const double* row = dcols.data() + ((c * 3 + ky) * 3 + kx) * N;
              for (std::size_t b = 0; b < B; ++b) {
                double* img = gx.data().data() + (b * C + c) * H * W;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * S + ky) - static_cast<std::ptrdiff_t>(P);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  const double* src = row + b * HWo + oy * Wo;
                  for (std::size_t ox = 0; ox < Wo; ++ox) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * S + kx) - static_cast<std::ptrdiff_t>(P);
                    if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) img[iy * static_cast<std::ptrdiff_t>(W) + ix] += src[ox];
                  }
                }
              }
            }
      },
      "conv2d");
  if (k.requires_grad()) tape.saved(y.id()) = std::move(cols);
  return y;
}

// Adds bias[c] to every spatial position of channel c. x[B,C,H,W].
inline Var channel_bias(Var x, Var bias) {
  Tape& tape = detail::same_tape({x, bias});
  detail::require_rank(x, 4, "channel_bias");
  detail::require_rank(bias, 1, "channel_bias");
  const std::size_t B = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
  if (bias.shape()[0] != C) throw DimensionError("channel_bias: channel count mismatch");
  Tensor out = x.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double* p = out.data().data() + (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) p[i] += bias.value()[c];
    }
  return tape.record(
      std::move(out), {x.id(), bias.id()},
      [B, C, HW](Tape& t, std::size_t self) {
        const std::size_t xi = t.input(self, 0), bi = t.input(self, 1);
        const Tensor& g = t.grad_of(self);
        if (t.wants_grad(xi)) {
          Tensor& gx = t.grad_buffer(xi);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.wants_grad(bi)) {
          Tensor& gb = t.grad_buffer(bi);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const double* p = g.data().data() + (b * C + c) * HW;
              double s = 0.0;
              for (std::size_t i = 0; i < HW; ++i) s += p[i];
              gb[c] += s;
            }
        }
      },
      "channel_bias");
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var relu(Var x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline Var sigmoid(Var x) {
  return detail::unary(
      x, detail::sigmoid_value, [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

// max(x,0) + log(1 + exp(-|x|)); never overflows.
inline Var softplus(Var x) {
  return detail::unary(
      x, detail::softplus_value, [](double v, double) { return detail::sigmoid_value(v); },
      "softplus");
}

inline Var square(Var x) {
  return detail::unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; }, "square");
}

inline Var scale(Var x, double c) {
  return detail::unary(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; }, "scale");
}

// Gradient is zero outside [lo, hi].
inline Var clamp(Var x, double lo, double hi) {
  return detail::unary(
      x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; }, "clamp");
}

namespace detail {
template <class F>
Var binary(Var a, Var b, F f, double da, double db_sign, bool product, const char* op) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a, b, op);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.value()[i], b.value()[i]);
  return tape.record(
      std::move(out), {a.id(), b.id()},
      [da, db_sign, product](Tape& t, std::size_t self) {
        const std::size_t ai = t.input(self, 0), bi = t.input(self, 1);
        const Tensor& g = t.grad_of(self);
        if (t.wants_grad(ai)) {
          Tensor& ga = t.grad_buffer(ai);
          const Tensor& bv = t.value_of(bi);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (product ? bv[i] : da);
        }
        if (t.wants_grad(bi)) {
          Tensor& gb = t.grad_buffer(bi);
          const Tensor& av = t.value_of(ai);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (product ? av[i] : db_sign);
        }
      },
      op);
}
}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary(a, b, [](double x, double y) { return x + y; }, 1.0, 1.0, false, "add");
}
inline Var sub(Var a, Var b) {
  return detail::binary(a, b, [](double x, double y) { return x - y; }, 1.0, -1.0, false, "sub");
}
inline Var mul(Var a, Var b) {
  return detail::binary(a, b, [](double x, double y) { return x * y; }, 0.0, 0.0, true, "mul");
}

// ---------------------------------------------------------------------------
// Pooling, reductions, shape ops

// Non-overlapping 2x2 average pool. x[B,C,H,W] with even H, W.
inline Var avg_pool2d(Var x, std::size_t window = 2) {
  Tape& tape = *x.tape();
  detail::require_rank(x, 4, "avg_pool2d");
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (window == 0 || H % window || W % window)
    throw DimensionError("avg_pool2d: spatial dims must be divisible by the window");
  const std::size_t Ho = H / window, Wo = W / window;
  const double inv = 1.0 / static_cast<double>(window * window);
  Tensor out({B, C, Ho, Wo});
  const Tensor& xv = x.value();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        out[(bc * Ho + y / window) * Wo + xx / window] += xv[(bc * H + y) * W + xx] * inv;
  return tape.record(
      std::move(out), {x.id()},
      [=](Tape& t, std::size_t self) {
        const std::size_t xi = t.input(self, 0);
        const Tensor& g = t.grad_of(self);
        Tensor& gx = t.grad_buffer(xi);
        for (std::size_t bc = 0; bc < B * C; ++bc)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx)
              gx[(bc * H + y) * W + xx] += g[(bc * Ho + y / window) * Wo + xx / window] * inv;
      },
      "avg_pool2d");
}

// x[B,C,H,W] -> [B,C]
inline Var global_avg_pool(Var x) {
  Tape& tape = *x.tape();
  detail::require_rank(x, 4, "global_avg_pool");
  const std::size_t B = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
  const double inv = 1.0 / static_cast<double>(HW);
  Tensor out({B, C});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* p = x.value().data().data() + bc * HW;
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += p[i];
    out[bc] = s * inv;
  }
  return tape.record(
      std::move(out), {x.id()},
      [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        Tensor& gx = t.grad_buffer(t.input(self, 0));
        for (std::size_t bc = 0; bc < B * C; ++bc)
          for (std::size_t i = 0; i < HW; ++i) gx[bc * HW + i] += g[bc] * inv;
      },
      "global_avg_pool");
}

// Concatenation along `axis`; all other dims must agree.
inline Var concat(Var a, Var b, std::size_t axis) {
  Tape& tape = detail::same_tape({a, b});
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (axis >= sa.size() || sa.size() != sb.size())
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(sa) + " and " + shape_str(sb));
  for (std::size_t i = 0; i < sa.size(); ++i)
    if (i != axis && sa[i] != sb[i]) throw DimensionError("concat: shape mismatch");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sa[i];
  for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  const std::size_t ca = sa[axis] * inner, cb = sb[axis] * inner;
  Shape so = sa;
  so[axis] += sb[axis];
  Tensor out(so);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.value().data().data() + o * ca, ca, out.data().data() + o * (ca + cb));
    std::copy_n(b.value().data().data() + o * cb, cb, out.data().data() + o * (ca + cb) + ca);
  }
  return tape.record(
      std::move(out), {a.id(), b.id()},
      [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const std::size_t ai = t.input(self, 0), bi = t.input(self, 1);
        if (t.wants_grad(ai)) {
          Tensor& ga = t.grad_buffer(ai);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < ca; ++i) ga[o * ca + i] += g[o * (ca + cb) + i];
        }
        if (t.wants_grad(bi)) {
          Tensor& gb = t.grad_buffer(bi);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < cb; ++i) gb[o * cb + i] += g[o * (ca + cb) + ca + i];
        }
      },
      "concat");
}

// Columns [begin, begin+count) of a rank-2 tensor.
inline Var narrow_cols(Var x, std::size_t begin, std::size_t count) {
  Tape& tape = *x.tape();
  detail::require_rank(x, 2, "narrow_cols");
  const std::size_t R = x.shape()[0], C = x.shape()[1];
  if (begin + count > C) throw DimensionError("narrow_cols: range out of bounds");
  Tensor out({R, count});
  for (std::size_t r = 0; r < R; ++r)
    std::copy_n(x.value().data().data() + r * C + begin, count, out.data().data() + r * count);
  return tape.record(
      std::move(out), {x.id()},
      [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        Tensor& gx = t.grad_buffer(t.input(self, 0));
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < count; ++c) gx[r * C + begin + c] += g[r * count + c];
      },
      "narrow_cols");
}

inline Var sum(Var x) {
  Tape& tape = *x.tape();
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return tape.record(
      Tensor::scalar(s), {x.id()},
      [](Tape& t, std::size_t self) {
        const double g = t.grad_of(self)[0];
        Tensor& gx = t.grad_buffer(t.input(self, 0));
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
      },
      "sum");
}

inline Var mean(Var x) {
  Tape& tape = *x.tape();
  if (x.value().size() == 0) throw DimensionError("mean of empty tensor");
  const double inv = 1.0 / static_cast<double>(x.value().size());
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return tape.record(
      Tensor::scalar(s * inv), {x.id()},
      [inv](Tape& t, std::size_t self) {
        const double g = t.grad_of(self)[0] * inv;
        Tensor& gx = t.grad_buffer(t.input(self, 0));
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
      },
      "mean");
}

// ---------------------------------------------------------------------------
// Losses and latent-variable ops

// Mean over all B*K entries of softplus(l) - y*l, i.e. binary cross-entropy on
// sigmoid(l). `targets` entries must be 0 or 1.
inline Var bce_with_logits(Var logits, const Tensor& targets) {
  Tape& tape = *logits.tape();
  detail::require_rank(logits, 2, "bce_with_logits");
  if (targets.shape() != logits.shape())
    throw DimensionError("bce_with_logits: targets " + shape_str(targets.shape()) +
                         " vs logits " + shape_str(logits.shape()));
  for (double y : targets.data())
    if (y != 0.0 && y != 1.0) throw InputError("bce_with_logits: targets must be 0 or 1");
  const Tensor& l = logits.value();
  const double inv = 1.0 / static_cast<double>(l.size());
  double s = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) s += detail::softplus_value(l[i]) - targets[i] * l[i];
  return tape.record(
      Tensor::scalar(s * inv), {logits.id()},
      [targets, inv](Tape& t, std::size_t self) {
        const std::size_t li = t.input(self, 0);
        const double g = t.grad_of(self)[0] * inv;
        const Tensor& l = t.value_of(li);
        Tensor& gl = t.grad_buffer(li);
        for (std::size_t i = 0; i < l.size(); ++i)
          gl[i] += g * (detail::sigmoid_value(l[i]) - targets[i]);
      },
      "bce_with_logits");
}

// KL(q || p) between fully factorized Gaussians given as mean and
// log-variance, each [B,n]. Returns the batch mean of the per-row sum over
// the n dimensions:
//   sum_d 0.5*(lv_p - lv_q) + 0.5*(exp(lv_q - lv_p) + (mu_q - mu_p)^2 * exp(-lv_p)) - 0.5
inline Var gaussian_kl(Var mu_q, Var lv_q, Var mu_p, Var lv_p) {
  Tape& tape = detail::same_tape({mu_q, lv_q, mu_p, lv_p});
  detail::require_rank(mu_q, 2, "gaussian_kl");
  detail::require_same_shape(mu_q, lv_q, "gaussian_kl");
  detail::require_same_shape(mu_q, mu_p, "gaussian_kl");
  detail::require_same_shape(mu_q, lv_p, "gaussian_kl");
  const std::size_t B = mu_q.shape()[0];
  const double inv = 1.0 / static_cast<double>(B);
  const Tensor &mq = mu_q.value(), &vq = lv_q.value(), &mp = mu_p.value(), &vp = lv_p.value();
  double s = 0.0;
  for (std::size_t i = 0; i < mq.size(); ++i) {
    const double dm = mq[i] - mp[i];
    s += 0.5 * (vp[i] - vq[i]) + 0.5 * (std::exp(vq[i] - vp[i]) + dm * dm * std::exp(-vp[i])) - 0.5;
  }
  return tape.record(
      Tensor::scalar(s * inv), {mu_q.id(), lv_q.id(), mu_p.id(), lv_p.id()},
      [inv](Tape& t, std::size_t self) {
        const std::size_t iq = t.input(self, 0), ivq = t.input(self, 1), ip = t.input(self, 2),
                          ivp = t.input(self, 3);
        const double g = t.grad_of(self)[0] * inv;
        const Tensor &mq = t.value_of(iq), &vq = t.value_of(ivq), &mp = t.value_of(ip),
                     &vp = t.value_of(ivp);
        const std::size_t n = mq.size();
        std::vector<double> dmu(n), r(n), sp(n);
        for (std::size_t i = 0; i < n; ++i) {
          dmu[i] = mq[i] - mp[i];
          r[i] = std::exp(vq[i] - vp[i]);
          sp[i] = std::exp(-vp[i]);
        }
        if (t.wants_grad(iq)) {
          Tensor& gq = t.grad_buffer(iq);
          for (std::size_t i = 0; i < n; ++i) gq[i] += g * dmu[i] * sp[i];
        }
        if (t.wants_grad(ivq)) {
          Tensor& gq = t.grad_buffer(ivq);
          for (std::size_t i = 0; i < n; ++i) gq[i] += g * 0.5 * (r[i] - 1.0);
        }
        if (t.wants_grad(ip)) {
          Tensor& gp = t.grad_buffer(ip);
          for (std::size_t i = 0; i < n; ++i) gp[i] -= g * dmu[i] * sp[i];
        }
        if (t.wants_grad(ivp)) {
          Tensor& gp = t.grad_buffer(ivp);
          for (std::size_t i = 0; i < n; ++i)
            gp[i] += g * 0.5 * (1.0 - r[i] - dmu[i] * dmu[i] * sp[i]);
        }
      },
      "gaussian_kl");
}

// KL(q || N(0, I)) = batch mean of 0.5 * sum_d (mu^2 + exp(lv) - lv - 1).
inline Var gaussian_kl_standard(Var mu, Var lv) {
  Tape& tape = detail::same_tape({mu, lv});
  detail::require_rank(mu, 2, "gaussian_kl_standard");
  detail::require_same_shape(mu, lv, "gaussian_kl_standard");
  const double inv = 1.0 / static_cast<double>(mu.shape()[0]);
  double s = 0.0;
  for (std::size_t i = 0; i < mu.value().size(); ++i) {
    const double m = mu.value()[i], v = lv.value()[i];
    s += 0.5 * (m * m + std::exp(v) - v - 1.0);
  }
  return tape.record(
      Tensor::scalar(s * inv), {mu.id(), lv.id()},
      [inv](Tape& t, std::size_t self) {
        const std::size_t mi = t.input(self, 0), vi = t.input(self, 1);
        const double g = t.grad_of(self)[0] * inv;
        if (t.wants_grad(mi)) {
          Tensor& gm = t.grad_buffer(mi);
          const Tensor& m = t.value_of(mi);
          for (std::size_t i = 0; i < m.size(); ++i) gm[i] += g * m[i];
        }
        if (t.wants_grad(vi)) {
          Tensor& gv = t.grad_buffer(vi);
          const Tensor& v = t.value_of(vi);
          for (std::size_t i = 0; i < v.size(); ++i) gv[i] += g * 0.5 * (std::exp(v[i]) - 1.0);
        }
      },
      "gaussian_kl_standard");
}

// z = mu + exp(0.5 * log_var) * eps. `eps` is a constant: no gradient flows to it.
inline Var reparameterize(Var mu, Var log_var, const Tensor& eps) {
  Tape& tape = detail::same_tape({mu, log_var});
  detail::require_same_shape(mu, log_var, "reparameterize");
  if (eps.shape() != mu.shape()) throw DimensionError("reparameterize: eps shape mismatch");
  Tensor out(mu.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = mu.value()[i] + std::exp(0.5 * log_var.value()[i]) * eps[i];
  return tape.record(
      std::move(out), {mu.id(), log_var.id()},
      [eps](Tape& t, std::size_t self) {
        const std::size_t mi = t.input(self, 0), vi = t.input(self, 1);
        const Tensor& g = t.grad_of(self);
        if (t.wants_grad(mi)) {
          Tensor& gm = t.grad_buffer(mi);
          for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
        }
        if (t.wants_grad(vi)) {
          Tensor& gv = t.grad_buffer(vi);
          const Tensor& v = t.value_of(vi);
          for (std::size_t i = 0; i < g.size(); ++i)
            gv[i] += g[i] * 0.5 * std::exp(0.5 * v[i]) * eps[i];
        }
      },
      "reparameterize");
}

}  // namespace pinf
