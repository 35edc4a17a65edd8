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
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "pinf/autodiff.hpp"

namespace pinf {

// Worst disagreement between reverse-mode and finite-difference gradients.
struct GradCheckResult {
  double max_error = 0.0;  // relative, or absolute where both sides are tiny
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t step_reductions = 0;  // components whose step was shrunk to stay off a kink
};

struct GradCheckOptions {
  double step = 1e-5;
  double abs_floor = 1e-8;
  // 2: (f(x+h) - f(x-h)) / 2h.
  // 4: (f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h.
  int order = 2;
  // Shrink the step (by 4x, up to max_reductions times) until no relu or
  // clamp input changes branch across the stencil, so the difference is
  // taken on a single smooth piece.
  bool avoid_kinks = false;
  int max_reductions = 10;
};

using ScalarGraph = std::function<Var(Tape&, std::span<const Var>)>;

namespace detail {

// Branch taken by every relu / clamp element on a tape.
inline std::vector<std::int8_t> branch_pattern(const Tape& tape) {
  std::vector<std::int8_t> p;
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const std::string_view op = tape.op_name(i);
    if (op == "relu") {
      for (double v : tape.value_of(tape.input(i, 0)).data()) p.push_back(v > 0.0);
    } else if (op == "clamp") {
      const Tensor& in = tape.value_of(tape.input(i, 0));
      const Tensor& out = tape.value_of(i);
      for (std::size_t k = 0; k < in.size(); ++k)
        p.push_back(out[k] == in[k] ? 0 : (out[k] < in[k] ? 1 : -1));
    }
  }
  return p;
}

}  // namespace detail

// Compares d f / d inputs from backward() with central differences for every
// scalar entry of every input. Components where both values are below
// `abs_floor` in magnitude are compared absolutely.
inline GradCheckResult check_gradients(const ScalarGraph& f, std::vector<Tensor> inputs,
                                       const GradCheckOptions& opt) {
  if (opt.order != 2 && opt.order != 4) throw UsageError("gradcheck: order must be 2 or 4");
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    Var out = f(tape, vars);
    tape.backward(out);
    for (const Var& v : vars) {
      const Tensor* g = tape.grad(v);
      analytic.push_back(g ? *g : Tensor::zeros(v.shape()));
    }
  }
  std::vector<std::int8_t> base_pattern;
  auto eval = [&](const std::vector<Tensor>& in, std::vector<std::int8_t>* pattern) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : in) vars.push_back(tape.constant(t));
    const double v = f(tape, vars).value().item();
    if (pattern) *pattern = detail::branch_pattern(tape);
    return v;
  };
  if (opt.avoid_kinks) eval(inputs, &base_pattern);

  GradCheckResult worst;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      const std::vector<int> offsets = opt.order == 2 ? std::vector<int>{1, -1} : std::vector<int>{2, 1, -1, -2};
      double h = opt.step, num = 0.0;
      for (int attempt = 0;; ++attempt) {
        std::vector<double> fv;
        bool smooth = true;
        for (int o : offsets) {
          inputs[k][i] = orig + o * h;
          std::vector<std::int8_t> pat;
          fv.push_back(eval(inputs, opt.avoid_kinks ? &pat : nullptr));
          if (opt.avoid_kinks && pat != base_pattern) smooth = false;
        }
        inputs[k][i] = orig;
        num = opt.order == 2 ? (fv[0] - fv[1]) / (2.0 * h)
                             : (-fv[0] + 8.0 * fv[1] - 8.0 * fv[2] + fv[3]) / (12.0 * h);
        if (smooth || attempt >= opt.max_reductions) break;
        h /= 4.0;
        if (attempt == 0) ++worst.step_reductions;
      }
      const double ana = analytic[k][i];
      const double scale = std::max(std::abs(num), std::abs(ana));
      const double err = scale < opt.abs_floor ? std::abs(num - ana) : std::abs(num - ana) / scale;
      if (err > worst.max_error || (k == 0 && i == 0)) {
        const std::size_t red = worst.step_reductions;
        worst = {err, k, i, ana, num, red};
      }
    }
  }
  return worst;
}

inline GradCheckResult check_gradients(const ScalarGraph& f, std::vector<Tensor> inputs,
                                       double h = 1e-5, double abs_floor = 1e-8) {
  GradCheckOptions opt;
  opt.step = h;
  opt.abs_floor = abs_floor;
  return check_gradients(f, std::move(inputs), opt);
}

}  // namespace pinf
