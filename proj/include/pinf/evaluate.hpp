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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "pinf/dataset.hpp"
#include "pinf/metrics.hpp"
#include "pinf/model.hpp"

namespace pinf {

// Evaluation-mode probabilities for data[idx], computed in fixed-size chunks.
// Chunks may run on `threads` workers; each writes its own rows, so the output
// does not depend on the worker count.
inline Tensor predict_dataset(const ModelParams& params, const ImageSet& data,
                              std::span<const std::size_t> idx, std::size_t threads = 1,
                              std::size_t chunk = 128) {
  const std::size_t N = idx.size(), K = params.config().num_labels;
  Tensor probs({N, K});
  const std::size_t nchunks = (N + chunk - 1) / chunk;
  auto work = [&](std::size_t c) {
    const std::size_t b = c * chunk, e = std::min(N, b + chunk);
    Tensor p = predict_proba(params, data.images(idx.subspan(b, e - b)));
    std::copy(p.data().begin(), p.data().end(), probs.data().begin() + static_cast<std::ptrdiff_t>(b * K));
  };
  if (threads <= 1 || nchunks <= 1) {
    for (std::size_t c = 0; c < nchunks; ++c) work(c);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < std::min(threads, nchunks); ++t)
      pool.emplace_back([&, t] {
        for (std::size_t c = t; c < nchunks; c += threads) work(c);
      });
  }
  return probs;
}

struct EvalReport {
  std::vector<std::optional<double>> auc;  // per class; nullopt when undefined
  std::vector<double> f1;
  double macro_auc = std::numeric_limits<double>::quiet_NaN();
  double macro_f1 = 0.0;
};

inline EvalReport evaluate_scores(const Tensor& probs, const Tensor& labels) {
  EvalReport r;
  r.f1 = per_class_f1(probs, labels);
  r.macro_f1 = f1_macro(probs, labels);
  try {
    AucReport a = auc_report(probs, labels);
    r.auc = a.per_class;
    r.macro_auc = a.macro;
  } catch (const InputError&) {
    r.auc.assign(probs.dim(1), std::nullopt);
  }
  return r;
}

inline EvalReport evaluate(const ModelParams& params, const ImageSet& data,
                           std::span<const std::size_t> idx, std::size_t threads = 1) {
  return evaluate_scores(predict_dataset(params, data, idx, threads), data.targets(idx));
}

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// "class_index,auc,f1" rows, then "macro,<auc>,<f1>". Undefined per-class
// AUCs are written as "nan" and excluded from the macro value.
inline std::string eval_csv(const EvalReport& r) {
  std::string s = "class_index,auc,f1\n";
  for (std::size_t k = 0; k < r.f1.size(); ++k)
    s += std::to_string(k) + "," +
         format_metric(r.auc[k] ? *r.auc[k] : std::numeric_limits<double>::quiet_NaN()) + "," +
         format_metric(r.f1[k]) + "\n";
  s += "macro," + format_metric(r.macro_auc) + "," + format_metric(r.macro_f1) + "\n";
  return s;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace pinf
