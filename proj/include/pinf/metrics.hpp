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
#include <numeric>
#include <optional>
#include <vector>

#include "pinf/error.hpp"
#include "pinf/raster.hpp"
#include "pinf/tensor.hpp"

// Multi-label classification metrics and annotation/CAM similarity.
namespace pinf {

namespace detail {

inline void check_score_label_shapes(const Tensor& scores, const Tensor& labels) {
  if (scores.rank() != 2 || scores.shape() != labels.shape())
    throw DimensionError("metrics: scores " + shape_str(scores.shape()) + " vs labels " +
                         shape_str(labels.shape()));
}

}  // namespace detail

// ROC-AUC of one column via the Mann-Whitney rank statistic, ties counted
// half. nullopt when the column lacks positives or negatives.
inline std::optional<double> binary_auc(const std::vector<double>& scores,
                                        const std::vector<double>& labels) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0.0) {
        rank_sum += avg_rank;
        pos += 1;
      }
    i = j;
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

struct AucReport {
  std::vector<std::optional<double>> per_class;  // nullopt: class skipped
  double macro = 0.0;
  std::size_t valid_classes = 0;
};

inline AucReport auc_report(const Tensor& scores, const Tensor& labels) {
  detail::check_score_label_shapes(scores, labels);
  const std::size_t B = scores.dim(0), K = scores.dim(1);
  AucReport r;
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> s(B), l(B);
    for (std::size_t b = 0; b < B; ++b) {
      s[b] = scores.at(b, k);
      l[b] = labels.at(b, k);
    }
    r.per_class.push_back(binary_auc(s, l));
    if (r.per_class.back()) {
      total += *r.per_class.back();
      ++r.valid_classes;
    }
  }
  if (r.valid_classes == 0)
    throw InputError("macro_auc: no class has both positive and negative examples");
  r.macro = total / static_cast<double>(r.valid_classes);
  return r;
}

inline double macro_auc(const Tensor& scores, const Tensor& labels) {
  return auc_report(scores, labels).macro;
}

// F1 with predictions score >= threshold. A class with no positives either
// predicted or present scores 1.0.
inline std::vector<double> per_class_f1(const Tensor& scores, const Tensor& labels,
                                        double threshold = 0.5) {
  detail::check_score_label_shapes(scores, labels);
  const std::size_t B = scores.dim(0), K = scores.dim(1);
  std::vector<double> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const bool pred = scores.at(b, k) >= threshold, truth = labels.at(b, k) != 0.0;
      tp += pred && truth;
      fp += pred && !truth;
      fn += !pred && truth;
    }
    out[k] = (tp + fp + fn == 0) ? 1.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return out;
}

inline double f1_macro(const Tensor& scores, const Tensor& labels, double threshold = 0.5) {
  auto f = per_class_f1(scores, labels, threshold);
  return std::accumulate(f.begin(), f.end(), 0.0) / static_cast<double>(f.size());
}

// ---------------------------------------------------------------------------
// Map similarity

using CamMap = AnnotationMap;

inline void check_same_dims(const AnnotationMap& a, const AnnotationMap& b) {
  if (a.width != b.width || a.height != b.height || a.values.size() != b.values.size())
    throw DimensionError("map dimensions differ: " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                         std::to_string(b.width));
}

inline double map_mse(const AnnotationMap& a, const AnnotationMap& b) {
  check_same_dims(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return s / static_cast<double>(a.values.size());
}

// Dice of the masks {v >= tau}; two empty masks score 1.
inline double map_dice(const AnnotationMap& a, const AnnotationMap& b, double tau = 0.5) {
  check_same_dims(a, b);
  double inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const bool pa = a.values[i] >= tau, pb = b.values[i] >= tau;
    inter += pa && pb;
    na += pa;
    nb += pb;
  }
  return (na + nb == 0) ? 1.0 : 2.0 * inter / (na + nb);
}

struct CamSimilarityReport {
  double mse_base = 0, mse_sub = 0, dice_base = 0, dice_sub = 0;
  double delta_mse_pct = 0, delta_dice_pct = 0;
};

inline constexpr double kSimilarityEps = 1e-12;

// Percent change in annotation/CAM similarity from the base to the fine-tuned
// model, oriented so that positive means the fine-tuned CAM is closer:
//   delta_mse  = (mse_base / mse_sub - 1) * 100
//   delta_dice = (dice_sub / dice_base - 1) * 100
// with denominators floored at kSimilarityEps. When both raw values are at
// or below kSimilarityEps (e.g. zero Dice before and after) the ratio is
// undefined and the delta is 0, so an unchanged CAM always scores 0.
inline double percent_change(double num, double den) {
  if (num <= kSimilarityEps && den <= kSimilarityEps) return 0.0;
  return (num / std::max(den, kSimilarityEps) - 1.0) * 100.0;
}

inline CamSimilarityReport delta_from_raw(double mse_base, double mse_sub, double dice_base,
                                          double dice_sub) {
  CamSimilarityReport r{mse_base, mse_sub, dice_base, dice_sub, 0, 0};
  r.delta_mse_pct = percent_change(mse_base, mse_sub);
  r.delta_dice_pct = percent_change(dice_sub, dice_base);
  return r;
}

inline CamSimilarityReport cam_similarity_delta(const AnnotationMap& annotation, const CamMap& cam_base,
                                                const CamMap& cam_sub, double tau = 0.5) {
  check_same_dims(annotation, cam_base);
  check_same_dims(annotation, cam_sub);
  return delta_from_raw(map_mse(annotation, cam_base), map_mse(annotation, cam_sub),
                        map_dice(annotation, cam_base, tau), map_dice(annotation, cam_sub, tau));
}

}  // namespace pinf
