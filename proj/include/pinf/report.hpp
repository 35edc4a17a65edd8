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
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "pinf/dataset.hpp"
#include "pinf/evaluate.hpp"
#include "pinf/gradcam.hpp"
#include "pinf/metrics.hpp"

// CAM/annotation similarity comparison between a base and a fine-tuned model
// over annotated images.
namespace pinf {

struct DeltaSRow {
  std::size_t image_id = 0;
  CamSimilarityReport sim;
};

struct DeltaSReport {
  std::vector<DeltaSRow> rows;
  std::size_t skipped = 0;  // images without any present label
  double mean_delta_mse_pct = 0, mean_delta_dice_pct = 0;
};

inline constexpr const char* kDeltaSHeader = "image_id,mse_base,mse_sub,dice_base,dice_sub,delta_mse_pct,delta_dice_pct";

// Pixelwise maximum of the class CAMs over the labels present in `targets`.
// Returns nothing when no label is present.
inline std::optional<CamMap> present_class_cam(const ModelParams& params, const Tensor& image,
                                               std::span<const double> targets) {
  std::optional<CamMap> out;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    if (targets[k] < 0.5) continue;
    CamMap cam = grad_cam(params, image, k);
    if (!out) {
      out = std::move(cam);
    } else {
      for (std::size_t i = 0; i < cam.values.size(); ++i) out->values[i] = std::max(out->values[i], cam.values[i]);
    }
  }
  return out;
}

// Per-image deltas over split.annotated (maps parallel to it), averaged
// arithmetically. Images are processed on `threads` workers with fixed
// output order.
inline DeltaSReport delta_s_report(const ModelParams& base, const ModelParams& sub, const DatasetSplit& split,
                                   const std::vector<AnnotationMap>& maps, double tau = 0.5,
                                   std::size_t threads = 1) {
  if (maps.size() != split.annotated.size()) throw InputError("delta report: one map per annotated image required");
  if (!(base.config() == sub.config())) throw ConfigError("delta report: checkpoints have different model configs");
  const std::size_t n = split.annotated.size();
  std::vector<std::optional<CamSimilarityReport>> sims(n);
  auto work = [&](std::size_t i) {
    const std::size_t id = split.annotated[i];
    const std::size_t one[1] = {id};
    const Tensor image = split.data.images(one);
    const Tensor target = split.data.targets(one);
    auto cb = present_class_cam(base, image, target.data());
    if (!cb) return;
    auto cs = present_class_cam(sub, image, target.data());
    sims[i] = cam_similarity_delta(maps[i], *cb, *cs, tau);
  };
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t t_count = std::min(threads, n);
    for (std::size_t t = 0; t < t_count; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < n; i += t_count) work(i);
      });
  }
  DeltaSReport r;
  for (std::size_t i = 0; i < n; ++i) {
    if (!sims[i]) {
      ++r.skipped;
      continue;
    }
    r.rows.push_back({split.annotated[i], *sims[i]});
    r.mean_delta_mse_pct += sims[i]->delta_mse_pct;
    r.mean_delta_dice_pct += sims[i]->delta_dice_pct;
  }
  if (!r.rows.empty()) {
    r.mean_delta_mse_pct /= static_cast<double>(r.rows.size());
    r.mean_delta_dice_pct /= static_cast<double>(r.rows.size());
  }
  return r;
}

inline std::string delta_s_csv(const DeltaSReport& r) {
  std::string out = std::string(kDeltaSHeader) + "\n";
  for (const auto& row : r.rows) {
    const auto& s = row.sim;
    out += std::to_string(row.image_id) + "," + format_metric(s.mse_base) + "," + format_metric(s.mse_sub) + "," +
           format_metric(s.dice_base) + "," + format_metric(s.dice_sub) + "," + format_metric(s.delta_mse_pct) +
           "," + format_metric(s.delta_dice_pct) + "\n";
  }
  return out;
}

}  // namespace pinf
