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

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pinf/raster.hpp"
#include "pinf/tensor.hpp"

namespace pinf {

// N square 8-bit grayscale images with K-dim multi-label targets.
struct ImageSet {
  std::size_t image_size = 0;
  std::size_t num_labels = 0;
  std::vector<std::uint8_t> pixels;  // N * S * S
  std::vector<std::uint8_t> labels;  // N * K, entries 0/1

  std::size_t size() const { return image_size ? pixels.size() / (image_size * image_size) : 0; }

  double pixel(std::size_t i, std::size_t y, std::size_t x) const {
    return pixels[(i * image_size + y) * image_size + x] / 255.0;
  }

  // [B,1,S,S] in [0,1].
  Tensor images(std::span<const std::size_t> idx) const {
    const std::size_t px = image_size * image_size;
    Tensor t({idx.size(), 1, image_size, image_size});
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (std::size_t i = 0; i < px; ++i) t[b * px + i] = pixels[idx[b] * px + i] / 255.0;
    return t;
  }

  // [B,K] of 0/1.
  Tensor targets(std::span<const std::size_t> idx) const {
    Tensor t({idx.size(), num_labels});
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (std::size_t k = 0; k < num_labels; ++k) t[b * num_labels + k] = labels[idx[b] * num_labels + k];
    return t;
  }
};

struct Annotation {
  std::vector<FixationRecord> fixations;
  std::vector<BoundingBox> boxes;
};

enum class AnnotationKind { gaze, bbox };

inline AnnotationKind annotation_kind_from_name(const std::string& s) {
  if (s == "gaze") return AnnotationKind::gaze;
  if (s == "bbox") return AnnotationKind::bbox;
  throw ConfigError("annotation kind must be \"gaze\" or \"bbox\", got \"" + s + "\"");
}

// The base set with validation/test carve-outs, plus the annotated subset
// (identified by base-set index, always inside `train`).
struct DatasetSplit {
  ImageSet data;
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::vector<std::size_t> annotated;
  std::vector<Annotation> annotations;  // parallel to `annotated`

  void validate() const {
    const std::size_t n = data.size();
    std::vector<int> role(n, 0);
    auto mark = [&](const std::vector<std::size_t>& v, int r, const char* what) {
      for (std::size_t i : v) {
        if (i >= n) throw InputError(std::string(what) + " index out of range");
        if (role[i]) throw InputError(std::string(what) + " overlaps another split");
        role[i] = r;
      }
    };
    mark(train, 1, "train");
    mark(val, 2, "val");
    mark(test, 3, "test");
    for (std::size_t i : annotated)
      if (i >= n || role[i] != 1) throw InputError("annotated subset must lie inside the training split");
    if (annotations.size() != annotated.size()) throw InputError("annotation list size mismatch");
  }
};

// Rasterized annotation maps for the annotated subset, as a [N_S,1,S,S] tensor.
inline std::vector<AnnotationMap> annotation_maps(const DatasetSplit& split, AnnotationKind kind,
                                                  const RasterConfig& cfg) {
  const std::size_t S = split.data.image_size;
  std::vector<AnnotationMap> maps;
  maps.reserve(split.annotations.size());
  for (const auto& a : split.annotations)
    maps.push_back(kind == AnnotationKind::gaze ? rasterize_gaze(a.fixations, S, S, cfg)
                                                : rasterize_bboxes(a.boxes, S, S, cfg));
  return maps;
}

inline Tensor maps_to_tensor(const std::vector<AnnotationMap>& maps, std::span<const std::size_t> idx) {
  if (maps.empty()) throw InputError("no annotation maps");
  const std::size_t H = maps[0].height, W = maps[0].width;
  Tensor t({idx.size(), 1, H, W});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& m = maps.at(idx[b]);
    std::copy(m.values.begin(), m.values.end(), t.data().begin() + static_cast<std::ptrdiff_t>(b * H * W));
  }
  return t;
}

}  // namespace pinf
