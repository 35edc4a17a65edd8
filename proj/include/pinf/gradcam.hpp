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
#include <vector>

#include "pinf/metrics.hpp"
#include "pinf/model.hpp"

// Grad-CAM on the last convolutional activation, evaluation mode (z = mu).
namespace pinf {

struct CamWeights {
  Tensor feat_map;               // [C,h,w]
  std::vector<double> channel;   // alpha_k = spatial mean of d logit / d feat_map_k
  double logit = 0.0;
};

// Class logit computed from a given last-layer activation [1,C,h,w].
inline Var logit_from_features(const BoundParams& p, Var feat_map, std::size_t class_index) {
  Var feat_vec = global_avg_pool(feat_map);
  Var logits = classify(p, posterior(p, feat_vec).mu, feat_vec);
  Tensor pick = Tensor::zeros(logits.shape());
  pick[class_index] = 1.0;
  return sum(mul(logits, logits.tape()->constant(std::move(pick))));
}

inline void check_cam_inputs(const ModelParams& params, const Tensor& image, std::size_t class_index) {
  const ModelConfig& cfg = params.config();
  if (class_index >= cfg.num_labels)
    throw InputError("class index " + std::to_string(class_index) + " out of range (K=" +
                     std::to_string(cfg.num_labels) + ")");
  if (image.shape() != Shape{1, 1, cfg.image_size, cfg.image_size})
    throw DimensionError("grad_cam: expected a single [1,1,H,W] image, got " + shape_str(image.shape()));
}

inline CamWeights cam_channel_weights(const ModelParams& params, const Tensor& image,
                                      std::size_t class_index) {
  check_cam_inputs(params, image, class_index);
  Tape tape;
  BoundParams p(tape, params, false);
  Tensor fm = encode(p, tape.constant(image)).feat_map.value();
  Var a = tape.leaf(fm);
  Var logit = logit_from_features(p, a, class_index);
  tape.backward(logit);
  const std::size_t C = fm.dim(1), HW = fm.dim(2) * fm.dim(3);
  CamWeights w;
  w.logit = logit.value().item();
  w.channel.assign(C, 0.0);
  if (const Tensor* g = tape.grad(a))
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < HW; ++i) s += (*g)[c * HW + i];
      w.channel[c] = s / static_cast<double>(HW);
    }
  w.feat_map = fm.reshaped({C, fm.dim(2), fm.dim(3)});
  return w;
}

// Bilinear resize with half-pixel centers, edges clamped.
inline std::vector<double> bilinear_resize(const std::vector<double>& src, std::size_t sh, std::size_t sw,
                                           std::size_t dh, std::size_t dw) {
  std::vector<double> out(dh * dw);
  auto coord = [](std::size_t d, std::size_t s_len, std::size_t d_len, std::size_t& i0, std::size_t& i1,
                  double& frac) {
    double s = (static_cast<double>(d) + 0.5) * static_cast<double>(s_len) / static_cast<double>(d_len) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(s_len - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, s_len - 1);
    frac = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < dh; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, sh, dh, y0, y1, fy);
    for (std::size_t x = 0; x < dw; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, sw, dw, x0, x1, fx);
      const double top = src[y0 * sw + x0] * (1 - fx) + src[y0 * sw + x1] * fx;
      const double bot = src[y1 * sw + x0] * (1 - fx) + src[y1 * sw + x1] * fx;
      out[y * dw + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

// relu(sum_k alpha_k * A_k), upsampled to the image size and peak-normalized.
inline CamMap grad_cam(const ModelParams& params, const Tensor& image, std::size_t class_index) {
  CamWeights w = cam_channel_weights(params, image, class_index);
  const std::size_t C = w.feat_map.dim(0), h = w.feat_map.dim(1), fw = w.feat_map.dim(2);
  std::vector<double> raw(h * fw, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < h * fw; ++i) raw[i] += w.channel[c] * w.feat_map[c * h * fw + i];
  for (double& v : raw) v = std::max(v, 0.0);
  const std::size_t H = params.config().image_size;
  CamMap cam(H, H);
  if (std::all_of(raw.begin(), raw.end(), [](double v) { return v == 0.0; })) return cam;
  cam.values = bilinear_resize(raw, h, fw, H, H);
  detail::peak_normalize(cam);
  return cam;
}

}  // namespace pinf
