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
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "pinf/error.hpp"
#include "pinf/pgm.hpp"

// Rasterization of object-level annotations (gaze fixations, bounding boxes)
// into [0,1] pseudo-segmentation maps.
namespace pinf {

struct FixationRecord {
  int x_px = 0;
  int y_px = 0;
  double duration_s = 0.0;
  friend bool operator==(const FixationRecord&, const FixationRecord&) = default;
};

// Inclusive pixel bounds.
struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int label_index = 0;
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct RasterConfig {
  double gaze_sigma_multiplier = 10.0;  // sigma (px) per second of fixation
  double bbox_edge_sigma = 5.0;         // px
  double gaussian_truncation = 4.0;     // kernel support radius in sigmas

  void validate() const {
    if (!(gaze_sigma_multiplier > 0) || !(bbox_edge_sigma > 0) || !(gaussian_truncation > 0))
      throw ConfigError("raster: all parameters must be strictly positive");
  }
};

// H x W map with values in [0,1], row-major.
struct AnnotationMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;

  AnnotationMap() = default;
  AnnotationMap(std::size_t h, std::size_t w) : width(w), height(h), values(h * w, 0.0) {}

  double& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  double max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }

  friend bool operator==(const AnnotationMap&, const AnnotationMap&) = default;
};

namespace detail {

inline void peak_normalize(AnnotationMap& m) {
  const double peak = m.max();
  if (peak <= 0.0) return;
  for (double& v : m.values) v /= peak;
}

}  // namespace detail

// Sum of isotropic Gaussians, one per fixation, with sigma = multiplier *
// duration, each truncated to |dx|, |dy| <= truncation * sigma; then divided
// by the peak. Fixations are summed in a canonical order so the result does
// not depend on the input order.
inline AnnotationMap rasterize_gaze(std::vector<FixationRecord> fixations, std::size_t height,
                                    std::size_t width, const RasterConfig& cfg = {}) {
  cfg.validate();
  for (std::size_t i = 0; i < fixations.size(); ++i) {
    const auto& f = fixations[i];
    if (f.x_px < 0 || f.y_px < 0 || static_cast<std::size_t>(f.x_px) >= width ||
        static_cast<std::size_t>(f.y_px) >= height || !(f.duration_s > 0.0))
      throw InputError("fixation " + std::to_string(i) + " out of bounds or non-positive duration");
  }
  std::sort(fixations.begin(), fixations.end(), [](const auto& a, const auto& b) {
    return std::tie(a.y_px, a.x_px, a.duration_s) < std::tie(b.y_px, b.x_px, b.duration_s);
  });
  AnnotationMap m(height, width);
  for (const auto& f : fixations) {
    const double sigma = cfg.gaze_sigma_multiplier * f.duration_s;
    const double reach = cfg.gaussian_truncation * sigma;
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    const long r = static_cast<long>(std::floor(reach));
    const long y_lo = std::max(0L, f.y_px - r), y_hi = std::min<long>(height - 1, f.y_px + r);
    const long x_lo = std::max(0L, f.x_px - r), x_hi = std::min<long>(width - 1, f.x_px + r);
    for (long y = y_lo; y <= y_hi; ++y) {
      const double dy = static_cast<double>(y - f.y_px);
      for (long x = x_lo; x <= x_hi; ++x) {
        const double dx = static_cast<double>(x - f.x_px);
        m.at(y, x) += std::exp(-(dx * dx + dy * dy) * inv2s2);
      }
    }
  }
  detail::peak_normalize(m);
  return m;
}

inline void validate_box(const BoundingBox& b, std::size_t height, std::size_t width, std::size_t index) {
  if (b.x0 < 0 || b.y0 < 0 || b.x0 > b.x1 || b.y0 > b.y1 ||
      static_cast<std::size_t>(b.x1) >= width || static_cast<std::size_t>(b.y1) >= height)
    throw InputError("bounding box " + std::to_string(index) + " malformed or out of bounds");
}

// Union mask of the box interiors smoothed by a truncated isotropic Gaussian,
// then peak-normalized. The smoothing is a normalized convolution: kernel
// weights falling outside the image are dropped and the remaining weights
// renormalized, so a constant mask stays constant up to the border.
inline AnnotationMap rasterize_bboxes(const std::vector<BoundingBox>& boxes, std::size_t height,
                                      std::size_t width, const RasterConfig& cfg = {}) {
  cfg.validate();
  AnnotationMap m(height, width);
  for (std::size_t i = 0; i < boxes.size(); ++i) validate_box(boxes[i], height, width, i);
  if (boxes.empty()) return m;
  std::vector<double> mask(height * width, 0.0);
  for (const auto& b : boxes)
    for (int y = b.y0; y <= b.y1; ++y)
      for (int x = b.x0; x <= b.x1; ++x) mask[static_cast<std::size_t>(y) * width + x] = 1.0;

  const double sigma = cfg.bbox_edge_sigma;
  const long r = static_cast<long>(std::floor(cfg.gaussian_truncation * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  for (long d = -r; d <= r; ++d)
    k[static_cast<std::size_t>(d + r)] = std::exp(-static_cast<double>(d * d) / (2.0 * sigma * sigma));

  // Separable pass along one axis of length n with stride `step` over `count` lines.
  auto pass = [&](const std::vector<double>& in, std::size_t n, std::size_t lines, bool rows) {
    std::vector<double> out(in.size(), 0.0);
    for (std::size_t line = 0; line < lines; ++line)
      for (long i = 0; i < static_cast<long>(n); ++i) {
        double s = 0.0, wsum = 0.0;
        for (long d = -r; d <= r; ++d) {
          const long j = i + d;
          if (j < 0 || j >= static_cast<long>(n)) continue;
          const double w = k[static_cast<std::size_t>(d + r)];
          const std::size_t idx = rows ? line * width + static_cast<std::size_t>(j)
                                       : static_cast<std::size_t>(j) * width + line;
          s += w * in[idx];
          wsum += w;
        }
        const std::size_t o = rows ? line * width + static_cast<std::size_t>(i)
                                   : static_cast<std::size_t>(i) * width + line;
        out[o] = s / wsum;
      }
    return out;
  };
  m.values = pass(pass(mask, width, height, true), height, width, false);
  detail::peak_normalize(m);
  return m;
}

// ---------------------------------------------------------------------------
// File formats

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const char* end = t.data() + t.size();
  auto [p, ec] = std::from_chars(t.data(), end, out);
  return ec == std::errc() && p == end;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> f;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      f.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  f.push_back(cur);
  return f;
}

}  // namespace detail

inline constexpr const char* kFixationHeader = "x,y,duration_s";

// CSV with header "x,y,duration_s". Blank lines are ignored.
inline std::vector<FixationRecord> parse_fixation_log(std::istream& in, const std::string& name) {
  std::vector<FixationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t == kFixationHeader) {
      if (header) throw FormatError(name + ":" + std::to_string(lineno) + ": duplicate header");
      header = true;
      continue;
    }
    if (!header) throw ParseError(name, lineno, "expected header \"x,y,duration_s\"");
    auto f = detail::split_csv(t);
    FixationRecord r;
    if (f.size() != 3 || !detail::parse_number(f[0], r.x_px) || !detail::parse_number(f[1], r.y_px) ||
        !detail::parse_number(f[2], r.duration_s))
      throw ParseError(name, lineno, "malformed fixation record \"" + t + "\"");
    if (!(r.duration_s > 0.0)) throw ParseError(name, lineno, "duration must be > 0");
    out.push_back(r);
  }
  if (!header) throw FormatError(name + ": missing header");
  return out;
}

inline std::vector<FixationRecord> load_fixation_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_fixation_log(in, path.string());
}

inline void save_fixation_log(const std::vector<FixationRecord>& fixations,
                              const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << kFixationHeader << '\n';
  char buf[64];
  for (const auto& f : fixations) {
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, f.duration_s);
    out << f.x_px << ',' << f.y_px << ',' << std::string(buf, p) << '\n';
  }
}

// JSON array of {"x0","y0","x1","y1","label"} integer objects.
inline std::vector<BoundingBox> parse_bbox_json(const std::string& text, const std::string& name) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(name, 0, e.what());
  }
  if (!j.is_array()) throw FormatError(name + ": expected a JSON array");
  std::vector<BoundingBox> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& o = j[i];
    auto get = [&](const char* key) {
      if (!o.is_object() || !o.contains(key) || !o[key].is_number_integer())
        throw FormatError(name + ": box " + std::to_string(i) + " missing integer field \"" + key + "\"");
      return o[key].get<int>();
    };
    BoundingBox b{get("x0"), get("y0"), get("x1"), get("y1"), get("label")};
    if (b.x0 > b.x1 || b.y0 > b.y1 || b.x0 < 0 || b.y0 < 0)
      throw InputError(name + ": box " + std::to_string(i) + " is malformed");
    out.push_back(b);
  }
  return out;
}

inline std::vector<BoundingBox> load_bbox_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_bbox_json(ss.str(), path.string());
}

inline void save_bbox_file(const std::vector<BoundingBox>& boxes, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& b : boxes)
    j.push_back({{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}, {"label", b.label_index}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump() << '\n';
}

// Values quantized to round(v * 255).
inline GrayImage to_gray(const std::vector<double>& values, std::size_t height, std::size_t width) {
  GrayImage img{width, height, {}};
  img.pixels.reserve(values.size());
  for (double v : values) img.pixels.push_back(quantize_unit(v));
  return img;
}

inline void save_map_pgm(const AnnotationMap& m, const std::filesystem::path& path) {
  write_pgm(path, to_gray(m.values, m.height, m.width));
}

inline AnnotationMap load_map_pgm(const std::filesystem::path& path) {
  GrayImage img = read_pgm(path);
  AnnotationMap m(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) m.values[i] = img.pixels[i] / 255.0;
  return m;
}

}  // namespace pinf
