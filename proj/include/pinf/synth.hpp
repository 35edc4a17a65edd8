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
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include <zlib.h>

#include "pinf/evaluate.hpp"
#include "pinf/dataset.hpp"
#include "pinf/pgm.hpp"
#include "pinf/raster.hpp"
#include "pinf/rng.hpp"

// Planted-ROI multi-label benchmark. Each class owns an oriented grating
// motif; a present class stamps its motif at a random location on a noisy
// background. Annotated images also carry the motif bounding boxes and a
// simulated gaze log that dwells on the planted regions.
namespace pinf {

struct SynthSpec {
  std::size_t image_size = 64;
  std::size_t num_classes = 4;
  // Motif geometry and contrast are set so the default encoder reaches a
  // validation macro-AUC of roughly 0.75-0.90 before early stopping.
  std::size_t motif_size = 16;
  double motif_wavelength = 8.0;  // px
  double motif_contrast = 0.2;
  double background = 0.5;
  double noise_sigma = 0.25;
  double prevalence = 0.3;
  std::size_t n_base = 5000;
  std::size_t n_annotated = 300;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  std::size_t fixations_per_class = 3;
  double fixation_duration_min = 0.2;
  double fixation_duration_max = 0.8;
  double fixation_jitter = 3.0;  // px
  std::size_t distractor_fixations = 2;
  double distractor_duration_min = 0.1;
  double distractor_duration_max = 0.3;
  std::uint64_t seed = 0;

  std::size_t n_val() const { return static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n_base))); }
  std::size_t n_test() const { return static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n_base))); }
  std::size_t n_train() const { return n_base - n_val() - n_test(); }

  void validate() const {
    if (num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
    if (motif_size < 1 || motif_size > image_size)
      throw InputError("synth: motif larger than the image is infeasible");
    if (!(val_fraction >= 0 && test_fraction >= 0 && val_fraction + test_fraction < 1))
      throw ConfigError("synth: val/test fractions must be >= 0 and sum below 1");
    if (n_annotated > n_base) throw ConfigError("synth: n_annotated must not exceed n_base");
    if (n_annotated > n_train()) throw ConfigError("synth: annotated subset must fit in the training split");
    if (!(prevalence >= 0 && prevalence <= 1)) throw ConfigError("synth: prevalence must lie in [0,1]");
    if (!(noise_sigma >= 0) || !(motif_wavelength > 0)) throw ConfigError("synth: invalid noise or wavelength");
    if (!(fixation_duration_min > 0 && fixation_duration_max >= fixation_duration_min) ||
        !(distractor_duration_min > 0 && distractor_duration_max >= distractor_duration_min))
      throw ConfigError("synth: fixation durations must be positive ranges");
  }
};

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"image_size", s.image_size},
          {"num_classes", s.num_classes},
          {"motif_size", s.motif_size},
          {"motif_wavelength", s.motif_wavelength},
          {"motif_contrast", s.motif_contrast},
          {"background", s.background},
          {"noise_sigma", s.noise_sigma},
          {"prevalence", s.prevalence},
          {"n_base", s.n_base},
          {"n_annotated", s.n_annotated},
          {"val_fraction", s.val_fraction},
          {"test_fraction", s.test_fraction},
          {"fixations_per_class", s.fixations_per_class},
          {"fixation_duration_min", s.fixation_duration_min},
          {"fixation_duration_max", s.fixation_duration_max},
          {"fixation_jitter", s.fixation_jitter},
          {"distractor_fixations", s.distractor_fixations},
          {"distractor_duration_min", s.distractor_duration_min},
          {"distractor_duration_max", s.distractor_duration_max},
          {"seed", s.seed}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  try {
    s.image_size = j.at("image_size").get<std::size_t>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.motif_size = j.at("motif_size").get<std::size_t>();
    s.motif_wavelength = j.at("motif_wavelength").get<double>();
    s.motif_contrast = j.at("motif_contrast").get<double>();
    s.background = j.at("background").get<double>();
    s.noise_sigma = j.at("noise_sigma").get<double>();
    s.prevalence = j.at("prevalence").get<double>();
    s.n_base = j.at("n_base").get<std::size_t>();
    s.n_annotated = j.at("n_annotated").get<std::size_t>();
    s.val_fraction = j.at("val_fraction").get<double>();
    s.test_fraction = j.at("test_fraction").get<double>();
    s.fixations_per_class = j.at("fixations_per_class").get<std::size_t>();
    s.fixation_duration_min = j.at("fixation_duration_min").get<double>();
    s.fixation_duration_max = j.at("fixation_duration_max").get<double>();
    s.fixation_jitter = j.at("fixation_jitter").get<double>();
    s.distractor_fixations = j.at("distractor_fixations").get<std::size_t>();
    s.distractor_duration_min = j.at("distractor_duration_min").get<double>();
    s.distractor_duration_max = j.at("distractor_duration_max").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("synth spec: ") + e.what());
  }
  return s;
}

// Zero-mean-ish oriented grating for class k, motif_size^2 values row-major.
inline std::vector<double> motif_pattern(const SynthSpec& s, std::size_t k) {
  const double theta = std::numbers::pi * static_cast<double>(k) / static_cast<double>(s.num_classes);
  const double c = std::cos(theta), sn = std::sin(theta);
  const double mid = (static_cast<double>(s.motif_size) - 1.0) / 2.0;
  std::vector<double> m(s.motif_size * s.motif_size);
  for (std::size_t y = 0; y < s.motif_size; ++y)
    for (std::size_t x = 0; x < s.motif_size; ++x) {
      const double u = static_cast<double>(x) - mid, v = static_cast<double>(y) - mid;
      m[y * s.motif_size + x] = std::cos(2.0 * std::numbers::pi * (u * c + v * sn) / s.motif_wavelength);
    }
  return m;
}

struct SynthImage {
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;
  std::vector<BoundingBox> rois;  // planted motif extents, one per present class
  Annotation annotation;          // simulated gaze and boxes
};

namespace detail {

inline bool boxes_overlap(const BoundingBox& a, const BoundingBox& b) {
  return !(a.x1 < b.x0 || b.x1 < a.x0 || a.y1 < b.y0 || b.y1 < a.y0);
}

}  // namespace detail

// Image `index` of the benchmark; depends only on (spec, index).
inline SynthImage synth_image(const SynthSpec& s, std::size_t index,
                              const std::vector<std::vector<double>>& motifs) {
  Rng rng(derive_seed(s.seed, index));
  const std::size_t S = s.image_size, M = s.motif_size, K = s.num_classes;
  SynthImage img;
  img.labels.resize(K);
  for (std::size_t k = 0; k < K; ++k) img.labels[k] = rng.uniform() < s.prevalence ? 1 : 0;

  for (std::size_t k = 0; k < K; ++k) {
    if (!img.labels[k]) continue;
    BoundingBox b;
    for (int attempt = 0; attempt <= 100; ++attempt) {
      const int x = static_cast<int>(rng.below(S - M + 1)), y = static_cast<int>(rng.below(S - M + 1));
      b = {x, y, x + static_cast<int>(M) - 1, y + static_cast<int>(M) - 1, static_cast<int>(k)};
      bool clash = false;
      for (const auto& o : img.rois) clash = clash || detail::boxes_overlap(b, o);
      if (!clash) break;
    }
    img.rois.push_back(b);
  }

  std::vector<double> field(S * S, s.background);
  for (const auto& b : img.rois) {
    const auto& m = motifs[static_cast<std::size_t>(b.label_index)];
    for (std::size_t y = 0; y < M; ++y)
      for (std::size_t x = 0; x < M; ++x)
        field[(b.y0 + y) * S + b.x0 + x] += s.motif_contrast * m[y * M + x];
  }
  img.pixels.resize(S * S);
  for (std::size_t i = 0; i < S * S; ++i) {
    const double v = std::clamp(field[i] + s.noise_sigma * rng.normal(), 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }

  // Annotations come from an independent stream so they do not depend on
  // whether the image is in the annotated subset.
  Rng arng(derive_seed(s.seed ^ 0xa5a5a5a5a5a5a5a5ULL, index));
  img.annotation.boxes = img.rois;
  const int hi = static_cast<int>(S) - 1;
  for (const auto& b : img.rois) {
    const double cx = 0.5 * (b.x0 + b.x1), cy = 0.5 * (b.y0 + b.y1);
    for (std::size_t f = 0; f < s.fixations_per_class; ++f) {
      const int x = std::clamp(static_cast<int>(std::lround(cx + s.fixation_jitter * arng.normal())), 0, hi);
      const int y = std::clamp(static_cast<int>(std::lround(cy + s.fixation_jitter * arng.normal())), 0, hi);
      img.annotation.fixations.push_back({x, y, arng.uniform(s.fixation_duration_min, s.fixation_duration_max)});
    }
  }
  for (std::size_t f = 0; f < s.distractor_fixations; ++f) {
    const int x = static_cast<int>(arng.below(S)), y = static_cast<int>(arng.below(S));
    img.annotation.fixations.push_back({x, y, arng.uniform(s.distractor_duration_min, s.distractor_duration_max)});
  }
  return img;
}

struct SynthDataset {
  SynthSpec spec;
  DatasetSplit split;
  std::vector<std::vector<BoundingBox>> rois;  // ground-truth ROIs for every base image
};

inline SynthDataset generate(const SynthSpec& s, std::size_t threads = 1) {
  s.validate();
  std::vector<std::vector<double>> motifs;
  for (std::size_t k = 0; k < s.num_classes; ++k) motifs.push_back(motif_pattern(s, k));
  std::vector<SynthImage> imgs(s.n_base);
  auto work = [&](std::size_t t, std::size_t stride) {
    for (std::size_t i = t; i < s.n_base; i += stride) imgs[i] = synth_image(s, i, motifs);
  };
  if (threads <= 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
  }

  SynthDataset d;
  d.spec = s;
  ImageSet& data = d.split.data;
  data.image_size = s.image_size;
  data.num_labels = s.num_classes;
  data.pixels.reserve(s.n_base * s.image_size * s.image_size);
  data.labels.reserve(s.n_base * s.num_classes);
  for (auto& im : imgs) {
    data.pixels.insert(data.pixels.end(), im.pixels.begin(), im.pixels.end());
    data.labels.insert(data.labels.end(), im.labels.begin(), im.labels.end());
    d.rois.push_back(std::move(im.rois));
  }
  const std::size_t ntr = s.n_train(), nval = s.n_val();
  for (std::size_t i = 0; i < s.n_base; ++i) {
    if (i < ntr) d.split.train.push_back(i);
    else if (i < ntr + nval) d.split.val.push_back(i);
    else d.split.test.push_back(i);
  }
  for (std::size_t i = 0; i < s.n_annotated; ++i) {
    d.split.annotated.push_back(i);
    d.split.annotations.push_back(std::move(imgs[i].annotation));
  }
  d.split.validate();
  return d;
}

// ---------------------------------------------------------------------------
// On-disk layout:
//   images/NNNNNN.pgm  labels.csv  gaze/NNNNNN.csv  bbox/NNNNNN.json  manifest.json
// The manifest records the spec, the split indices and a CRC32 over the
// manifest body and every data file.

namespace detail {

inline std::string image_stem(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Crc {
 public:
  void update(const std::string& bytes) {
    crc_ = ::crc32(crc_, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  }
  std::string hex() const {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%08lx", crc_ & 0xffffffffUL);
    return buf;
  }

 private:
  uLong crc_ = ::crc32(0L, Z_NULL, 0);
};

inline std::string labels_csv(const ImageSet& data) {
  std::string s = "image_id";
  for (std::size_t k = 0; k < data.num_labels; ++k) s += ",l" + std::to_string(k);
  s += "\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    s += image_stem(i);
    for (std::size_t k = 0; k < data.num_labels; ++k) s += data.labels[i * data.num_labels + k] ? ",1" : ",0";
    s += "\n";
  }
  return s;
}

}  // namespace detail

inline void export_dataset(const SynthDataset& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const ImageSet& data = d.split.data;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "gaze");
  fs::create_directories(dir / "bbox");

  nlohmann::json m;
  m["format"] = "pinf-synth";
  m["version"] = 1;
  m["spec"] = to_json(d.spec);
  m["seed"] = d.spec.seed;
  m["splits"] = {{"train", d.split.train}, {"val", d.split.val}, {"test", d.split.test},
                 {"annotated", d.split.annotated}};
  detail::Crc crc;
  crc.update(m.dump());

  const std::string labels = detail::labels_csv(data);
  write_text(dir / "labels.csv", labels);
  crc.update(labels);
  const std::size_t px = data.image_size * data.image_size;
  for (std::size_t i = 0; i < data.size(); ++i) {
    GrayImage g{data.image_size, data.image_size,
                {data.pixels.begin() + static_cast<std::ptrdiff_t>(i * px),
                 data.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * px)}};
    const auto p = dir / "images" / (detail::image_stem(i) + ".pgm");
    write_pgm(p, g);
    crc.update(detail::read_file(p));
  }
  for (std::size_t a = 0; a < d.split.annotated.size(); ++a) {
    const std::string stem = detail::image_stem(d.split.annotated[a]);
    save_fixation_log(d.split.annotations[a].fixations, dir / "gaze" / (stem + ".csv"));
    save_bbox_file(d.split.annotations[a].boxes, dir / "bbox" / (stem + ".json"));
    crc.update(detail::read_file(dir / "gaze" / (stem + ".csv")));
    crc.update(detail::read_file(dir / "bbox" / (stem + ".json")));
  }
  m["checksum"] = crc.hex();
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

// Reads a dataset directory written by export_dataset. Ground-truth ROIs are
// not part of the layout; `rois` holds the annotated images' boxes only.
inline SynthDataset import_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "manifest.json")) throw InputError("dataset: missing manifest in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  if (m.value("format", "") != "pinf-synth" || m.value("version", 0) != 1)
    throw FormatError("dataset manifest: unknown format or version");
  if (!m.contains("checksum") || !m["checksum"].is_string())
    throw ChecksumError("dataset manifest: missing checksum");
  const std::string expected = m["checksum"].get<std::string>();
  nlohmann::json body = m;
  body.erase("checksum");

  SynthDataset d;
  d.spec = synth_spec_from_json(m.at("spec"));
  detail::Crc crc;
  crc.update(body.dump());
  try {
    const auto& sp = m.at("splits");
    d.split.train = sp.at("train").get<std::vector<std::size_t>>();
    d.split.val = sp.at("val").get<std::vector<std::size_t>>();
    d.split.test = sp.at("test").get<std::vector<std::size_t>>();
    d.split.annotated = sp.at("annotated").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }

  ImageSet& data = d.split.data;
  data.image_size = d.spec.image_size;
  data.num_labels = d.spec.num_classes;
  const std::string labels = detail::read_file(dir / "labels.csv");
  crc.update(labels);
  {
    std::istringstream is(labels);
    std::string line;
    std::getline(is, line);
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto f = detail::split_csv(line);
      if (f.size() != data.num_labels + 1 || f[0] != detail::image_stem(lineno - 2))
        throw ParseError((dir / "labels.csv").string(), lineno, "malformed label row");
      for (std::size_t k = 0; k < data.num_labels; ++k) {
        if (f[k + 1] != "0" && f[k + 1] != "1")
          throw ParseError((dir / "labels.csv").string(), lineno, "label must be 0 or 1");
        data.labels.push_back(f[k + 1] == "1");
      }
    }
  }
  const std::size_t n = data.labels.size() / data.num_labels;
  if (n != d.spec.n_base) throw FormatError("dataset: label rows do not match n_base");
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = dir / "images" / (detail::image_stem(i) + ".pgm");
    const std::string bytes = detail::read_file(p);
    crc.update(bytes);
    GrayImage g = read_pgm(p);
    if (g.width != data.image_size || g.height != data.image_size)
      throw FormatError(p.string() + ": unexpected image size");
    data.pixels.insert(data.pixels.end(), g.pixels.begin(), g.pixels.end());
  }
  for (std::size_t idx : d.split.annotated) {
    const std::string stem = detail::image_stem(idx);
    const auto gp = dir / "gaze" / (stem + ".csv"), bp = dir / "bbox" / (stem + ".json");
    crc.update(detail::read_file(gp));
    crc.update(detail::read_file(bp));
    d.split.annotations.push_back({load_fixation_log(gp), load_bbox_file(bp)});
  }
  if (crc.hex() != expected) throw ChecksumError("dataset: checksum mismatch in " + dir.string());
  d.split.validate();
  for (const auto& a : d.split.annotations) d.rois.push_back(a.boxes);
  return d;
}

}  // namespace pinf
