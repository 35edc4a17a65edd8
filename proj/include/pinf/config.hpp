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

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pinf/dataset.hpp"
#include "pinf/error.hpp"
#include "pinf/model.hpp"
#include "pinf/optim.hpp"
#include "pinf/raster.hpp"
#include "pinf/synth.hpp"
#include "pinf/trainer.hpp"

// Run configuration: a flat "key = value" text file. Blank lines and lines
// starting with '#' are ignored; unknown or repeated keys are errors. The
// echo lists every key with its effective value and parses back to the same
// configuration.
namespace pinf {

struct RunPaths {
  std::string dataset;            // dataset directory written by gen-data
  std::string stage1_checkpoint;  // stage-1 checkpoint (input of stage 2 and report)
  std::string stage2_checkpoint;  // stage-2 checkpoint (input of report)
  std::string checkpoint;         // checkpoint for eval / gradcam
};

struct RunConfig {
  std::uint64_t seed = 0;  // master seed for data generation and training
  std::size_t threads = 1;
  bool deterministic = true;
  SynthSpec synth;
  ModelConfig model;
  RasterConfig raster;
  TrainConfig train;                // stage 1
  std::size_t stage2_max_epochs = 30;
  FreezePlan stage2_plan = FreezePlan::stage2_default();
  AnnotationKind annotation = AnnotationKind::gaze;
  double dice_tau = 0.5;
  std::size_t cam_limit = 16;       // test images exported as CAM PGMs by eval --cams
  RunPaths paths;

  // Seeds and worker settings pushed into the sub-configurations.
  TrainConfig stage1_config() const {
    TrainConfig c = train;
    c.seed = seed;
    c.threads = threads;
    c.deterministic = deterministic;
    return c;
  }
  TrainConfig stage2_config() const {
    TrainConfig c = stage1_config();
    c.max_epochs = stage2_max_epochs;
    return c;
  }
  SynthSpec synth_spec() const {
    SynthSpec s = synth;
    s.seed = seed;
    return s;
  }
  Stage2Options stage2_options() const { return {stage2_plan, annotation, false}; }

  void validate() const {
    synth_spec().validate();
    model.validate();
    raster.validate();
    stage1_config().validate();
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (!stage2_plan.releases_anything()) throw ConfigError("freeze plan releases no parameter group");
    if (!(dice_tau >= 0 && dice_tau <= 1)) throw ConfigError("report.dice_tau must lie in [0,1]");
    if (synth.image_size != model.image_size)
      throw ConfigError("synth.image_size and model.image_size must agree");
    if (synth.num_classes != model.num_labels)
      throw ConfigError("synth.num_classes and model.num_labels must agree");
  }
};

namespace detail {

inline std::string fmt_config_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_config_number(const std::string& key, const std::string& s) {
  T v{};
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e || s.empty())
    throw ConfigError("config key '" + key + "': invalid value '" + s + "'");
  return v;
}

inline bool parse_config_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + s + "'");
}

struct ConfigBinding {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define PINF_BIND_SIZE(KEY, FIELD)                                                        \
  ConfigBinding {                                                                         \
    KEY, [](const RunConfig& c) { return std::to_string(c.FIELD); },                      \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_config_number<std::size_t>(KEY, v); } \
  }
#define PINF_BIND_DOUBLE(KEY, FIELD)                                                      \
  ConfigBinding {                                                                         \
    KEY, [](const RunConfig& c) { return fmt_config_double(c.FIELD); },                   \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_config_number<double>(KEY, v); } \
  }
#define PINF_BIND_STRING(KEY, FIELD)                                                      \
  ConfigBinding {                                                                         \
    KEY, [](const RunConfig& c) { return c.FIELD; }, [](RunConfig& c, const std::string& v) { c.FIELD = v; } \
  }

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline ConfigBinding freeze_binding(Group g) {
  const std::string key = "stage2.freeze." + std::string(group_name(g));
  return {key, [g](const RunConfig& c) { return std::string(c.stage2_plan.is_frozen(g) ? "true" : "false"); },
          [g, key](RunConfig& c, const std::string& v) { c.stage2_plan.set(g, parse_config_bool(key, v)); }};
}

inline const std::vector<ConfigBinding>& config_bindings() {
  static const std::vector<ConfigBinding> table = [] {
    std::vector<ConfigBinding> t{
        {"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
         [](RunConfig& c, const std::string& v) { c.seed = parse_config_number<std::uint64_t>("seed", v); }},
        PINF_BIND_SIZE("threads", threads),
        {"deterministic", [](const RunConfig& c) { return std::string(c.deterministic ? "true" : "false"); },
         [](RunConfig& c, const std::string& v) { c.deterministic = parse_config_bool("deterministic", v); }},
        PINF_BIND_SIZE("synth.image_size", synth.image_size),
        PINF_BIND_SIZE("synth.num_classes", synth.num_classes),
        PINF_BIND_SIZE("synth.motif_size", synth.motif_size),
        PINF_BIND_DOUBLE("synth.motif_wavelength", synth.motif_wavelength),
        PINF_BIND_DOUBLE("synth.motif_contrast", synth.motif_contrast),
        PINF_BIND_DOUBLE("synth.background", synth.background),
        PINF_BIND_DOUBLE("synth.noise_sigma", synth.noise_sigma),
        PINF_BIND_DOUBLE("synth.prevalence", synth.prevalence),
        PINF_BIND_SIZE("synth.n_base", synth.n_base),
        PINF_BIND_SIZE("synth.n_annotated", synth.n_annotated),
        PINF_BIND_DOUBLE("synth.val_fraction", synth.val_fraction),
        PINF_BIND_DOUBLE("synth.test_fraction", synth.test_fraction),
        PINF_BIND_SIZE("synth.fixations_per_class", synth.fixations_per_class),
        PINF_BIND_DOUBLE("synth.fixation_duration_min", synth.fixation_duration_min),
        PINF_BIND_DOUBLE("synth.fixation_duration_max", synth.fixation_duration_max),
        PINF_BIND_DOUBLE("synth.fixation_jitter", synth.fixation_jitter),
        PINF_BIND_SIZE("synth.distractor_fixations", synth.distractor_fixations),
        PINF_BIND_DOUBLE("synth.distractor_duration_min", synth.distractor_duration_min),
        PINF_BIND_DOUBLE("synth.distractor_duration_max", synth.distractor_duration_max),
        PINF_BIND_SIZE("model.image_size", model.image_size),
        {"model.channels", [](const RunConfig& c) { return join_sizes(c.model.channels); },
         [](RunConfig& c, const std::string& v) {
           std::vector<std::size_t> ch;
           for (const auto& part : split_csv(v)) ch.push_back(parse_config_number<std::size_t>("model.channels", trim(part)));
           c.model.channels = ch;
         }},
        PINF_BIND_SIZE("model.latent_dim", model.latent_dim),
        PINF_BIND_SIZE("model.num_labels", model.num_labels),
        PINF_BIND_SIZE("model.hidden", model.hidden),
        PINF_BIND_DOUBLE("raster.gaze_sigma_multiplier", raster.gaze_sigma_multiplier),
        PINF_BIND_DOUBLE("raster.bbox_edge_sigma", raster.bbox_edge_sigma),
        PINF_BIND_DOUBLE("raster.gaussian_truncation", raster.gaussian_truncation),
        PINF_BIND_DOUBLE("train.learning_rate", train.adam.learning_rate),
        PINF_BIND_DOUBLE("train.adam_beta1", train.adam.beta1),
        PINF_BIND_DOUBLE("train.adam_beta2", train.adam.beta2),
        PINF_BIND_DOUBLE("train.adam_eps", train.adam.eps),
        PINF_BIND_SIZE("train.batch_size", train.batch_size),
        PINF_BIND_SIZE("train.max_epochs", train.max_epochs),
        PINF_BIND_DOUBLE("train.beta", train.beta),
        PINF_BIND_DOUBLE("train.rel_tolerance", train.early_stop.rel_tolerance),
        PINF_BIND_SIZE("train.patience", train.early_stop.patience),
        PINF_BIND_SIZE("train.samples", train.samples),
        PINF_BIND_SIZE("stage2.max_epochs", stage2_max_epochs),
        {"stage2.annotation",
         [](const RunConfig& c) { return std::string(c.annotation == AnnotationKind::gaze ? "gaze" : "bbox"); },
         [](RunConfig& c, const std::string& v) { c.annotation = annotation_kind_from_name(v); }},
    };
    for (Group g : kAllGroups) t.push_back(freeze_binding(g));
    t.push_back(PINF_BIND_DOUBLE("report.dice_tau", dice_tau));
    t.push_back(PINF_BIND_SIZE("eval.cam_limit", cam_limit));
    t.push_back(PINF_BIND_STRING("paths.dataset", paths.dataset));
    t.push_back(PINF_BIND_STRING("paths.stage1_checkpoint", paths.stage1_checkpoint));
    t.push_back(PINF_BIND_STRING("paths.stage2_checkpoint", paths.stage2_checkpoint));
    t.push_back(PINF_BIND_STRING("paths.checkpoint", paths.checkpoint));
    return t;
  }();
  return table;
}

#undef PINF_BIND_SIZE
#undef PINF_BIND_DOUBLE
#undef PINF_BIND_STRING

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& b : detail::config_bindings())
    if (b.key == key) {
      b.set(cfg, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

// Splits "key=value" (whitespace around either side is trimmed).
inline std::pair<std::string, std::string> split_assignment(const std::string& text, const std::string& where) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
  std::string key = detail::trim(text.substr(0, eq));
  if (key.empty()) throw ConfigError(where + ": empty key");
  return {key, detail::trim(text.substr(eq + 1))};
}

inline RunConfig parse_run_config(std::istream& in, const std::string& name, RunConfig cfg = {}) {
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::string where = name + ":" + std::to_string(lineno);
    auto [key, value] = split_assignment(t, where);
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  return parse_run_config(in, path.string());
}

// Every key with its effective value, one "key = value" line each.
inline std::string echo_run_config(const RunConfig& cfg) {
  std::string out = "# effective configuration\n";
  for (const auto& b : detail::config_bindings()) out += b.key + " = " + b.get(cfg) + "\n";
  return out;
}

// Value of a path key, or a ConfigError naming the key when it is unset.
inline std::string require_path(const RunConfig& cfg, const std::string& key) {
  for (const auto& b : detail::config_bindings())
    if (b.key == key) {
      std::string v = b.get(cfg);
      if (v.empty()) throw ConfigError("missing required config key '" + key + "'");
      return v;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace pinf
