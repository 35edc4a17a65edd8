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

// pinf command-line tool. Every subcommand writes only under --out and echoes
// the effective configuration there as config.txt.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
// Failures print a human-readable message and an "error_code=<kind>" line to
// standard error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pinf/checkpoint.hpp"
#include "pinf/config.hpp"
#include "pinf/evaluate.hpp"
#include "pinf/gradcam.hpp"
#include "pinf/pgm.hpp"
#include "pinf/raster.hpp"
#include "pinf/report.hpp"
#include "pinf/synth.hpp"
#include "pinf/trainer.hpp"

namespace fs = std::filesystem;
using namespace pinf;

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
  bool deterministic = false;
  std::vector<std::string> set;
};

struct Context {
  RunConfig cfg;
  fs::path out;
};

Context make_context(const GlobalOptions& g) {
  Context ctx;
  if (!g.config.empty()) ctx.cfg = load_run_config(g.config);
  for (const auto& s : g.set) {
    auto [k, v] = split_assignment(s, "--set " + s);
    set_config_value(ctx.cfg, k, v);
  }
  if (g.seed) ctx.cfg.seed = *g.seed;
  if (g.threads) ctx.cfg.threads = *g.threads;
  if (g.deterministic) ctx.cfg.deterministic = true;
  ctx.cfg.validate();
  if (g.out.empty()) throw UsageError("--out is required");
  ctx.out = g.out;
  std::error_code ec;
  fs::create_directories(ctx.out, ec);
  if (ec) throw IoError("cannot create output directory " + ctx.out.string() + ": " + ec.message());
  write_text(ctx.out / "config.txt", echo_run_config(ctx.cfg));
  return ctx;
}

SynthDataset load_dataset(const RunConfig& cfg) { return import_dataset(require_path(cfg, "paths.dataset")); }

std::vector<AnnotationMap> stage2_maps(const RunConfig& cfg, const DatasetSplit& split) {
  return annotation_maps(split, cfg.annotation, cfg.raster);
}

// Streams every epoch record to <prefix>_metrics.csv and stores the best and
// last checkpoints plus a test-split evaluation.
void finish_training(const Context& ctx, const std::string& prefix, const TrainResult& r, const DatasetSplit& split,
                     const std::string& metrics) {
  write_text(ctx.out / (prefix + "_metrics.csv"), metrics);
  save_checkpoint(r.best, ctx.out / (prefix + ".ckpt"));
  save_checkpoint(r.last, ctx.out / (prefix + "_last.ckpt"));
  EvalReport rep = evaluate(r.best.params, split.data, split.test, ctx.cfg.threads);
  write_text(ctx.out / (prefix + "_test_eval.csv"), eval_csv(rep));
  std::printf("%s: best epoch %zu of %zu, val macro AUC %s, test macro AUC %s\n", prefix.c_str(), r.best.epoch,
              r.last.epoch, format_metric(r.best.best_metric).c_str(), format_metric(rep.macro_auc).c_str());
}

TrainHooks csv_hooks(std::string& metrics) {
  metrics = std::string(kMetricsHeader) + "\n";
  TrainHooks h;
  h.on_record = [&metrics](const EpochRecord& r) { metrics += metrics_csv_line(r) + "\n"; };
  return h;
}

void cmd_gen_data(const Context& ctx) {
  SynthDataset d = generate(ctx.cfg.synth_spec(), ctx.cfg.threads);
  export_dataset(d, ctx.out / "dataset");
  std::printf("dataset: %zu images (%zu train, %zu val, %zu test, %zu annotated) -> %s\n", d.split.data.size(),
              d.split.train.size(), d.split.val.size(), d.split.test.size(), d.split.annotated.size(),
              (ctx.out / "dataset").string().c_str());
}

void cmd_rasterize(const Context& ctx, const std::vector<std::string>& gaze, const std::vector<std::string>& bbox,
                   std::size_t size) {
  if (gaze.empty() && bbox.empty()) throw UsageError("rasterize: give at least one --gaze or --bbox file");
  if (size == 0) size = ctx.cfg.model.image_size;
  auto emit = [&](const std::string& in, const AnnotationMap& m, const char* kind) {
    const fs::path p = ctx.out / (fs::path(in).stem().string() + "_" + kind + ".pgm");
    save_map_pgm(m, p);
    std::printf("%s -> %s\n", in.c_str(), p.string().c_str());
  };
  for (const auto& f : gaze) emit(f, rasterize_gaze(load_fixation_log(f), size, size, ctx.cfg.raster), "gaze");
  for (const auto& f : bbox) emit(f, rasterize_bboxes(load_bbox_file(f), size, size, ctx.cfg.raster), "bbox");
}

void cmd_train_stage1(const Context& ctx) {
  SynthDataset d = load_dataset(ctx.cfg);
  std::string metrics;
  TrainResult r = train_stage1(d.split, ctx.cfg.stage1_config(), ctx.cfg.model, csv_hooks(metrics));
  finish_training(ctx, "stage1", r, d.split, metrics);
}

void cmd_train_stage2(const Context& ctx) {
  Checkpoint s1 = load_checkpoint(require_path(ctx.cfg, "paths.stage1_checkpoint"));
  SynthDataset d = load_dataset(ctx.cfg);
  std::string metrics;
  TrainResult r = train_stage2(s1, d.split, stage2_maps(ctx.cfg, d.split), ctx.cfg.stage2_config(),
                               ctx.cfg.stage2_options(), csv_hooks(metrics));
  finish_training(ctx, "stage2", r, d.split, metrics);
}

Tensor single_image(const ImageSet& data, std::size_t id) {
  const std::size_t one[1] = {id};
  return data.images(one);
}

void cmd_eval(const Context& ctx, bool cams) {
  Checkpoint c = load_checkpoint(require_path(ctx.cfg, "paths.checkpoint"));
  SynthDataset d = load_dataset(ctx.cfg);
  EvalReport rep = evaluate(c.params, d.split.data, d.split.test, ctx.cfg.threads);
  write_text(ctx.out / "eval.csv", eval_csv(rep));
  std::printf("test macro AUC %s, macro F1 %s\n", format_metric(rep.macro_auc).c_str(),
              format_metric(rep.macro_f1).c_str());
  if (!cams) return;
  fs::create_directories(ctx.out / "cams");
  const std::size_t n = std::min(ctx.cfg.cam_limit, d.split.test.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t id = d.split.test[i];
    const Tensor img = single_image(d.split.data, id);
    for (std::size_t k = 0; k < c.params.config().num_labels; ++k)
      save_map_pgm(grad_cam(c.params, img, k), ctx.out / "cams" / (detail::image_stem(id) + "_c" + std::to_string(k) + ".pgm"));
  }
}

void cmd_gradcam(const Context& ctx, const std::string& image, std::size_t class_index) {
  Checkpoint c = load_checkpoint(require_path(ctx.cfg, "paths.checkpoint"));
  GrayImage g = read_pgm(image);
  const std::size_t S = c.params.config().image_size;
  if (g.width != S || g.height != S)
    throw DimensionError("gradcam: image is " + std::to_string(g.width) + "x" + std::to_string(g.height) +
                         ", model expects " + std::to_string(S) + "x" + std::to_string(S));
  Tensor t({1, 1, S, S});
  for (std::size_t i = 0; i < S * S; ++i) t[i] = g.pixels[i] / 255.0;
  const fs::path p = ctx.out / "cam.pgm";
  save_map_pgm(grad_cam(c.params, t, class_index), p);
  std::printf("class %zu CAM -> %s\n", class_index, p.string().c_str());
}

void cmd_report(const Context& ctx) {
  Checkpoint base = load_checkpoint(require_path(ctx.cfg, "paths.stage1_checkpoint"));
  Checkpoint sub = load_checkpoint(require_path(ctx.cfg, "paths.stage2_checkpoint"));
  SynthDataset d = load_dataset(ctx.cfg);
  DeltaSReport ds = delta_s_report(base.params, sub.params, d.split, stage2_maps(ctx.cfg, d.split), ctx.cfg.dice_tau,
                                   ctx.cfg.threads);
  write_text(ctx.out / "delta_s.csv", delta_s_csv(ds));
  const double before = evaluate(base.params, d.split.data, d.split.test, ctx.cfg.threads).macro_auc;
  const double after = evaluate(sub.params, d.split.data, d.split.test, ctx.cfg.threads).macro_auc;
  std::string summary;
  summary += "test_macro_auc_stage1 = " + format_metric(before) + "\n";
  summary += "test_macro_auc_stage2 = " + format_metric(after) + "\n";
  summary += "test_macro_auc_change = " + format_metric(after - before) + "\n";
  summary += "delta_images = " + std::to_string(ds.rows.size()) + "\n";
  summary += "delta_skipped_unlabeled = " + std::to_string(ds.skipped) + "\n";
  summary += "mean_delta_mse_pct = " + format_metric(ds.mean_delta_mse_pct) + "\n";
  summary += "mean_delta_dice_pct = " + format_metric(ds.mean_delta_dice_pct) + "\n";
  write_text(ctx.out / "summary.txt", summary);
  std::fputs(summary.c_str(), stdout);
}

int fail(const char* kind, const std::string& msg, int code) {
  std::fprintf(stderr, "pinf: error: %s\nerror_code=%s\n", msg.c_str(), kind);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pinf: two-stage conditional-prior variational classifier"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--config", g.config, "Run configuration file (key = value lines)");
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--out", g.out, "Run directory for all outputs");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", g.deterministic, "Force the single-ordering deterministic mode");
  app.add_option("--set", g.set, "Config override KEY=VALUE (repeatable)");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset into OUT/dataset");
  auto* ras = app.add_subcommand("rasterize", "Rasterize fixation logs / bounding-box files to PGM maps");
  std::vector<std::string> gaze_files, bbox_files;
  std::size_t ras_size = 0;
  ras->add_option("--gaze", gaze_files, "Fixation CSV file(s)")->check(CLI::ExistingFile);
  ras->add_option("--bbox", bbox_files, "Bounding-box JSON file(s)")->check(CLI::ExistingFile);
  ras->add_option("--size", ras_size, "Map side length (default: model.image_size)");
  auto* s1 = app.add_subcommand("train-stage1", "Train stage 1 on the base set");
  auto* s2 = app.add_subcommand("train-stage2", "Fine-tune stage 2 on the annotated subset");
  auto* ev = app.add_subcommand("eval", "Evaluate paths.checkpoint on the test split");
  bool cams = false;
  ev->add_flag("--cams", cams, "Also export per-class CAM PGMs for the first eval.cam_limit test images");
  auto* gc = app.add_subcommand("gradcam", "Grad-CAM map for one image");
  std::string gc_image;
  std::size_t gc_class = 0;
  gc->add_option("--image", gc_image, "Input PGM")->required()->check(CLI::ExistingFile);
  gc->add_option("--class", gc_class, "Class index")->required();
  auto* rep = app.add_subcommand("report", "Compare stage-1 and stage-2 CAMs against the annotations");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 1);
  }

  try {
    const Context ctx = make_context(g);
    if (*gen) cmd_gen_data(ctx);
    else if (*ras) cmd_rasterize(ctx, gaze_files, bbox_files, ras_size);
    else if (*s1) cmd_train_stage1(ctx);
    else if (*s2) cmd_train_stage2(ctx);
    else if (*ev) cmd_eval(ctx, cams);
    else if (*gc) cmd_gradcam(ctx, gc_image, gc_class);
    else if (*rep) cmd_report(ctx);
    return 0;
  } catch (const pinf::Error& e) {
    return fail(e.kind(), e.what(), e.is_usage() ? 1 : 2);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 2);
  }
}
