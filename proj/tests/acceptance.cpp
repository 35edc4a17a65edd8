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

// Acceptance suite. Prints one "PASS"/"FAIL" line per criterion (with the
// measured quantities) and exits non-zero if any criterion fails. Optional
// arguments select criteria by number, e.g. `acceptance 1 3 9`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "cli_util.hpp"
#include "model_check.hpp"
#include "oracles.hpp"
#include "pinf/checkpoint.hpp"
#include "pinf/config.hpp"
#include "pinf/report.hpp"
#include "pinf/synth.hpp"
#include "pinf/trainer.hpp"
#include "test_util.hpp"

namespace {

using namespace pinf;
using namespace pinf::testing;
namespace fs = std::filesystem;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// 1. Gradient correctness.

Outcome gradients() {
  const auto t0 = Clock::now();
  double op_max = 0;
  std::string worst_op;
  for (const auto& c : op_cases()) {
    const double e = check_gradients(c.graph, c.inputs).max_error;
    if (e > op_max) {
      op_max = e;
      worst_op = c.name;
    }
  }
  const auto all = std::vector<Group>(kAllGroups.begin(), kAllGroups.end());
  const auto image_side = std::vector<Group>{Group::encoder, Group::post_mlp1, Group::post_mlp2, Group::ch1, Group::ch2};
  double model_max = 0;
  Rng data(4242);
  for (std::uint64_t inst = 0; inst < 4; ++inst) {
    const ModelParams p = random_model(tiny_config(), 900 + inst);
    const Tensor x = random_uniform({3, 1, 16, 16}, data), y = binary_labels(3, 2, data);
    const Tensor c = random_uniform({3, 1, 16, 16}, data);
    const double beta = 0.5;
    auto base = check_model_gradients(p, image_side, [&](const BoundParams& bp, Tape& t) {
      Rng rng(inst);
      return loss_base(bp, t.constant(x), y, beta, rng).loss;
    });
    auto sub = check_model_gradients(p, all, [&](const BoundParams& bp, Tape& t) {
      Rng rng(inst);
      return loss_sub(bp, t.constant(x), y, t.constant(c), beta, rng).loss;
    });
    model_max = std::max({model_max, base.max_error, sub.max_error});
  }
  const double secs = seconds_since(t0);
  const bool pass = op_max <= 1e-6 && model_max <= 1e-6 && secs < 60;
  return {pass, "per-op max rel err " + fmt("%.2e", op_max) + " (" + worst_op + "), loss_base/loss_sub max rel err " +
                    fmt("%.2e", model_max) + ", " + fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------------------
// 2. KL correctness against Monte Carlo.

double kl_closed(const std::vector<double>& mq, const std::vector<double>& lq, const std::vector<double>& mp,
                 const std::vector<double>& lp) {
  const std::size_t n = mq.size();
  Tape t;
  auto v = [&](const std::vector<double>& a) { return t.constant(Tensor({1, n}, a)); };
  return gaussian_kl(v(mq), v(lq), v(mp), v(lp)).value().item();
}

Outcome kl_monte_carlo() {
  const auto t0 = Clock::now();
  Rng rng(777);
  const std::size_t n = 2, N = 10'000'000;
  double worst_z = 0;
  int failures = 0;
  for (int pair = 0; pair < 20; ++pair) {
    std::vector<double> mq(n), lq(n), mp(n), lp(n);
    for (std::size_t d = 0; d < n; ++d) {
      mq[d] = rng.normal();
      mp[d] = rng.normal();
      lq[d] = rng.uniform(-1.5, 1.5);
      lp[d] = rng.uniform(-1.5, 1.5);
    }
    const double closed = kl_closed(mq, lq, mp, lp);
    long double s = 0, s2 = 0;
    for (std::size_t i = 0; i < N; ++i) {
      double d_log = 0;
      for (std::size_t d = 0; d < n; ++d) {
        const double sq = std::exp(0.5 * lq[d]), sp = std::exp(0.5 * lp[d]);
        const double eps = rng.normal();
        const double z = mq[d] + sq * eps;
        const double u = (z - mp[d]) / sp;
        d_log += -0.5 * lq[d] - 0.5 * eps * eps + 0.5 * lp[d] + 0.5 * u * u;
      }
      s += d_log;
      s2 += static_cast<long double>(d_log) * d_log;
    }
    const long double m = s / N;
    const double se = std::sqrt(static_cast<double>((s2 / N - m * m) / (N - 1)));
    const double z = std::fabs(closed - static_cast<double>(m)) / se;
    worst_z = std::max(worst_z, z);
    if (z > 3) ++failures;
  }
  // Non-negativity over random pairs and exact zero for identical arguments.
  bool nonneg = true, self_zero = true;
  for (int t = 0; t < 100000; ++t) {
    std::vector<double> mq(3), lq(3), mp(3), lp(3);
    for (std::size_t d = 0; d < 3; ++d) {
      mq[d] = rng.normal(0, 3);
      mp[d] = rng.normal(0, 3);
      lq[d] = rng.uniform(-10, 10);
      lp[d] = rng.uniform(-10, 10);
    }
    nonneg = nonneg && kl_closed(mq, lq, mp, lp) >= 0.0;
    if (t % 10 == 0) self_zero = self_zero && kl_closed(mq, lq, mq, lq) == 0.0;
  }
  const double secs = seconds_since(t0);
  return {failures == 0 && nonneg && self_zero && secs < 60,
          std::to_string(20 - failures) + "/20 pairs within 3 SE (max |z| " + fmt("%.2f", worst_z) +
              "), KL>=0 " + (nonneg ? "yes" : "NO") + ", KL(q,q)==0 " + (self_zero ? "yes" : "NO") + ", " +
              fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------------------
// 3. Objective collapse.

Outcome collapse() {
  Rng data(31337);
  int sub_equal = 0, bce_equal = 0;
  for (int t = 0; t < 100; ++t) {
    ModelParams p = random_model(tiny_config(), 5000 + t);
    Rng init(6000 + t);
    p.init_group(Group::annotation_encoder, init);
    p.init_group(Group::prior_net, init);
    p.zero_group(Group::annotation_encoder);
    p.zero_group(Group::prior_net);
    const std::size_t B = 1 + data.below(6);
    const Tensor x = random_uniform({B, 1, 16, 16}, data), y = binary_labels(B, 2, data);
    const Tensor c = random_uniform({B, 1, 16, 16}, data);
    const double beta = data.uniform(0, 2);
    {
      Tape tape;
      BoundParams bp(tape, p);
      Rng r1(t), r2(t);
      auto a = loss_base(bp, tape.constant(x), y, beta, r1);
      auto b = loss_sub(bp, tape.constant(x), y, tape.constant(c), beta, r2);
      if (a.loss.value().item() == b.loss.value().item() && a.nll.value().item() == b.nll.value().item() &&
          a.kl.value().item() == b.kl.value().item())
        ++sub_equal;
    }
    {
      Tape tape;
      BoundParams bp(tape, p);
      Rng r(t);
      auto a = loss_base(bp, tape.constant(x), y, 0.0, r);
      if (a.loss.value().item() == bce_with_logits(a.logits, y).value().item()) ++bce_equal;
    }
  }
  return {sub_equal == 100 && bce_equal == 100, "loss_sub == loss_base bitwise on " + std::to_string(sub_equal) +
                                                    "/100 batches; beta=0 loss_base == BCE bitwise on " +
                                                    std::to_string(bce_equal) + "/100"};
}

// ---------------------------------------------------------------------------
// 4. Freeze contract.

bool frozen_groups_identical(const Checkpoint& s1, const Checkpoint& s2) {
  for (Group g : {Group::encoder, Group::post_mlp1, Group::ch1}) {
    const auto& a = s1.params.group(g).tensors;
    const auto& b = s2.params.group(g).tensors;
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!(a[i].value == b[i].value)) return false;
  }
  return true;
}

Outcome freeze_contract() {
  const fs::path dir = scratch_dir("acceptance_freeze");
  RunConfig rc;
  rc.seed = 3;
  rc.synth.n_base = 800;
  rc.synth.n_annotated = 120;
  SynthDataset d = generate(rc.synth_spec());
  TrainConfig t1 = rc.stage1_config();
  t1.max_epochs = 3;
  auto r1 = train_stage1(d.split, t1, rc.model);
  save_checkpoint(r1.best, dir / "stage1.ckpt");
  // Record every epoch-end state of the stage-2 run, not just the selected one.
  std::vector<Checkpoint> states;
  TrainHooks hooks;
  hooks.on_epoch_end = [&](const Checkpoint& c) { states.push_back(c); };
  TrainConfig t2 = rc.stage2_config();
  t2.early_stop.patience = 5;
  t2.max_epochs = 5;
  auto r2 = train_stage2(r1.best, d.split, annotation_maps(d.split, rc.annotation, rc.raster), t2,
                         rc.stage2_options(), hooks);
  save_checkpoint(r2.best, dir / "stage2.ckpt");
  save_checkpoint(r2.last, dir / "stage2_last.ckpt");
  const Checkpoint s1 = load_checkpoint(dir / "stage1.ckpt");
  bool ok = frozen_groups_identical(s1, load_checkpoint(dir / "stage2.ckpt")) &&
            frozen_groups_identical(s1, load_checkpoint(dir / "stage2_last.ckpt"));
  std::size_t identical_states = 0;
  for (const auto& c : states)
    if (frozen_groups_identical(s1, c)) ++identical_states;
  ok = ok && identical_states == states.size();
  // The released groups did move.
  const bool moved = !(s1.params.group(Group::ch2).tensors[0].value == r2.last.params.group(Group::ch2).tensors[0].value);
  return {ok && moved, "encoder/post_mlp1/ch1 identical in " + std::to_string(identical_states) + "/" +
                           std::to_string(states.size()) + " stage-2 epoch states and saved checkpoints; ch2 " +
                           (moved ? "updated" : "NOT updated")};
}

// ---------------------------------------------------------------------------
// 5. Overfitting a small set.

Outcome overfit() {
  const auto t0 = Clock::now();
  SynthSpec s;
  s.seed = 11;
  s.n_base = 64;
  s.n_annotated = 0;
  s.val_fraction = 0.25;
  s.test_fraction = 0.25;
  SynthDataset d = generate(s);
  DatasetSplit split = d.split;
  split.train.resize(32);
  TrainConfig cfg;
  cfg.seed = 11;
  cfg.max_epochs = 200;
  cfg.early_stop.patience = 200;
  ModelConfig mc;
  mc.num_labels = s.num_classes;
  std::size_t reached = 0;
  double best_auc = 0;
  TrainHooks hooks;
  const auto& train_ids = split.train;
  hooks.on_epoch_end = [&](const Checkpoint& c) {
    if (reached || c.epoch == 0) return;
    const double auc = evaluate(c.params, split.data, train_ids).macro_auc;
    best_auc = std::max(best_auc, auc);
    if (auc >= 0.99) reached = c.epoch;
  };
  train_stage1(split, cfg, mc, hooks);
  const double secs = seconds_since(t0);
  return {reached > 0 && secs < 120,
          (reached ? "train macro AUC >= 0.99 at epoch " + std::to_string(reached)
                   : "best train macro AUC " + fmt("%.4f", best_auc) + " in 200 epochs") +
              ", " + fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------------------
// 6-8. Central synthetic experiment over five seeds.

struct SeedResult {
  double auc_stage1 = 0, auc_default = 0, auc_released = 0;
  double delta_mse = 0, delta_dice = 0;
  bool freeze_ok = false;
};

struct Central {
  std::vector<SeedResult> seeds;
  double seconds = 0;
};

const Central& central() {
  static const Central result = [] {
    Central c;
    const auto t0 = Clock::now();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      RunConfig rc;
      rc.seed = seed;
      SynthDataset d = generate(rc.synth_spec());
      auto maps = annotation_maps(d.split, rc.annotation, rc.raster);
      auto r1 = train_stage1(d.split, rc.stage1_config(), rc.model);
      SeedResult s;
      s.auc_stage1 = evaluate(r1.best.params, d.split.data, d.split.test).macro_auc;
      auto r2 = train_stage2(r1.best, d.split, maps, rc.stage2_config(), rc.stage2_options());
      s.auc_default = evaluate(r2.best.params, d.split.data, d.split.test).macro_auc;
      s.freeze_ok = frozen_groups_identical(r1.best, r2.best) && frozen_groups_identical(r1.best, r2.last);
      DeltaSReport ds = delta_s_report(r1.best.params, r2.best.params, d.split, maps, rc.dice_tau);
      s.delta_mse = ds.mean_delta_mse_pct;
      s.delta_dice = ds.mean_delta_dice_pct;
      Stage2Options all = rc.stage2_options();
      all.plan = FreezePlan::all_released();
      auto r3 = train_stage2(r1.best, d.split, maps, rc.stage2_config(), all);
      s.auc_released = evaluate(r3.best.params, d.split.data, d.split.test).macro_auc;
      std::printf("  seed %llu: stage-1 AUC %.4f, stage-2 default AUC %.4f (%+.4f), all-released AUC %.4f, "
                  "dMSE %+.3f%%, dDice %+.3g%%, freeze %s, stage-1 epochs %zu (best %zu), stage-2 best epoch %zu\n",
                  static_cast<unsigned long long>(seed), s.auc_stage1, s.auc_default, s.auc_default - s.auc_stage1,
                  s.auc_released, s.delta_mse, s.delta_dice, s.freeze_ok ? "ok" : "VIOLATED", r1.last.epoch,
                  r1.best.epoch, r2.best.epoch);
      std::fflush(stdout);
      c.seeds.push_back(s);
    }
    c.seconds = seconds_since(t0);
    return c;
  }();
  return result;
}

Outcome central_auc() {
  const Central& c = central();
  double m1 = 0, m2 = 0, worst = 1;
  for (const auto& s : c.seeds) {
    m1 += s.auc_stage1 / 5;
    m2 += s.auc_default / 5;
    worst = std::min(worst, s.auc_default - s.auc_stage1);
  }
  const bool pass = m2 >= m1 + 0.01 && worst >= -0.005 && c.seconds <= 1800;
  return {pass, "mean test AUC stage 1 " + fmt("%.4f", m1) + " -> stage 2 " + fmt("%.4f", m2) + " (" +
                    fmt("%+.4f", m2 - m1) + ", need >= +0.01), worst seed change " + fmt("%+.4f", worst) +
                    " (need >= -0.005), " + fmt("%.0f", c.seconds) + " s for 5 seeds x 3 runs"};
}

Outcome central_similarity() {
  const Central& c = central();
  int both = 0;
  std::string vals;
  for (const auto& s : c.seeds) {
    if (s.delta_mse > 0 && s.delta_dice > 0) ++both;
    vals += " (" + fmt("%+.3g", s.delta_mse) + "," + fmt("%+.3g", s.delta_dice) + ")";
  }
  return {both >= 4, std::to_string(both) + "/5 seeds with delta_mse_pct > 0 and delta_dice_pct > 0:" + vals};
}

Outcome central_ablation() {
  const Central& c = central();
  double md = 0, mr = 0;
  for (const auto& s : c.seeds) {
    md += s.auc_default / 5;
    mr += s.auc_released / 5;
  }
  return {mr < md, "mean test AUC all-released " + fmt("%.4f", mr) + " vs default plan " + fmt("%.4f", md)};
}

// ---------------------------------------------------------------------------
// 9. Rasterizer.

Outcome rasterizer() {
  Rng rng(99);
  const RasterConfig cfg;
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t h = 8 + rng.below(48), w = 8 + rng.below(48);
    auto fx = random_fixations(rng, h, w);
    auto bx = random_boxes(rng, h, w);
    worst = std::max(worst, max_diff(rasterize_gaze(fx, h, w, cfg), gaze_oracle(fx, h, w, cfg)));
    worst = std::max(worst, max_diff(rasterize_bboxes(bx, h, w, cfg), bbox_oracle(bx, h, w, cfg)));
  }
  auto single = rasterize_gaze({{32, 32, 0.5}}, 64, 64, cfg);
  const bool example = single.at(32, 32) == 1.0 && std::fabs(single.at(32, 37) - std::exp(-0.5)) <= 1e-10;
  const int failures = raster_property_failures(1000, 2027);
  return {worst <= 1e-10 && example && failures == 0,
          "max |map - dense oracle| " + fmt("%.2e", worst) + " over 200 maps, reference example " +
              (example ? "ok" : "WRONG") + ", property cases failing " + std::to_string(failures) + "/1000"};
}

// ---------------------------------------------------------------------------
// 10. Metric oracles.

Outcome metric_oracles() {
  Rng rng(1234);
  double auc_err = 0;
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 2 + rng.below(80);
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(10)) / 10.0;
      y[i] = static_cast<double>(rng.below(2));
    }
    y[0] = 1;
    y[1] = 0;
    auc_err = std::max(auc_err, std::fabs(*binary_auc(s, y) - auc_pairs(s, y)));
  }
  int dice_bad = 0;
  for (int t = 0; t < 500; ++t) {
    auto a = random_map(rng, 16, 16), b = random_map(rng, 16, 16);
    if (t % 50 == 0) std::fill(a.values.begin(), a.values.end(), 0.0);
    if (t % 100 == 0) std::fill(b.values.begin(), b.values.end(), 0.0);
    if (map_dice(a, b) != dice_sets(a, b, 0.5)) ++dice_bad;
  }
  int delta_bad = 0;
  for (int t = 0; t < 500; ++t) {
    auto c = random_map(rng, 12, 12), base = random_map(rng, 12, 12), sub = random_map(rng, 12, 12);
    auto r = cam_similarity_delta(c, base, sub);
    const double mse_b = map_mse(c, base), mse_s = map_mse(c, sub);
    const double dice_b = dice_sets(c, base, 0.5), dice_s = dice_sets(c, sub, 0.5);
    const double want_mse = (mse_b / std::max(mse_s, 1e-12) - 1) * 100;
    const double want_dice = (dice_b > 1e-12 || dice_s > 1e-12) ? (dice_s / std::max(dice_b, 1e-12) - 1) * 100 : 0.0;
    if (std::fabs(r.delta_mse_pct - want_mse) > 1e-9 || std::fabs(r.delta_dice_pct - want_dice) > 1e-9) ++delta_bad;
    auto same = cam_similarity_delta(c, base, base);
    if (same.delta_mse_pct != 0 || same.delta_dice_pct != 0) ++delta_bad;
  }
  const bool arithmetic = std::fabs(delta_from_raw(0.02, 0.01, 0.5, 0.5).delta_mse_pct - 100.0) <= 1e-12;
  return {auc_err == 0 && dice_bad == 0 && delta_bad == 0 && arithmetic,
          "AUC vs pair counting max err " + fmt("%.1e", auc_err) + " (500 cases), Dice vs set counting mismatches " +
              std::to_string(dice_bad) + "/500, delta mismatches " + std::to_string(delta_bad) +
              "/1000, +100% example " + (arithmetic ? "ok" : "WRONG")};
}

// ---------------------------------------------------------------------------
// 11. CLI determinism.

Outcome cli_determinism() {
  const fs::path root = scratch_dir("acceptance_cli");
  write_text(root / "run.cfg",
             "synth.n_base = 300\nsynth.n_annotated = 60\ntrain.max_epochs = 2\nstage2.max_epochs = 2\n"
             "eval.cam_limit = 3\n"
             "paths.dataset = data/dataset\npaths.stage1_checkpoint = s1/stage1.ckpt\n"
             "paths.stage2_checkpoint = s2/stage2.ckpt\npaths.checkpoint = s2/stage2.ckpt\n");
  const std::vector<std::vector<std::string>> steps{
      {"--out", "data", "gen-data"},
      {"--out", "s1", "train-stage1"},
      {"--out", "s2", "train-stage2"},
      {"--out", "report", "report"},
      {"--out", "eval", "eval", "--cams"},
      {"--out", "cam", "gradcam", "--image", "data/dataset/images/000000.pgm", "--class", "0"},
      {"--out", "maps", "rasterize", "--gaze", "data/dataset/gaze/000000.csv", "--bbox", "data/dataset/bbox/000000.json"}};
  for (const char* run : {"a", "b"}) {
    fs::create_directories(root / run);
    for (auto args : steps) {
      args.insert(args.begin(), {"--config", (root / "run.cfg").string(), "--deterministic", "--seed", "21"});
      auto r = run_cli(PINF_CLI_PATH, args, root, root / run);
      if (r.exit_code != 0) return {false, "run " + std::string(run) + " step " + args.back() + " failed: " + r.err};
    }
  }
  const auto a = snapshot_dir(root / "a"), b = snapshot_dir(root / "b");
  std::size_t ckpt = 0, csv = 0, pgm = 0, differ = 0;
  for (const auto& [name, bytes] : a) {
    const auto ext = fs::path(name).extension();
    ckpt += ext == ".ckpt";
    csv += ext == ".csv";
    pgm += ext == ".pgm";
    auto it = b.find(name);
    if (it == b.end() || it->second != bytes) ++differ;
  }
  const bool pass = differ == 0 && a.size() == b.size() && ckpt > 0 && csv > 0 && pgm > 0;
  return {pass, std::to_string(a.size()) + " files (" + std::to_string(ckpt) + " checkpoints, " + std::to_string(csv) +
                    " CSVs, " + std::to_string(pgm) + " PGMs), " + std::to_string(differ) + " differ"};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradients},
      {2, "KL correctness", kl_monte_carlo},
      {3, "objective collapse", collapse},
      {4, "freeze contract", freeze_contract},
      {5, "overfit 32 images", overfit},
      {6, "stage-2 gaze improves test macro-AUC", central_auc},
      {7, "CAM similarity deltas positive", central_similarity},
      {8, "all-released plan below default plan", central_ablation},
      {9, "rasterizer oracles and properties", rasterizer},
      {10, "AUC, Dice and delta oracles", metric_oracles},
      {11, "CLI determinism", cli_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s [%d] %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
