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

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "pinf/checkpoint.hpp"
#include "pinf/dataset.hpp"
#include "pinf/evaluate.hpp"
#include "pinf/model.hpp"
#include "pinf/optim.hpp"
#include "pinf/rng.hpp"
#include "pinf/stopping.hpp"

// Two-stage training.
//
// Stage 1 trains on the base set with the standard-normal prior; stage 2
// resumes from a stage-1 checkpoint, attaches a freshly initialized
// annotation encoder and prior net, freezes the groups named by a FreezePlan
// and fine-tunes on the annotated subset with the conditional prior.
//
// Both stages evaluate validation macro-AUC before the first epoch and after
// every epoch, keep the best-scoring state, and stop early on the tolerance
// rule. Parameters and Adam moments are rounded to float storage precision at
// each epoch boundary, so any epoch-end state survives a checkpoint round trip
// exactly and a resumed run continues bit-identically.
namespace pinf {

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 50;
  double beta = 0.01;
  EarlyStopConfig early_stop;
  std::uint64_t seed = 0;
  std::size_t samples = 1;
  bool deterministic = true;
  std::size_t threads = 1;

  void validate() const {
    adam.validate();
    early_stop.validate();
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(beta >= 0)) throw ConfigError("train: beta must be >= 0");
    if (samples < 1) throw ConfigError("train: sample count must be >= 1");
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0, nll = 0, kl = 0, auc = 0, f1 = 0;
};

inline constexpr const char* kMetricsHeader = "epoch,split,loss,nll,kl,auc,f1";

inline std::string metrics_csv_line(const EpochRecord& r) {
  return std::to_string(r.epoch) + "," + r.split + "," + format_metric(r.loss) + "," +
         format_metric(r.nll) + "," + format_metric(r.kl) + "," + format_metric(r.auc) + "," +
         format_metric(r.f1);
}

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_record;
  std::function<void(const Checkpoint&)> on_epoch_end;  // state after each epoch (and epoch 0)
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochRecord> log;
  bool stopped_early = false;
};

struct Stage2Options {
  FreezePlan plan = FreezePlan::stage2_default();
  AnnotationKind kind = AnnotationKind::gaze;
  bool zero_init_annotation_side = false;
};

namespace detail {

struct StageInputs {
  const DatasetSplit* split = nullptr;
  const std::vector<AnnotationMap>* maps = nullptr;  // stage 2 only
  int stage = 1;
};

struct BatchOutcome {
  GradTable grads;
  double loss = 0, nll = 0, kl = 0;
  Tensor logits;
};

inline void accumulate(GradTable& into, const GradTable& g) {
  for (const auto& [k, t] : g) {
    auto it = into.find(k);
    if (it == into.end()) {
      into.emplace(k, t);
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) it->second[i] += t[i];
    }
  }
}

// Loss and gradients of one minibatch chunk; `weight` = chunk share of the batch.
inline BatchOutcome chunk_step(const ModelParams& params, const StageInputs& in,
                               std::span<const std::size_t> positions, const TrainConfig& cfg, Rng& rng,
                               double weight) {
  const DatasetSplit& split = *in.split;
  std::vector<std::size_t> ids(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i)
    ids[i] = in.stage == 1 ? positions[i] : split.annotated[positions[i]];
  Tape tape;
  BoundParams bp(tape, params);
  Var x = tape.constant(split.data.images(ids));
  Tensor y = split.data.targets(ids);
  LossParts lp = in.stage == 1
                     ? loss_base(bp, x, y, cfg.beta, rng, cfg.samples)
                     : loss_sub(bp, x, y, tape.constant(maps_to_tensor(*in.maps, positions)), cfg.beta, rng,
                                cfg.samples);
  Var objective = weight == 1.0 ? lp.loss : scale(lp.loss, weight);
  BatchOutcome out;
  out.grads = tape.backward(objective);
  out.loss = lp.loss.value().item() * weight;
  out.nll = lp.nll.value().item() * weight;
  out.kl = lp.kl.value().item() * weight;
  out.logits = lp.logits.value();
  return out;
}

inline BatchOutcome batch_step(const ModelParams& params, const StageInputs& in,
                               std::span<const std::size_t> positions, const TrainConfig& cfg, Rng& rng) {
  const std::size_t B = positions.size();
  const std::size_t workers = cfg.deterministic ? 1 : std::min(cfg.threads, B);
  if (workers <= 1) return chunk_step(params, in, positions, cfg, rng, 1.0);
  // Per-chunk generators seeded in order from the trainer's stream; results
  // are reduced in chunk order.
  std::vector<Rng> rngs;
  for (std::size_t w = 0; w < workers; ++w) rngs.emplace_back(rng.next_u64());
  std::vector<BatchOutcome> parts(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        const std::size_t b = w * B / workers, e = (w + 1) * B / workers;
        parts[w] = chunk_step(params, in, positions.subspan(b, e - b), cfg, rngs[w],
                              static_cast<double>(e - b) / static_cast<double>(B));
      });
  }
  BatchOutcome total = std::move(parts[0]);
  Tensor logits({B, total.logits.dim(1)});
  std::size_t row = 0;
  auto append = [&](const Tensor& l) {
    std::copy(l.data().begin(), l.data().end(), logits.data().begin() + static_cast<std::ptrdiff_t>(row * l.dim(1)));
    row += l.dim(0);
  };
  append(total.logits);
  for (std::size_t w = 1; w < workers; ++w) {
    accumulate(total.grads, parts[w].grads);
    total.loss += parts[w].loss;
    total.nll += parts[w].nll;
    total.kl += parts[w].kl;
    append(parts[w].logits);
  }
  total.logits = std::move(logits);
  return total;
}

// Eval-mode validation record: probabilities from z = mu, nll on them, and
// KL(q || N(0, I)).
inline EpochRecord validation_record(const ModelParams& params, const DatasetSplit& split, double beta,
                                     std::size_t epoch, std::size_t threads) {
  EpochRecord r;
  r.epoch = epoch;
  r.split = "val";
  const std::span<const std::size_t> idx(split.val);
  if (idx.empty()) {
    r.loss = r.nll = r.kl = r.auc = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  Tensor probs = predict_dataset(params, split.data, idx, threads);
  Tensor y = split.data.targets(idx);
  EvalReport ev = evaluate_scores(probs, y);
  r.auc = ev.macro_auc;
  r.f1 = ev.macro_f1;
  double nll = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], 1e-15, 1.0 - 1e-15);
    nll -= y[i] != 0.0 ? std::log(p) : std::log1p(-p);
  }
  r.nll = nll / static_cast<double>(probs.size());
  // KL of the posterior against N(0, I), averaged over the split.
  double kl = 0;
  for (std::size_t b = 0; b < idx.size(); b += 128) {
    const std::size_t e = std::min(idx.size(), b + 128);
    Tape tape;
    BoundParams bp(tape, params, false);
    Encoded enc = encode(bp, tape.constant(split.data.images(idx.subspan(b, e - b))));
    GaussianLatent q = posterior(bp, enc.feat_vec);
    kl += gaussian_kl_standard(q.mu, q.log_var).value().item() * static_cast<double>(e - b);
  }
  r.kl = kl / static_cast<double>(idx.size());
  r.loss = r.nll + beta * r.kl;
  return r;
}

inline void check_finite(double v, const char* what, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(v))
    throw NumericError(std::string("non-finite ") + what + " at epoch " + std::to_string(epoch) + ", batch " +
                       std::to_string(batch));
}

inline TrainResult run_epochs(Checkpoint state, Checkpoint best, const StageInputs& in,
                              const TrainConfig& cfg, const TrainHooks& hooks, std::vector<EpochRecord> log) {
  const DatasetSplit& split = *in.split;
  EarlyStopping stopper(cfg.early_stop);
  stopper.restore(state.stop_seen, state.stop_best, state.stop_strikes);
  Rng rng;
  rng.set_state(state.rng_state);

  auto emit = [&](const EpochRecord& r) {
    log.push_back(r);
    if (hooks.on_record) hooks.on_record(r);
  };
  auto sync = [&] {
    state.rng_state = rng.state();
    state.stop_seen = stopper.seen();
    state.stop_best = stopper.best();
    state.stop_strikes = stopper.strikes();
  };

  // Epoch 0: the starting point is itself a candidate.
  if (!state.stop_seen) {
    EpochRecord v = validation_record(state.params, split, cfg.beta, 0, cfg.threads);
    emit(v);
    stopper.observe(v.auc);
    state.best_metric = v.auc;
    state.best_epoch = 0;
    sync();
    best = state;
    if (hooks.on_epoch_end) hooks.on_epoch_end(state);
  }

  const std::size_t n_train = in.stage == 1 ? split.train.size() : split.annotated.size();
  if (n_train == 0) throw InputError(in.stage == 1 ? "empty training set" : "empty annotated subset");
  TrainResult result;
  while (state.epoch < cfg.max_epochs && !stopper.should_stop()) {
    const std::size_t epoch = state.epoch + 1;
    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = in.stage == 1 ? split.train[i] : i;
    for (std::size_t i = n_train; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    EpochRecord tr;
    tr.epoch = epoch;
    tr.split = "train";
    Tensor all_logits({n_train, state.params.config().num_labels});
    std::vector<std::size_t> seen_ids;
    seen_ids.reserve(n_train);
    for (std::size_t b = 0, batch = 0; b < n_train; b += cfg.batch_size, ++batch) {
      const std::size_t e = std::min(n_train, b + cfg.batch_size);
      const std::span<const std::size_t> pos(order.data() + b, e - b);
      BatchOutcome out = batch_step(state.params, in, pos, cfg, rng);
      check_finite(out.loss, "loss", epoch, batch);
      adam_step(state.params, out.grads, state.adam, cfg.adam);
      const double w = static_cast<double>(e - b);
      tr.loss += out.loss * w;
      tr.nll += out.nll * w;
      tr.kl += out.kl * w;
      std::copy(out.logits.data().begin(), out.logits.data().end(),
                all_logits.data().begin() + static_cast<std::ptrdiff_t>(b * out.logits.dim(1)));
      for (std::size_t p : pos) seen_ids.push_back(in.stage == 1 ? p : split.annotated[p]);
    }
    tr.loss /= static_cast<double>(n_train);
    tr.nll /= static_cast<double>(n_train);
    tr.kl /= static_cast<double>(n_train);
    for (double& v : all_logits.data()) v = detail::sigmoid_value(v);
    EvalReport ev = evaluate_scores(all_logits, split.data.targets(seen_ids));
    tr.auc = ev.macro_auc;
    tr.f1 = ev.macro_f1;

    snap_to_storage(state.params);
    snap_to_storage(state.adam);
    state.epoch = epoch;
    emit(tr);
    EpochRecord v = validation_record(state.params, split, cfg.beta, epoch, cfg.threads);
    emit(v);
    stopper.observe(v.auc);
    if (v.auc > state.best_metric || (std::isnan(state.best_metric) && !std::isnan(v.auc))) {
      state.best_metric = v.auc;
      state.best_epoch = epoch;
    }
    sync();
    if (state.best_epoch == epoch) best = state;
    if (hooks.on_epoch_end) hooks.on_epoch_end(state);
  }
  result.stopped_early = stopper.should_stop();
  result.last = std::move(state);
  result.best = std::move(best);
  result.log = std::move(log);
  return result;
}

}  // namespace detail

// Initial stage-1 state: He-initialized model, stage-1 freeze plan, fresh
// Adam, generator seeded from cfg.seed.
inline Checkpoint initial_stage1_state(const ModelConfig& model_cfg, const TrainConfig& cfg) {
  Checkpoint c;
  c.stage = 1;
  c.params = ModelParams(model_cfg);
  Rng init(derive_seed(cfg.seed, 1));
  c.params.init_all(init);
  FreezePlan::stage1().apply(c.params);
  snap_to_storage(c.params);
  c.rng_state = Rng(derive_seed(cfg.seed, 3)).state();
  c.best_metric = std::numeric_limits<double>::quiet_NaN();
  return c;
}

inline TrainResult train_stage1(const DatasetSplit& split, const TrainConfig& cfg,
                                const ModelConfig& model_cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  split.validate();
  if (split.train.empty()) throw InputError("stage 1: empty base training set");
  if (split.data.num_labels != model_cfg.num_labels || split.data.image_size != model_cfg.image_size)
    throw ConfigError("stage 1: dataset and model dimensions disagree");
  Checkpoint init = initial_stage1_state(model_cfg, cfg);
  detail::StageInputs in{&split, nullptr, 1};
  return detail::run_epochs(init, init, in, cfg, hooks, {});
}

// Initial stage-2 state derived from a stage-1 checkpoint.
inline Checkpoint initial_stage2_state(const Checkpoint& stage1, const TrainConfig& cfg,
                                       const Stage2Options& opt) {
  if (stage1.stage != 1) throw UsageError("stage 2 requires a stage-1 checkpoint (got stage " +
                                          std::to_string(stage1.stage) + ")");
  if (!opt.plan.releases_anything()) throw ContractError("stage 2 freeze plan releases no parameter group");
  Checkpoint c;
  c.stage = 2;
  c.params = stage1.params;
  Rng init(derive_seed(cfg.seed, 2));
  c.params.init_group(Group::annotation_encoder, init);
  c.params.init_group(Group::prior_net, init);
  if (opt.zero_init_annotation_side) {
    c.params.zero_group(Group::annotation_encoder);
    c.params.zero_group(Group::prior_net);
  }
  opt.plan.apply(c.params);
  snap_to_storage(c.params);
  c.rng_state = Rng(derive_seed(cfg.seed, 4)).state();
  c.best_metric = std::numeric_limits<double>::quiet_NaN();
  return c;
}

inline TrainResult train_stage2(const Checkpoint& stage1, const DatasetSplit& split,
                                const std::vector<AnnotationMap>& maps, const TrainConfig& cfg,
                                const Stage2Options& opt = {}, const TrainHooks& hooks = {}) {
  cfg.validate();
  split.validate();
  if (split.annotated.empty()) throw InputError("stage 2: empty annotated subset");
  if (maps.size() != split.annotated.size()) throw InputError("stage 2: one annotation map per annotated image required");
  Checkpoint init = initial_stage2_state(stage1, cfg, opt);
  detail::StageInputs in{&split, &maps, 2};
  return detail::run_epochs(init, init, in, cfg, hooks, {});
}

// Continues a run from its latest epoch-end state. `best` is the best-so-far
// checkpoint of the interrupted run.
inline TrainResult resume_training(const Checkpoint& last, const Checkpoint& best, const DatasetSplit& split,
                                   const std::vector<AnnotationMap>* maps, const TrainConfig& cfg,
                                   const TrainHooks& hooks = {}) {
  cfg.validate();
  split.validate();
  if (last.stage == 2 && (!maps || maps->size() != split.annotated.size()))
    throw InputError("resume: stage 2 needs the annotation maps");
  detail::StageInputs in{&split, last.stage == 2 ? maps : nullptr, last.stage};
  return detail::run_epochs(last, best, in, cfg, hooks, {});
}

}  // namespace pinf
