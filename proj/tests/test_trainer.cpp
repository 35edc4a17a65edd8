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

#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "pinf/synth.hpp"
#include "pinf/trainer.hpp"
#include "test_util.hpp"

namespace pinf {
namespace {

SynthDataset small_data(std::uint64_t seed = 21) {
  SynthSpec s;
  s.image_size = 16;
  s.num_classes = 2;
  s.motif_size = 5;
  s.n_base = 100;
  s.n_annotated = 16;
  s.seed = seed;
  return generate(s);
}

ModelConfig small_model() {
  ModelConfig m;
  m.image_size = 16;
  m.channels = {4, 8};
  m.latent_dim = 8;
  m.hidden = 16;
  m.num_labels = 2;
  return m;
}

TrainConfig small_train(std::size_t epochs = 3) {
  TrainConfig t;
  t.batch_size = 8;
  t.max_epochs = epochs;
  t.seed = 5;
  t.beta = 0.1;
  t.early_stop.patience = 100;
  return t;
}

std::string bytes_of(const Checkpoint& c) { return serialize_checkpoint(c); }

GradTable full_grads(const ModelParams& p, double value) {
  GradTable g;
  for (const auto& grp : p.groups())
    if (!grp.frozen)
      for (const auto& t : grp.tensors) g.emplace(t.name, Tensor(t.value.shape(), value));
  return g;
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ModelParams p(small_model());
  Rng rng(1);
  p.init_all(rng);
  FreezePlan::stage1().apply(p);
  const ModelParams before = p;
  AdamState st;
  AdamConfig cfg;
  adam_step(p, full_grads(p, 1.0), st, cfg);
  EXPECT_EQ(st.step, 1u);
  for (Group g : kAllGroups) {
    const auto& a = before.group(g).tensors;
    const auto& b = p.group(g).tensors;
    for (std::size_t t = 0; t < a.size(); ++t)
      for (std::size_t i = 0; i < a[t].value.size(); ++i) {
        const double delta = a[t].value[i] - b[t].value[i];
        if (p.group(g).frozen) {
          EXPECT_EQ(delta, 0.0);
        } else {
          EXPECT_NEAR(delta, 1e-3 / (1 + 1e-8), 1e-15);
        }
      }
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ModelParams p(small_model());
  Rng rng(2);
  p.init_all(rng);
  const ModelParams before = p;
  AdamState st;
  adam_step(p, full_grads(p, 0.0), st, {});
  EXPECT_TRUE(p.same_values(before));
}

TEST(Adam, FreezeContract) {
  ModelParams p(small_model());
  Rng rng(3);
  p.init_all(rng);
  FreezePlan::stage2_default().apply(p);
  AdamState st;
  GradTable g = full_grads(p, 0.5);
  g.emplace("encoder/conv0.w", Tensor(p.at("encoder/conv0.w").shape(), 1.0));
  EXPECT_THROW(adam_step(p, g, st, {}), ContractError);

  GradTable missing = full_grads(p, 0.5);
  missing.erase("ch2/fc1.w");
  EXPECT_THROW(adam_step(p, missing, st, {}), ContractError);

  const ModelParams before = p;
  adam_step(p, full_grads(p, 0.5), st, {});
  for (Group grp : {Group::encoder, Group::post_mlp1, Group::ch1})
    EXPECT_EQ(p.group(grp).tensors, before.group(grp).tensors);
  EXPECT_NE(p.group(Group::ch2).tensors, before.group(Group::ch2).tensors);
  EXPECT_EQ(st.m.count("encoder/conv0.w"), 0u);
}

TEST(EarlyStop, ScriptedSequence) {
  EarlyStopping s({0.01, 3});
  EXPECT_FALSE(s.observe(0.70));
  EXPECT_FALSE(s.observe(0.71));  // +1.43%
  EXPECT_EQ(s.strikes(), 0u);
  EXPECT_FALSE(s.observe(0.712));  // +0.28%
  EXPECT_FALSE(s.observe(0.713));  // +0.14%
  EXPECT_EQ(s.strikes(), 2u);
  EXPECT_DOUBLE_EQ(s.best(), 0.713);
  EXPECT_TRUE(s.observe(0.713));
  EXPECT_TRUE(s.should_stop());
}

TEST(EarlyStop, ImprovementResetsStrikes) {
  EarlyStopping s({0.01, 2});
  s.observe(0.5);
  s.observe(0.5);
  EXPECT_EQ(s.strikes(), 1u);
  s.observe(0.6);
  EXPECT_EQ(s.strikes(), 0u);
  EXPECT_THROW(EarlyStopping({0.01, 0}), ConfigError);
}

TEST(Stage1, ZeroEpochsReturnsInitialization) {
  auto d = small_data();
  auto cfg = small_train(0);
  auto r = train_stage1(d.split, cfg, small_model());
  const Checkpoint init = initial_stage1_state(small_model(), cfg);
  EXPECT_TRUE(r.best.params.same_values(init.params));
  EXPECT_EQ(r.best.epoch, 0u);
  EXPECT_EQ(r.best.stage, 1);
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_EQ(r.log[0].split, "val");
}

TEST(Stage1, SameSeedIsBitIdentical) {
  auto d = small_data();
  auto cfg = small_train(2);
  std::string csv_a, csv_b;
  TrainHooks ha, hb;
  ha.on_record = [&](const EpochRecord& r) { csv_a += metrics_csv_line(r) + "\n"; };
  hb.on_record = [&](const EpochRecord& r) { csv_b += metrics_csv_line(r) + "\n"; };
  auto a = train_stage1(d.split, cfg, small_model(), ha);
  auto b = train_stage1(d.split, cfg, small_model(), hb);
  EXPECT_EQ(bytes_of(a.best), bytes_of(b.best));
  EXPECT_EQ(bytes_of(a.last), bytes_of(b.last));
  EXPECT_EQ(csv_a, csv_b);
  cfg.seed = 6;
  auto c = train_stage1(d.split, cfg, small_model());
  EXPECT_NE(bytes_of(a.last), bytes_of(c.last));
}

TEST(Stage1, MetricsLogShape) {
  auto d = small_data();
  auto r = train_stage1(d.split, small_train(2), small_model());
  ASSERT_EQ(r.log.size(), 5u);  // val@0, then train/val per epoch
  EXPECT_EQ(r.log[1].split, "train");
  EXPECT_EQ(r.log[2].split, "val");
  EXPECT_EQ(r.log[4].epoch, 2u);
  const std::string line = metrics_csv_line(r.log[1]);
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 6);
  EXPECT_EQ(line.rfind("1,train,", 0), 0u);
  EXPECT_EQ(std::string(kMetricsHeader), "epoch,split,loss,nll,kl,auc,f1");
}

TEST(Stage1, LossDecreasesOnFixedBatch) {
  SynthSpec s;
  s.n_base = 100;
  s.n_annotated = 10;
  auto d = generate(s);
  std::vector<std::size_t> batch(32);
  std::iota(batch.begin(), batch.end(), 0);
  const Tensor x = d.split.data.images(batch), y = d.split.data.targets(batch);
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig tc;
    tc.seed = seed;
    Checkpoint c = initial_stage1_state(ModelConfig{}, tc);
    auto loss_at = [&](bool step) {
      Tape tape;
      BoundParams bp(tape, c.params);
      Rng rng(seed);
      LossParts lp = loss_base(bp, tape.constant(x), y, tc.beta, rng);
      const double v = lp.loss.value().item();
      if (step) adam_step(c.params, tape.backward(lp.loss), c.adam, tc.adam);
      return v;
    };
    const double first = loss_at(true);
    for (int i = 1; i < 10; ++i) loss_at(true);
    if (loss_at(false) < first) ++decreased;
  }
  EXPECT_EQ(decreased, 5);
}

TEST(Stage1, NonFiniteLossAborts) {
  auto d = small_data();
  auto cfg = small_train(1);
  cfg.adam.learning_rate = 1e300;
  EXPECT_THROW(train_stage1(d.split, cfg, small_model()), NumericError);
}

TEST(Stage1, EmptyTrainingSetRejected) {
  auto d = small_data();
  d.split.train.clear();
  d.split.annotated.clear();
  d.split.annotations.clear();
  EXPECT_THROW(train_stage1(d.split, small_train(1), small_model()), InputError);
}

TEST(Checkpoints, RoundTripIsByteIdentical) {
  auto d = small_data();
  auto r = train_stage1(d.split, small_train(1), small_model());
  auto dir = testing::scratch_dir("ckpt_rt");
  save_checkpoint(r.last, dir / "a.ckpt");
  Checkpoint back = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(bytes_of(back), bytes_of(r.last));
  EXPECT_TRUE(back.params.same_values(r.last.params));
  EXPECT_EQ(back.adam, r.last.adam);
  EXPECT_EQ(back.rng_state, r.last.rng_state);
  std::ifstream fa(dir / "a.ckpt", std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(fa), {}), std::string(std::istreambuf_iterator<char>(fb), {}));
}

TEST(Checkpoints, CorruptionIsDetected) {
  auto d = small_data();
  const std::string bytes = bytes_of(train_stage1(d.split, small_train(0), small_model()).best);
  EXPECT_EQ(bytes.substr(0, 4), "PINF");
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), ChecksumError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 10)), ChecksumError);
  std::string flipped = bytes;
  flipped[bytes.size() / 3] ^= 0x40;
  EXPECT_THROW(deserialize_checkpoint(flipped), ChecksumError);

  // Unknown version with a valid checksum.
  std::string v2 = bytes.substr(0, bytes.size() - 4);
  v2[4] = 2;
  const std::uint32_t crc = detail::crc32_of(v2.data(), v2.size());
  v2.append(reinterpret_cast<const char*>(&crc), 4);
  EXPECT_THROW(deserialize_checkpoint(v2), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), IoError);
}

TEST(Checkpoints, ResumeMatchesUninterruptedRun) {
  auto d = small_data();
  auto cfg = small_train(4);
  std::string mid;
  TrainHooks h;
  h.on_epoch_end = [&](const Checkpoint& c) {
    if (c.epoch == 2) mid = bytes_of(c);
  };
  std::vector<std::string> full_log;
  h.on_record = [&](const EpochRecord& r) { full_log.push_back(metrics_csv_line(r)); };
  auto full = train_stage1(d.split, cfg, small_model(), h);
  ASSERT_FALSE(mid.empty());

  Checkpoint from = deserialize_checkpoint(mid);
  std::vector<std::string> resumed_log;
  TrainHooks h2;
  h2.on_record = [&](const EpochRecord& r) { resumed_log.push_back(metrics_csv_line(r)); };
  // The best-so-far state of the interrupted run is passed through unchanged.
  auto resumed = resume_training(from, full.best.best_epoch <= 2 ? full.best : from, d.split, nullptr, cfg, h2);
  EXPECT_EQ(bytes_of(resumed.last), bytes_of(full.last));
  EXPECT_EQ(bytes_of(resumed.best), bytes_of(full.best));
  ASSERT_EQ(resumed_log.size(), 4u);
  EXPECT_TRUE(std::equal(resumed_log.begin(), resumed_log.end(), full_log.end() - 4));
}

class Stage2Test : public ::testing::Test {
 protected:
  void SetUp() override {
    data_ = small_data();
    stage1_ = train_stage1(data_.split, small_train(2), small_model()).best;
    maps_ = annotation_maps(data_.split, AnnotationKind::gaze, {});
  }
  SynthDataset data_;
  Checkpoint stage1_;
  std::vector<AnnotationMap> maps_;
};

TEST_F(Stage2Test, DefaultPlanKeepsFrozenGroupsBitIdentical) {
  int checked = 0;
  TrainHooks h;
  h.on_epoch_end = [&](const Checkpoint& c) {
    for (Group g : {Group::encoder, Group::post_mlp1, Group::ch1}) {
      EXPECT_EQ(c.params.group(g).tensors, stage1_.params.group(g).tensors);
      EXPECT_TRUE(c.params.group(g).frozen);
    }
    ++checked;
  };
  auto r = train_stage2(stage1_, data_.split, maps_, small_train(3), {}, h);
  EXPECT_EQ(checked, 4);
  EXPECT_EQ(r.last.stage, 2);
  EXPECT_NE(r.last.params.group(Group::ch2).tensors, stage1_.params.group(Group::ch2).tensors);
  EXPECT_NE(r.last.params.group(Group::prior_net).tensors, stage1_.params.group(Group::prior_net).tensors);
}

TEST_F(Stage2Test, AllReleasedPlanIsAccepted) {
  Stage2Options o;
  o.plan = FreezePlan::all_released();
  auto r = train_stage2(stage1_, data_.split, maps_, small_train(1), o);
  EXPECT_NE(r.last.params.group(Group::encoder).tensors, stage1_.params.group(Group::encoder).tensors);
}

TEST_F(Stage2Test, RejectsWrongStageAndEmptyPlan) {
  Checkpoint s2 = stage1_;
  s2.stage = 2;
  EXPECT_THROW(train_stage2(s2, data_.split, maps_, small_train(1)), UsageError);
  Stage2Options o;
  o.plan.frozen.fill(true);
  EXPECT_THROW(train_stage2(stage1_, data_.split, maps_, small_train(1), o), ContractError);
}

TEST_F(Stage2Test, ZeroAnnotationSideFirstStepMatchesStage1) {
  auto cfg = small_train(1);
  Stage2Options o;
  o.zero_init_annotation_side = true;
  Checkpoint s2 = initial_stage2_state(stage1_, cfg, o);
  std::vector<std::size_t> pos{0, 3, 5, 7, 1, 2, 9, 11};
  detail::StageInputs in1{&data_.split, nullptr, 1}, in2{&data_.split, &maps_, 2};
  Checkpoint s1 = stage1_;
  snap_to_storage(s1.params);
  Rng r1(17), r2(17);
  auto a = detail::batch_step(s1.params, in1, pos, cfg, r1);
  auto b = detail::batch_step(s2.params, in2, pos, cfg, r2);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.kl, b.kl);
}

TEST_F(Stage2Test, ResumeMatchesUninterruptedRun) {
  auto cfg = small_train(3);
  std::string mid;
  TrainHooks h;
  h.on_epoch_end = [&](const Checkpoint& c) {
    if (c.epoch == 1) mid = bytes_of(c);
  };
  auto full = train_stage2(stage1_, data_.split, maps_, cfg, {}, h);
  Checkpoint from = deserialize_checkpoint(mid);
  auto resumed = resume_training(from, full.best.best_epoch <= 1 ? full.best : from, data_.split, &maps_, cfg);
  EXPECT_EQ(bytes_of(resumed.last), bytes_of(full.last));
  EXPECT_EQ(bytes_of(resumed.best), bytes_of(full.best));
  EXPECT_THROW(resume_training(from, from, data_.split, nullptr, cfg), InputError);
}

TEST(ParallelBatches, NonDeterministicModeStillTrains) {
  auto d = small_data();
  auto cfg = small_train(1);
  cfg.deterministic = false;
  cfg.threads = 3;
  auto r = train_stage1(d.split, cfg, small_model());
  EXPECT_TRUE(std::isfinite(r.log.back().loss));
}

}  // namespace
}  // namespace pinf
