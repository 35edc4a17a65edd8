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

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "pinf/autodiff.hpp"
#include "pinf/model.hpp"

namespace pinf {

// Which parameter groups are released (trainable) during a stage.
struct FreezePlan {
  std::array<bool, 7> frozen{};  // indexed by Group

  bool is_frozen(Group g) const { return frozen[static_cast<int>(g)]; }
  FreezePlan& set(Group g, bool f) {
    frozen[static_cast<int>(g)] = f;
    return *this;
  }

  // Everything but the annotation side trains.
  static FreezePlan stage1() {
    FreezePlan p;
    p.set(Group::annotation_encoder, true).set(Group::prior_net, true);
    return p;
  }
  // Lower layers, the first posterior MLP and CH1 frozen; CH2, the second
  // posterior MLP and the annotation side released.
  static FreezePlan stage2_default() {
    FreezePlan p;
    p.set(Group::encoder, true).set(Group::post_mlp1, true).set(Group::ch1, true);
    return p;
  }
  static FreezePlan all_released() { return FreezePlan{}; }

  bool releases_anything() const {
    for (bool f : frozen)
      if (!f) return true;
    return false;
  }

  void apply(ModelParams& params) const {
    for (Group g : kAllGroups) params.group(g).frozen = is_frozen(g);
  }

  friend bool operator==(const FreezePlan&, const FreezePlan&) = default;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(learning_rate > 0) || !(eps > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw ConfigError("adam: learning rate and eps must be > 0, betas in [0,1)");
  }
};

// First and second moments per parameter tensor, keyed by full name.
struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t step = 0;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

// One bias-corrected Adam update of every unfrozen group. Frozen groups and
// their moments are not touched; supplying a gradient for one is an error, as
// is omitting a gradient for an unfrozen tensor.
inline void adam_step(ModelParams& params, const GradTable& grads, AdamState& state,
                      const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    (void)g;
    const auto slash = name.find('/');
    auto grp = group_from_name(name.substr(0, slash));
    if (!grp) throw ContractError("gradient for unknown parameter " + name);
    if (params.group(*grp).frozen)
      throw ContractError("gradient supplied for frozen parameter " + name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t), bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& grp : params.groups()) {
    if (grp.frozen) continue;
    for (auto& p : grp.tensors) {
      auto it = grads.find(p.name);
      if (it == grads.end()) throw ContractError("missing gradient for unfrozen parameter " + p.name);
      const Tensor& g = it->second;
      if (g.shape() != p.value.shape()) throw DimensionError("gradient shape mismatch for " + p.name);
      Tensor& m = state.m.try_emplace(p.name, Tensor::zeros(p.value.shape())).first->second;
      Tensor& v = state.v.try_emplace(p.name, Tensor::zeros(p.value.shape())).first->second;
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        p.value[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
      }
    }
  }
}

// Rounds every value to the nearest float so in-memory state equals what a
// checkpoint stores.
inline void snap_to_storage(Tensor& t) {
  for (double& x : t.data()) x = static_cast<double>(static_cast<float>(x));
}
inline void snap_to_storage(ModelParams& p) {
  for (auto& g : p.groups())
    for (auto& t : g.tensors) snap_to_storage(t.value);
}
inline void snap_to_storage(AdamState& s) {
  for (auto& [k, t] : s.m) snap_to_storage(t);
  for (auto& [k, t] : s.v) snap_to_storage(t);
}

}  // namespace pinf
