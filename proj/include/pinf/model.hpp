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
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pinf/autodiff.hpp"
#include "pinf/rng.hpp"
#include "pinf/tensor.hpp"

// Conditional-prior variational classifier.
//
//   feat_map, feat_vec = encode(x)               (conv stack + global pool)
//   q(z|x)   = N(mu, exp(log_var)) from post_mlp2(relu(post_mlp1(feat_vec)))
//   p(z|c)   = N(mu_p, exp(log_var_p)) from prior_net(pool(annotation_encoder(c)))
//   logits   = ch2([ch1(feat_vec); z])
//
// Training minimizes nll + beta * KL(q || prior), with prior = N(0, I) for the
// base objective and p(z|c) for the annotated-subset objective.
namespace pinf {

inline constexpr double kLogVarLimit = 30.0;

struct ModelConfig {
  std::size_t image_size = 64;
  std::vector<std::size_t> channels{16, 32, 64};  // stride-2 3x3 convs after a 1-channel input
  std::size_t latent_dim = 128;
  std::size_t num_labels = 4;
  std::size_t hidden = 512;

  std::size_t feature_channels() const { return channels.back(); }
  std::size_t feature_size() const { return image_size >> channels.size(); }

  void validate() const {
    if (channels.empty()) throw ConfigError("model: empty encoder channel plan");
    for (auto c : channels)
      if (c == 0) throw ConfigError("model: zero channel count");
    if (image_size == 0 || image_size % (std::size_t{1} << channels.size()) != 0)
      throw ConfigError("model: image_size must be divisible by 2^depth");
    if (feature_size() < 1) throw ConfigError("model: encoder too deep for image size");
    if (image_size >> (channels.size() - 1) < 3)
      throw ConfigError("model: every conv input must be at least 3x3");
    if (latent_dim < 1) throw ConfigError("model: latent_dim must be >= 1");
    if (num_labels < 1) throw ConfigError("model: num_labels must be >= 1");
    if (hidden < 1) throw ConfigError("model: hidden must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Group : int {
  encoder = 0,
  post_mlp1,
  post_mlp2,
  annotation_encoder,
  prior_net,
  ch1,
  ch2,
};

inline constexpr std::array<Group, 7> kAllGroups{
    Group::encoder,  Group::post_mlp1, Group::post_mlp2, Group::annotation_encoder,
    Group::prior_net, Group::ch1,      Group::ch2};

inline constexpr std::string_view group_name(Group g) {
  switch (g) {
    case Group::encoder: return "encoder";
    case Group::post_mlp1: return "post_mlp1";
    case Group::post_mlp2: return "post_mlp2";
    case Group::annotation_encoder: return "annotation_encoder";
    case Group::prior_net: return "prior_net";
    case Group::ch1: return "ch1";
    case Group::ch2: return "ch2";
  }
  return "?";
}

inline std::optional<Group> group_from_name(std::string_view s) {
  for (Group g : kAllGroups)
    if (group_name(g) == s) return g;
  return std::nullopt;
}

struct NamedTensor {
  std::string name;  // "<group>/<tensor>", e.g. "encoder/conv0.w"
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct ParamGroup {
  Group id = Group::encoder;
  std::vector<NamedTensor> tensors;
  bool frozen = false;
};

// All learnable tensors, organized in the seven named groups.
class ModelParams {
 public:
  ModelParams() = default;

  // Allocates every group at the shapes implied by `cfg`, zero-filled.
  explicit ModelParams(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    for (Group g : kAllGroups) groups_[static_cast<int>(g)].id = g;
    const std::size_t C = cfg.feature_channels(), Hd = cfg.hidden, n = cfg.latent_dim;
    for (Group enc : {Group::encoder, Group::annotation_encoder}) {
      std::size_t in = 1;
      for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
        add(enc, "conv" + std::to_string(i) + ".w", {cfg.channels[i], in, 3, 3});
        add(enc, "conv" + std::to_string(i) + ".b", {cfg.channels[i]});
        in = cfg.channels[i];
      }
    }
    add_mlp(Group::post_mlp1, C, Hd, Hd);
    add_mlp(Group::post_mlp2, Hd, Hd, 2 * n);
    add_mlp(Group::prior_net, C, Hd, 2 * n);
    add_mlp(Group::ch1, C, Hd, Hd);
    add_mlp(Group::ch2, Hd + n, Hd, cfg.num_labels);
  }

  const ModelConfig& config() const noexcept { return cfg_; }

  ParamGroup& group(Group g) { return groups_[static_cast<int>(g)]; }
  const ParamGroup& group(Group g) const { return groups_[static_cast<int>(g)]; }
  std::span<ParamGroup> groups() { return groups_; }
  std::span<const ParamGroup> groups() const { return groups_; }

  const Tensor& at(const std::string& full_name) const {
    for (const auto& g : groups_)
      for (const auto& t : g.tensors)
        if (t.name == full_name) return t.value;
    throw UsageError("unknown parameter " + full_name);
  }
  Tensor& at(const std::string& full_name) {
    return const_cast<Tensor&>(std::as_const(*this).at(full_name));
  }

  // He-normal weights (sqrt(1/fan_in) for output layers), zero biases.
  void init_group(Group g, Rng& rng) {
    for (auto& t : group(g).tensors) {
      Tensor& v = t.value;
      if (v.rank() == 1) {
        v.fill(0.0);
        continue;
      }
      std::size_t fan_in = 1;
      for (std::size_t i = 1; i < v.rank(); ++i) fan_in *= v.shape()[i];
      const bool output_layer = t.name.ends_with("fc2.w") && g != Group::post_mlp1 && g != Group::ch1;
      const double sd = std::sqrt((output_layer ? 1.0 : 2.0) / static_cast<double>(fan_in));
      for (double& x : v.data()) x = rng.normal() * sd;
    }
  }
  void init_all(Rng& rng) {
    for (Group g : kAllGroups) init_group(g, rng);
  }
  void zero_group(Group g) {
    for (auto& t : group(g).tensors) t.value.fill(0.0);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& g : groups_)
      for (const auto& t : g.tensors) n += t.value.size();
    return n;
  }

  // Tensors and shapes equal (frozen flags ignored).
  bool same_values(const ModelParams& o) const {
    for (std::size_t i = 0; i < groups_.size(); ++i)
      if (groups_[i].tensors != o.groups_[i].tensors) return false;
    return true;
  }

 private:
  void add(Group g, const std::string& name, Shape shape) {
    group(g).tensors.push_back(
        {std::string(group_name(g)) + "/" + name, Tensor::zeros(std::move(shape))});
  }
  void add_mlp(Group g, std::size_t in, std::size_t hid, std::size_t out) {
    add(g, "fc1.w", {hid, in});
    add(g, "fc1.b", {hid});
    add(g, "fc2.w", {out, hid});
    add(g, "fc2.b", {out});
  }

  ModelConfig cfg_;
  std::array<ParamGroup, 7> groups_;
};

// Parameters placed on a tape: frozen groups as constants, the rest as named
// differentiable leaves. Entries can also be supplied explicitly (gradient
// checks bind perturbed copies this way).
class BoundParams {
 public:
  // With `trainable == false` every group is bound as a constant.
  BoundParams(Tape& tape, const ModelParams& params, bool trainable = true)
      : cfg_(params.config()) {
    for (const auto& g : params.groups())
      for (const auto& t : g.tensors)
        vars_.emplace(t.name, (g.frozen || !trainable) ? tape.constant(t.value)
                                                       : tape.parameter(t.value, t.name));
  }
  BoundParams(const ModelConfig& cfg, std::map<std::string, Var> vars)
      : cfg_(cfg), vars_(std::move(vars)) {}

  Var operator()(Group g, std::string_view name) const {
    const std::string key = std::string(group_name(g)) + "/" + std::string(name);
    auto it = vars_.find(key);
    if (it == vars_.end()) throw UsageError("parameter not bound: " + key);
    return it->second;
  }
  const ModelConfig& config() const noexcept { return cfg_; }

 private:
  ModelConfig cfg_;
  std::map<std::string, Var> vars_;
};

struct GaussianLatent {
  Var mu;
  Var log_var;
};

struct Encoded {
  Var feat_map;  // last conv activation [B,C,h,w]
  Var feat_vec;  // global average pool  [B,C]
};

struct LossParts {
  Var loss;
  Var nll;
  Var kl;
  Var logits;  // from the first latent sample
};

namespace detail {

inline Var two_layer(const BoundParams& p, Group g, Var x, bool relu_out) {
  Var h = relu(linear(x, p(g, "fc1.w"), p(g, "fc1.b")));
  Var y = linear(h, p(g, "fc2.w"), p(g, "fc2.b"));
  return relu_out ? relu(y) : y;
}

inline GaussianLatent split_latent(Var out, std::size_t n) {
  return {narrow_cols(out, 0, n), clamp(narrow_cols(out, n, n), -kLogVarLimit, kLogVarLimit)};
}

inline void check_images(const ModelConfig& cfg, const Var& x, const char* what) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg.image_size || s[3] != cfg.image_size)
    throw DimensionError(std::string(what) + ": expected [B,1," + std::to_string(cfg.image_size) +
                         "," + std::to_string(cfg.image_size) + "], got " + shape_str(s));
}

}  // namespace detail

// Runs an encoder-shaped group (`encoder` or `annotation_encoder`) on [B,1,H,W].
inline Encoded encode(const BoundParams& p, Var x, Group which = Group::encoder) {
  const ModelConfig& cfg = p.config();
  detail::check_images(cfg, x, "encode");
  Var h = x;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::string id = "conv" + std::to_string(i);
    h = relu(channel_bias(conv2d(h, p(which, id + ".w"), 2, 1), p(which, id + ".b")));
  }
  return {h, global_avg_pool(h)};
}

// q(z|x): two sequential two-layer MLPs on the pooled image features.
inline GaussianLatent posterior(const BoundParams& p, Var feat_vec) {
  Var h = detail::two_layer(p, Group::post_mlp1, feat_vec, true);
  return detail::split_latent(detail::two_layer(p, Group::post_mlp2, h, false),
                              p.config().latent_dim);
}

// p(z|c): annotation maps [B,1,H,W] through the annotation encoder and prior_net.
inline GaussianLatent prior_conditional(const BoundParams& p, Var annotations) {
  Encoded e = encode(p, annotations, Group::annotation_encoder);
  return detail::split_latent(detail::two_layer(p, Group::prior_net, e.feat_vec, false),
                              p.config().latent_dim);
}

inline GaussianLatent standard_normal_latent(Tape& tape, std::size_t batch, std::size_t n) {
  return {tape.constant(Tensor::zeros({batch, n})), tape.constant(Tensor::zeros({batch, n}))};
}

// Reparameterized draw z = mu + exp(log_var / 2) * eps, eps ~ N(0, I) taken
// from `rng` in row-major order.
inline Var sample_latent(const GaussianLatent& g, Rng& rng) {
  Tensor eps(g.mu.shape());
  for (double& e : eps.data()) e = rng.normal();
  return reparameterize(g.mu, g.log_var, eps);
}

// p(y|z,x): logits = ch2([ch1(feat_vec); z]).
inline Var classify(const BoundParams& p, Var z, Var feat_vec) {
  Var hx = detail::two_layer(p, Group::ch1, feat_vec, true);
  return detail::two_layer(p, Group::ch2, concat(hx, z, 1), false);
}

namespace detail {

inline LossParts assemble_loss(const BoundParams& p, const Encoded& e, const GaussianLatent& q,
                               const GaussianLatent& prior, const Tensor& labels, double beta,
                               Rng& rng, std::size_t samples) {
  if (beta < 0.0) throw UsageError("beta must be >= 0");
  if (samples < 1) throw UsageError("sample count must be >= 1");
  Var logits = classify(p, sample_latent(q, rng), e.feat_vec);
  Var nll = bce_with_logits(logits, labels);
  for (std::size_t l = 1; l < samples; ++l)
    nll = add(nll, bce_with_logits(classify(p, sample_latent(q, rng), e.feat_vec), labels));
  if (samples > 1) nll = scale(nll, 1.0 / static_cast<double>(samples));
  Var kl = gaussian_kl(q.mu, q.log_var, prior.mu, prior.log_var);
  return {add(nll, scale(kl, beta)), nll, kl, logits};
}

}  // namespace detail

// Base objective: nll + beta * KL(q(z|x) || N(0, I)).
inline LossParts loss_base(const BoundParams& p, Var images, const Tensor& labels, double beta,
                           Rng& rng, std::size_t samples = 1) {
  Encoded e = encode(p, images);
  GaussianLatent q = posterior(p, e.feat_vec);
  GaussianLatent prior =
      standard_normal_latent(*images.tape(), images.shape()[0], p.config().latent_dim);
  return detail::assemble_loss(p, e, q, prior, labels, beta, rng, samples);
}

// Annotated-subset objective: nll + beta * KL(q(z|x) || p(z|c)).
inline LossParts loss_sub(const BoundParams& p, Var images, const Tensor& labels,
                          Var annotations, double beta, Rng& rng, std::size_t samples = 1) {
  if (annotations.shape() != images.shape())
    throw DimensionError("loss_sub: annotation batch " + shape_str(annotations.shape()) +
                         " does not match images " + shape_str(images.shape()));
  Encoded e = encode(p, images);
  GaussianLatent q = posterior(p, e.feat_vec);
  GaussianLatent prior = prior_conditional(p, annotations);
  return detail::assemble_loss(p, e, q, prior, labels, beta, rng, samples);
}

// Evaluation-mode logits (z = mu).
inline Var predict_logits(const BoundParams& p, Var images) {
  Encoded e = encode(p, images);
  return classify(p, posterior(p, e.feat_vec).mu, e.feat_vec);
}

// Per-label probabilities for a batch, evaluation mode. No gradients kept.
inline Tensor predict_proba(const ModelParams& params, const Tensor& images) {
  Tape tape;
  BoundParams p(tape, params, false);
  Tensor logits = predict_logits(p, tape.constant(images)).value();
  for (double& v : logits.data()) v = detail::sigmoid_value(v);
  return logits;
}

}  // namespace pinf
