#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "bsdg/ops.hpp"
#include "bsdg/params.hpp"
#include "bsdg/random.hpp"

// Classifier with a prompt-conditioned feature path. The backbone (theta)
// maps images to features Z; a permutation-invariant prompt encoder (omega)
// reads the batch's feature set and emits per-channel scale/shift (gamma,
// beta); the head (phi) classifies the concatenation of raw and modulated
// features. Modulation standardizes Z with batch statistics before applying
// gamma and beta, and those statistics stay differentiable.

namespace bsdg {

struct ModelSpec {
  std::size_t in_channels = 1, in_height = 16, in_width = 16;
  std::size_t num_classes = 10;

  std::string backbone = "mlp";                 // "mlp" | "cnn"
  std::vector<std::size_t> mlp_widths = {128, 64};  // last entry = feature dim
  std::vector<std::size_t> cnn_channels = {8, 16};
  std::size_t cnn_feature_dim = 64;

  std::vector<std::size_t> prompt_widths = {32, 32};  // per-element encoder
  std::string pooling = "mean";                 // "mean" | "meanmax" | "attention"
  std::vector<std::size_t> prompt_post_widths = {32};

  std::vector<std::size_t> head_widths = {64};

  bool standardize = true;
  double eps_std = 1e-5;

  std::size_t feature_dim() const {
    return backbone == "mlp" ? mlp_widths.back() : cnn_feature_dim;
  }
  std::size_t input_size() const { return in_channels * in_height * in_width; }

  void validate() const {
    if (backbone != "mlp" && backbone != "cnn")
      throw config_error("model: backbone must be 'mlp' or 'cnn'");
    if (pooling != "mean" && pooling != "meanmax" && pooling != "attention")
      throw config_error("model: pooling must be 'mean', 'meanmax' or 'attention'");
    if (backbone == "mlp" && mlp_widths.empty())
      throw config_error("model: mlp_widths must not be empty");
    if (backbone == "cnn") {
      if (cnn_channels.size() != 2)
        throw config_error("model: cnn backbone expects two conv blocks");
      if (in_height % 4 != 0 || in_width % 4 != 0)
        throw config_error("model: cnn backbone needs H and W divisible by 4");
    }
    if (prompt_widths.empty())
      throw config_error("model: prompt_widths must not be empty");
    if (num_classes < 2) throw config_error("model: num_classes must be >= 2");
    if (!(eps_std > 0)) throw config_error("model: eps_std must be positive");
  }
};

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"in_channels", s.in_channels},
          {"in_height", s.in_height},
          {"in_width", s.in_width},
          {"num_classes", s.num_classes},
          {"backbone", s.backbone},
          {"mlp_widths", s.mlp_widths},
          {"cnn_channels", s.cnn_channels},
          {"cnn_feature_dim", s.cnn_feature_dim},
          {"prompt_widths", s.prompt_widths},
          {"pooling", s.pooling},
          {"prompt_post_widths", s.prompt_post_widths},
          {"head_widths", s.head_widths},
          {"standardize", s.standardize},
          {"eps_std", s.eps_std}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "in_channels",   "in_height",      "in_width",           "num_classes",
      "backbone",      "mlp_widths",     "cnn_channels",       "cnn_feature_dim",
      "prompt_widths", "pooling",        "prompt_post_widths", "head_widths",
      "standardize",   "eps_std"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : known) ok = ok || k == it.key();
    if (!ok) throw config_error("model: unknown key '" + it.key() + "'");
  }
  ModelSpec s;
  auto get = [&](const char* k, auto& into) {
    if (j.contains(k)) into = j.at(k).get<std::decay_t<decltype(into)>>();
  };
  get("in_channels", s.in_channels);
  get("in_height", s.in_height);
  get("in_width", s.in_width);
  get("num_classes", s.num_classes);
  get("backbone", s.backbone);
  get("mlp_widths", s.mlp_widths);
  get("cnn_channels", s.cnn_channels);
  get("cnn_feature_dim", s.cnn_feature_dim);
  get("prompt_widths", s.prompt_widths);
  get("pooling", s.pooling);
  get("prompt_post_widths", s.prompt_post_widths);
  get("head_widths", s.head_widths);
  get("standardize", s.standardize);
  get("eps_std", s.eps_std);
  s.validate();
  return s;
}

// All three partitions of a model's parameters, master copies off-tape.
template <typename T>
struct ModelParams {
  ParamSet<T> theta, phi, omega;

  std::size_t count() const { return theta.count() + phi.count() + omega.count(); }

  ModelParams clone() const { return {theta.clone(), phi.clone(), omega.clone()}; }
};

namespace detail_model {

template <typename T>
Tensor<T> glorot(Shape shape, std::size_t fan_in, std::size_t fan_out,
                 RngStream& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-s, s));
  return t;
}

inline std::size_t pooled_dim(const ModelSpec& spec) {
  const std::size_t p = spec.prompt_widths.back();
  return spec.pooling == "meanmax" ? 2 * p : p;
}

}  // namespace detail_model

template <typename T>
ModelParams<T> init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelParams<T> mp;
  mp.theta.partition = Partition::theta;
  mp.phi.partition = Partition::phi;
  mp.omega.partition = Partition::omega;
  RngStream rng(mix_seed(seed, stream_tag::init));
  std::uint64_t slot = 0;
  auto next = [&] {
    RngStream r = rng.derive(slot++);
    return r;
  };

  const std::size_t d = spec.feature_dim();

  if (spec.backbone == "mlp") {
    std::size_t in = spec.input_size();
    for (std::size_t i = 0; i < spec.mlp_widths.size(); ++i) {
      const std::size_t outw = spec.mlp_widths[i];
      auto r = next();
      mp.theta.values.emplace("theta/l" + std::to_string(i) + ".w",
                              detail_model::glorot<T>(Shape{in, outw}, in, outw, r));
      mp.theta.values.emplace("theta/l" + std::to_string(i) + ".b",
                              Tensor<T>(Shape{outw}, T(0)));
      in = outw;
    }
  } else {
    const std::size_t c0 = spec.cnn_channels[0], c1 = spec.cnn_channels[1];
    {
      auto r = next();
      mp.theta.values.emplace(
          "theta/conv0.w",
          detail_model::glorot<T>(Shape{c0, spec.in_channels, 3, 3},
                                  spec.in_channels * 9, c0 * 9, r));
      mp.theta.values.emplace("theta/conv0.b", Tensor<T>(Shape{c0}, T(0)));
    }
    {
      auto r = next();
      mp.theta.values.emplace("theta/conv1.w",
                              detail_model::glorot<T>(Shape{c1, c0, 3, 3}, c0 * 9,
                                                      c1 * 9, r));
      mp.theta.values.emplace("theta/conv1.b", Tensor<T>(Shape{c1}, T(0)));
    }
    const std::size_t flat = c1 * (spec.in_height / 4) * (spec.in_width / 4);
    auto r = next();
    mp.theta.values.emplace("theta/dense.w",
                            detail_model::glorot<T>(Shape{flat, d}, flat, d, r));
    mp.theta.values.emplace("theta/dense.b", Tensor<T>(Shape{d}, T(0)));
  }

  {  // prompt encoder: per-element MLP
    std::size_t in = d;
    for (std::size_t i = 0; i < spec.prompt_widths.size(); ++i) {
      const std::size_t outw = spec.prompt_widths[i];
      auto r = next();
      mp.omega.values.emplace("omega/enc" + std::to_string(i) + ".w",
                              detail_model::glorot<T>(Shape{in, outw}, in, outw, r));
      mp.omega.values.emplace("omega/enc" + std::to_string(i) + ".b",
                              Tensor<T>(Shape{outw}, T(0)));
      in = outw;
    }
    if (spec.pooling == "attention") {
      auto r = next();
      mp.omega.values.emplace(
          "omega/att.v", detail_model::glorot<T>(Shape{in, 1}, in, 1, r));
    }
    std::size_t pin = detail_model::pooled_dim(spec);
    for (std::size_t i = 0; i < spec.prompt_post_widths.size(); ++i) {
      const std::size_t outw = spec.prompt_post_widths[i];
      auto r = next();
      mp.omega.values.emplace("omega/post" + std::to_string(i) + ".w",
                              detail_model::glorot<T>(Shape{pin, outw}, pin, outw, r));
      mp.omega.values.emplace("omega/post" + std::to_string(i) + ".b",
                              Tensor<T>(Shape{outw}, T(0)));
      pin = outw;
    }
    // Heads start as constants: gamma == 1 and beta == 0 exactly, so a fresh
    // model modulates with scale one and shift zero.
    mp.omega.values.emplace("omega/gamma.w", Tensor<T>(Shape{pin, d}, T(0)));
    mp.omega.values.emplace("omega/gamma.b", Tensor<T>(Shape{d}, T(1)));
    mp.omega.values.emplace("omega/beta.w", Tensor<T>(Shape{pin, d}, T(0)));
    mp.omega.values.emplace("omega/beta.b", Tensor<T>(Shape{d}, T(0)));
  }

  {  // head over [Z, Z~]
    std::size_t in = 2 * d;
    for (std::size_t i = 0; i < spec.head_widths.size(); ++i) {
      const std::size_t outw = spec.head_widths[i];
      auto r = next();
      mp.phi.values.emplace("phi/h" + std::to_string(i) + ".w",
                            detail_model::glorot<T>(Shape{in, outw}, in, outw, r));
      mp.phi.values.emplace("phi/h" + std::to_string(i) + ".b",
                            Tensor<T>(Shape{outw}, T(0)));
      in = outw;
    }
    auto r = next();
    mp.phi.values.emplace("phi/out.w", detail_model::glorot<T>(
                                            Shape{in, spec.num_classes}, in,
                                            spec.num_classes, r));
    mp.phi.values.emplace("phi/out.b", Tensor<T>(Shape{spec.num_classes}, T(0)));
  }
  return mp;
}

// Backbone features Z, shape [N, d]. Works with leaf, constant, or
// op-computed weight tensors alike.
template <typename T>
Tensor<T> backbone_features(const ModelSpec& spec, const BoundParams<T>& theta,
                            const Tensor<T>& x) {
  detail::require(x.rank() == 4, "backbone: input must be [N,C,H,W]");
  if (spec.backbone == "mlp") {
    Tensor<T> h = ad::flatten2d(x);
    for (std::size_t i = 0; i < spec.mlp_widths.size(); ++i) {
      h = ad::relu(ad::dense(h, at(theta, "theta/l" + std::to_string(i) + ".w"),
                             at(theta, "theta/l" + std::to_string(i) + ".b")));
    }
    return h;
  }
  Tensor<T> h = ad::maxpool2d_2x2(
      ad::relu(ad::conv2d_3x3(x, at(theta, "theta/conv0.w"), at(theta, "theta/conv0.b"))));
  h = ad::maxpool2d_2x2(
      ad::relu(ad::conv2d_3x3(h, at(theta, "theta/conv1.w"), at(theta, "theta/conv1.b"))));
  return ad::relu(
      ad::dense(ad::flatten2d(h), at(theta, "theta/dense.w"), at(theta, "theta/dense.b")));
}

template <typename T>
struct Prompt {
  Tensor<T> gamma;  // [d]
  Tensor<T> beta;   // [d]
};

// Set encoder over the batch's feature vectors. Per-element MLP, then an
// order-insensitive pooling, then a shared MLP and two affine heads.
template <typename T>
Prompt<T> encode_prompt(const ModelSpec& spec, const BoundParams<T>& omega,
                        const Tensor<T>& features) {
  detail::require(features.rank() == 2, "encode_prompt: features must be [N,d]");
  Tensor<T> e = features;
  for (std::size_t i = 0; i < spec.prompt_widths.size(); ++i) {
    e = ad::relu(ad::dense(e, at(omega, "omega/enc" + std::to_string(i) + ".w"),
                           at(omega, "omega/enc" + std::to_string(i) + ".b")));
  }

  Tensor<T> pooled;  // rank 1
  if (spec.pooling == "mean") {
    pooled = ad::mean_over_batch(e);
  } else if (spec.pooling == "meanmax") {
    pooled = ad::concat_last(ad::mean_over_batch(e), ad::max_over_batch(e));
  } else {
    auto scores = ad::matmul(e, at(omega, "omega/att.v"));  // [N,1]
    auto weights = ad::softmax_last(
        ad::reshape(scores, Shape{std::size_t(1), e.shape()[0]}));  // [1,N]
    pooled = ad::reshape(ad::matmul(weights, e), Shape{e.shape()[1]});
  }

  Tensor<T> q = ad::reshape(pooled, Shape{std::size_t(1), pooled.size()});
  for (std::size_t i = 0; i < spec.prompt_post_widths.size(); ++i) {
    q = ad::relu(ad::dense(q, at(omega, "omega/post" + std::to_string(i) + ".w"),
                           at(omega, "omega/post" + std::to_string(i) + ".b")));
  }
  const std::size_t d = spec.feature_dim();
  Prompt<T> p;
  p.gamma = ad::reshape(
      ad::dense(q, at(omega, "omega/gamma.w"), at(omega, "omega/gamma.b")), Shape{d});
  p.beta = ad::reshape(
      ad::dense(q, at(omega, "omega/beta.w"), at(omega, "omega/beta.b")), Shape{d});
  return p;
}

// gamma * standardize(z) + beta with injected statistics.
template <typename T>
Tensor<T> modulate_with_stats(const ModelSpec& spec, const Tensor<T>& z,
                              const Prompt<T>& p, const Tensor<T>& mu,
                              const Tensor<T>& sigma) {
  auto zs = ad::div(ad::sub(z, mu), ad::add_scalar(sigma, T(spec.eps_std)));
  return ad::add(ad::mul(zs, p.gamma), p.beta);
}

// Batch-statistic modulation. The mean and standard deviation are computed
// over the batch axis and stay on the tape, so gradients flow through them.
template <typename T>
Tensor<T> modulate(const ModelSpec& spec, const Tensor<T>& z, const Prompt<T>& p) {
  if (!spec.standardize) return ad::add(ad::mul(z, p.gamma), p.beta);
  return modulate_with_stats(spec, z, p, ad::mean_over_batch(z),
                             ad::std_over_batch(z));
}

// Modulation plus classifier head over features [N,d] and a given prompt.
template <typename T>
Tensor<T> head_logits(const ModelSpec& spec, const BoundParams<T>& phi,
                      const Tensor<T>& z, const Prompt<T>& prompt) {
  auto zt = modulate(spec, z, prompt);
  Tensor<T> h = ad::concat_last(z, zt);
  for (std::size_t i = 0; i < spec.head_widths.size(); ++i) {
    h = ad::relu(ad::dense(h, at(phi, "phi/h" + std::to_string(i) + ".w"),
                           at(phi, "phi/h" + std::to_string(i) + ".b")));
  }
  return ad::dense(h, at(phi, "phi/out.w"), at(phi, "phi/out.b"));
}

// Full forward pass to logits. The prompt reads the batch's own features
// through a gradient barrier: prompt quality shapes the loss only via gamma
// and beta, not by reshaping the features it summarizes.
template <typename T>
Tensor<T> predict_logits(const ModelSpec& spec, const BoundParams<T>& theta,
                         const BoundParams<T>& phi, const BoundParams<T>& omega,
                         const Tensor<T>& x) {
  auto z = backbone_features(spec, theta, x);
  auto prompt = encode_prompt(spec, omega, ad::stop_gradient(z));
  return head_logits(spec, phi, z, prompt);
}

// Variant that reuses an externally computed prompt (the adversarial
// consistency term holds the clean-batch prompt fixed for both branches).
template <typename T>
Tensor<T> predict_logits_with_prompt(const ModelSpec& spec,
                                     const BoundParams<T>& theta,
                                     const BoundParams<T>& phi,
                                     const Prompt<T>& prompt, const Tensor<T>& x) {
  auto z = backbone_features(spec, theta, x);
  return head_logits(spec, phi, z, prompt);
}

}  // namespace bsdg
