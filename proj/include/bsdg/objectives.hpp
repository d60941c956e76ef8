#pragma once

#include <vector>

#include "bsdg/model.hpp"

// Inner and outer training objectives.
//
// Inner:  L_in = CE(clean) + lambda * KL(clean || adversarially perturbed),
// where the perturbation of each sample maximizes the KL under an L2 ball of
// radius rho (one power-iteration step by default) and is then treated as a
// constant: gradients never flow through the perturbation's construction.
// The perturbed branch reuses the clean batch's prompt.
//
// Outer:  L_out = mean over K surrogate-corrupted copies of the batch of the
// classification loss, measuring how well the current prompt transfers.

namespace bsdg {

template <typename T>
struct AdvConfig {
  T lambda = T(0.5);
  T rho = T(1);
  int adv_steps = 1;
  T xi = T(0);               // probe scale; 0 picks 1e-6 * sqrt(input size)
  bool kl_clean_ref = true;  // true: KL(clean || perturbed), false: flipped
};

template <typename T>
struct BoundModel {
  BoundParams<T> theta, phi, omega;
};

template <typename T>
BoundModel<T> bind_model(ad::Tape<T>& tape, const ModelParams<T>& mp) {
  return {bind(tape, mp.theta), bind(tape, mp.phi), bind(tape, mp.omega)};
}

// Worst-case L2 perturbations of radius exactly rho, one row per sample.
// Runs its own probe tapes against constant parameters and returns an
// off-tape tensor. Samples whose KL gradient vanishes keep their random
// starting direction. Extra steps re-probe at the current full-radius
// perturbation (projected ascent).
template <typename T>
Tensor<T> adversarial_direction(const ModelSpec& spec, const ModelParams<T>& mp,
                                const Tensor<T>& x, const AdvConfig<T>& cfg,
                                RngStream rng) {
  detail::require(x.rank() == 4, "adversarial_direction: input must be [N,C,H,W]");
  detail::require(cfg.rho > T(0), "adversarial_direction: rho must be positive");
  const std::size_t N = x.shape()[0];
  const std::size_t dim = x.size() / N;

  // Unit starting directions.
  std::vector<double> dir(x.size());
  for (std::size_t n = 0; n < N; ++n) {
    double ss = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      dir[n * dim + i] = rng.normal();
      ss += dir[n * dim + i] * dir[n * dim + i];
    }
    if (ss > 0.0) {
      const double inv = 1.0 / std::sqrt(ss);
      for (std::size_t i = 0; i < dim; ++i) dir[n * dim + i] *= inv;
    } else {
      dir[n * dim] = 1.0;
    }
  }

  const double xi = cfg.xi > T(0)
                        ? static_cast<double>(cfg.xi)
                        : 1e-6 * std::sqrt(static_cast<double>(dim));

  auto theta_c = as_constants(mp.theta);
  auto phi_c = as_constants(mp.phi);
  auto omega_c = as_constants(mp.omega);

  // Clean branch, fully constant: logits and the prompt both come from the
  // unperturbed batch.
  auto z_clean = backbone_features(spec, theta_c, x);
  auto prompt_clean = encode_prompt(spec, omega_c, z_clean);
  auto logits_clean = head_logits(spec, phi_c, z_clean, prompt_clean);

  for (int step = 0; step < cfg.adv_steps; ++step) {
    const double scale_probe = step == 0 ? xi : static_cast<double>(cfg.rho);
    Tensor<T> r0(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
      r0.values()[i] = static_cast<T>(scale_probe * dir[i]);

    ad::Tape<T> tape;
    auto r = tape.leaf(r0);
    auto xp = ad::add(x, r);
    auto logits_pert =
        predict_logits_with_prompt(spec, theta_c, phi_c, prompt_clean, xp);
    auto kl = cfg.kl_clean_ref ? ad::kl_mean(logits_clean, logits_pert)
                               : ad::kl_mean(logits_pert, logits_clean);
    tape.backward(kl, ad::PassKind::probe);
    ad::GradBook<T> book(tape);
    auto g = book.grad(r);

    for (std::size_t n = 0; n < N; ++n) {
      double ss = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        const double v = static_cast<double>(g.values()[n * dim + i]);
        ss += v * v;
      }
      if (ss > 0.0) {
        const double inv = 1.0 / std::sqrt(ss);
        for (std::size_t i = 0; i < dim; ++i)
          dir[n * dim + i] = static_cast<double>(g.values()[n * dim + i]) * inv;
      }
      // else: keep the current (random or previous) direction.
    }
  }

  Tensor<T> eps(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    eps.values()[i] = static_cast<T>(static_cast<double>(cfg.rho) * dir[i]);
  return eps;
}

// Clean classification loss.
template <typename T>
Tensor<T> inner_cl(const ModelSpec& spec, const BoundModel<T>& bm,
                   const Tensor<T>& x, const std::vector<int>& labels) {
  return ad::ce_mean(predict_logits(spec, bm.theta, bm.phi, bm.omega, x), labels);
}

// Consistency term at a FIXED perturbation: both branches share the clean
// prompt, and eps enters as a constant (Danskin treatment).
template <typename T>
Tensor<T> inner_adv(const ModelSpec& spec, const BoundModel<T>& bm,
                    const Tensor<T>& x, const Tensor<T>& eps,
                    const AdvConfig<T>& cfg) {
  detail::require(eps.shape() == x.shape(), "inner_adv: eps/input shape mismatch");
  detail::require(!eps.on_tape(), "inner_adv: eps must be a constant");
  auto z = backbone_features(spec, bm.theta, x);
  auto prompt = encode_prompt(spec, bm.omega, ad::stop_gradient(z));
  auto logits_clean = head_logits(spec, bm.phi, z, prompt);
  auto zp = backbone_features(spec, bm.theta, ad::add(x, eps));
  auto logits_pert = head_logits(spec, bm.phi, zp, prompt);
  return cfg.kl_clean_ref ? ad::kl_mean(logits_clean, logits_pert)
                          : ad::kl_mean(logits_pert, logits_clean);
}

template <typename T>
struct InnerLossParts {
  Tensor<T> total, cl, adv;  // adv is a plain zero scalar when lambda == 0
  Tensor<T> eps;             // empty when lambda == 0
};

// Builds the full inner loss on `tape`, binding the master parameters as
// leaves (returned through `bound`). With lambda == 0 the adversarial branch
// is skipped entirely: no probe passes, no RNG consumption.
template <typename T>
InnerLossParts<T> build_inner_loss(ad::Tape<T>& tape, const ModelSpec& spec,
                                   const ModelParams<T>& mp, const Tensor<T>& x,
                                   const std::vector<int>& labels,
                                   const AdvConfig<T>& cfg, RngStream rng,
                                   BoundModel<T>* bound = nullptr) {
  InnerLossParts<T> parts;
  Tensor<T> eps;
  if (cfg.lambda != T(0))
    eps = adversarial_direction(spec, mp, x, cfg, rng);

  BoundModel<T> bm = bind_model(tape, mp);
  parts.cl = inner_cl(spec, bm, x, labels);
  if (cfg.lambda != T(0)) {
    parts.eps = eps;
    parts.adv = inner_adv(spec, bm, x, eps, cfg);
    parts.total = ad::add(parts.cl, ad::scale(parts.adv, cfg.lambda));
  } else {
    parts.adv = Tensor<T>::scalar(T(0));
    parts.total = parts.cl;
  }
  if (bound) *bound = bm;
  return parts;
}

// Mean classification loss over K surrogate-corrupted batches.
template <typename T>
Tensor<T> outer_loss(const ModelSpec& spec, const BoundModel<T>& bm,
                     const std::vector<Tensor<T>>& surrogate_batches,
                     const std::vector<int>& labels) {
  detail::require(!surrogate_batches.empty(), "outer_loss: needs at least one batch");
  Tensor<T> acc;
  for (std::size_t k = 0; k < surrogate_batches.size(); ++k) {
    auto ce = ad::ce_mean(
        predict_logits(spec, bm.theta, bm.phi, bm.omega, surrogate_batches[k]),
        labels);
    acc = k == 0 ? ce : ad::add(acc, ce);
  }
  return ad::scale(acc, T(1) / static_cast<T>(surrogate_batches.size()));
}

}  // namespace bsdg
