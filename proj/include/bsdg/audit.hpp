// Self-contained reference problems for validating the chain-term machinery:
// a scalar quadratic whose chain term is known in closed form, and a small
// densely-coupled network whose task gradient is also written out by hand as
// a differentiable program. Both are test oracles, not training components.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "bsdg/bilevel.hpp"
#include "bsdg/gradcheck.hpp"

namespace bsdg {

// ---------------------------------------------------------------------------
// Scalar quadratic: inner loss 1/2 (theta - omega)^2.
// Its task gradient is affine in theta, so the symmetric difference is exact
// for every probe width, and the chain term has the closed form
// alpha * delta (the mixed second derivative is -1).
// ---------------------------------------------------------------------------
template <typename T>
struct QuadraticToy {
  ModelParams<T> params;

  static QuadraticToy make(T theta0, T omega0) {
    QuadraticToy q;
    q.params.theta.partition = Partition::theta;
    q.params.phi.partition = Partition::phi;
    q.params.omega.partition = Partition::omega;
    q.params.theta.values.emplace("theta/w", Tensor<T>(Shape{1}, theta0));
    q.params.omega.values.emplace("omega/w", Tensor<T>(Shape{1}, omega0));
    return q;
  }

  Tensor<T> inner(ad::Tape<T>& tape, const ModelParams<T>& p,
                  BoundModel<T>& bound) const {
    bound = bind_model(tape, p);
    auto d = ad::sub(at(bound.theta, "theta/w"), at(bound.omega, "omega/w"));
    return ad::scale(ad::mul(d, d), T(0.5));
  }

  std::map<std::string, Tensor<T>> grad_program(ad::Tape<T>& tape,
                                                const BoundParams<T>& omega_bound,
                                                const ModelParams<T>& p) const {
    (void)tape;
    auto g = ad::sub(p.theta.values.at("theta/w"), at(omega_bound, "omega/w"));
    return {{"theta/w", g}};
  }

  TaskVec<T> direction(T d) const {
    TaskVec<T> v;
    v.theta.values.emplace("theta/w", Tensor<T>(Shape{1}, d));
    return v;
  }
};

// ---------------------------------------------------------------------------
// Small network with the same structural ingredients as the real model:
// tanh features, a batch-pooled prompt, batch standardization, feature-wise
// modulation, and a concatenated linear head. Dimensions: inputs [N,3],
// features [N,4], 3 classes.
//
// Unlike the production model, the prompt input here is NOT behind a
// gradient barrier: the loss is an ordinary smooth function of all
// parameters, so its cross derivatives commute and the probe-based chain
// term has a well-defined exact target to converge to. (With a barrier, the
// value function and the gradient function disagree about the feature→prompt
// path, and the two estimators would approximate different objects.)
//
// Task parameters: w1 [3,4], b1 [4] (features); w3 [8,3], b3 [3] (head).
// Prompt parameters: gw [4,4], gb [4] (scale head); bw [4,4], bb [4] (shift).
// ---------------------------------------------------------------------------
template <typename T>
struct TinyProblem {
  static constexpr std::size_t kIn = 3, kFeat = 4, kClasses = 3;

  Tensor<T> x_in;                     // [N, kIn]
  std::vector<int> y_in;
  std::vector<Tensor<T>> x_out;       // held-out batches for the outer loss
  std::vector<int> y_out;
  T eps_std = T(1e-5);
  ModelParams<T> params;

  static TinyProblem make(std::uint64_t seed, std::size_t n = 8,
                          std::size_t n_out = 6) {
    TinyProblem prob;
    RngStream rng(mix_seed(seed, 0x7111));
    auto fill = [&](Tensor<T>& t, double sd) {
      for (auto& v : t.values()) v = static_cast<T>(rng.normal() * sd);
    };
    prob.x_in = Tensor<T>(Shape{n, kIn});
    fill(prob.x_in, 1.0);
    prob.y_in.resize(n);
    for (auto& l : prob.y_in) l = static_cast<int>(rng.uniform_index(kClasses));
    for (int k = 0; k < 2; ++k) {
      Tensor<T> xb(Shape{n_out, kIn});
      fill(xb, 1.0);
      prob.x_out.push_back(xb);
    }
    prob.y_out.resize(n_out);
    for (auto& l : prob.y_out) l = static_cast<int>(rng.uniform_index(kClasses));

    auto& mp = prob.params;
    mp.theta.partition = Partition::theta;
    mp.phi.partition = Partition::phi;
    mp.omega.partition = Partition::omega;
    auto param = [&](ParamSet<T>& set, const std::string& name, Shape shape,
                     double sd) {
      Tensor<T> t(std::move(shape));
      fill(t, sd);
      set.values.emplace(name, std::move(t));
    };
    param(mp.theta, "theta/w1", Shape{kIn, kFeat}, 0.6);
    param(mp.theta, "theta/b1", Shape{kFeat}, 0.1);
    param(mp.phi, "phi/w3", Shape{2 * kFeat, kClasses}, 0.5);
    param(mp.phi, "phi/b3", Shape{kClasses}, 0.1);
    param(mp.omega, "omega/gw", Shape{kFeat, kFeat}, 0.4);
    param(mp.omega, "omega/gb", Shape{kFeat}, 0.4);
    param(mp.omega, "omega/bw", Shape{kFeat, kFeat}, 0.4);
    param(mp.omega, "omega/bb", Shape{kFeat}, 0.4);
    return prob;
  }

  // Shared forward pass; works for taped and constant bindings alike.
  Tensor<T> logits_for(const BoundModel<T>& bound, const Tensor<T>& x) const {
    auto z = ad::tanh_t(ad::dense(x, at(bound.theta, "theta/w1"),
                                  at(bound.theta, "theta/b1")));
    auto prow = ad::reshape(ad::mean_over_batch(z), Shape{1, kFeat});
    auto gamma = ad::reshape(
        ad::dense(prow, at(bound.omega, "omega/gw"), at(bound.omega, "omega/gb")),
        Shape{kFeat});
    auto beta = ad::reshape(
        ad::dense(prow, at(bound.omega, "omega/bw"), at(bound.omega, "omega/bb")),
        Shape{kFeat});
    auto mu = ad::mean_over_batch(z);
    auto sd = ad::std_over_batch(z);
    auto zn = ad::div(ad::sub(z, mu), ad::add_scalar(sd, eps_std));
    auto zt = ad::add(ad::mul(zn, gamma), beta);
    auto u = ad::concat_last(z, zt);
    return ad::dense(u, at(bound.phi, "phi/w3"), at(bound.phi, "phi/b3"));
  }

  Tensor<T> inner(ad::Tape<T>& tape, const ModelParams<T>& p,
                  BoundModel<T>& bound) const {
    bound = bind_model(tape, p);
    return ad::ce_mean(logits_for(bound, x_in), y_in);
  }

  Tensor<T> outer(ad::Tape<T>& tape, const ModelParams<T>& p,
                  BoundModel<T>& bound) const {
    bound = bind_model(tape, p);
    Tensor<T> acc;
    for (std::size_t k = 0; k < x_out.size(); ++k) {
      auto ce = ad::ce_mean(logits_for(bound, x_out[k]), y_out);
      acc = (k == 0) ? ce : ad::add(acc, ce);
    }
    return ad::scale(acc, T(1) / T(x_out.size()));
  }

  // The task gradient of the inner loss, written out by hand as a function of
  // the prompt parameters (everything else enters as constants). Follows the
  // reverse pass of logits_for step by step; the standardization part uses
  //   dZ = G/D - mean(G)/D - C * sum(G*C) / (N * sigma * D^2)
  // with C = Z - mu, D = sigma + eps, derived from the population statistics.
  std::map<std::string, Tensor<T>> grad_program(ad::Tape<T>& tape,
                                                const BoundParams<T>& omega_bound,
                                                const ModelParams<T>& p) const {
    (void)tape;
    const auto n = static_cast<T>(x_in.shape()[0]);
    const auto& w1 = p.theta.values.at("theta/w1");
    const auto& b1 = p.theta.values.at("theta/b1");
    const auto& w3 = p.phi.values.at("phi/w3");

    // Constant forward quantities (no prompt dependence).
    auto z = ad::tanh_t(ad::dense(x_in, w1, b1));
    auto mu = ad::mean_over_batch(z);
    auto sd = ad::std_over_batch(z);
    auto d = ad::add_scalar(sd, eps_std);
    auto c = ad::sub(z, mu);
    auto zn = ad::div(c, d);
    auto prow = ad::reshape(ad::mean_over_batch(z), Shape{1, kFeat});

    // Prompt-dependent forward (taped through the bound prompt parameters).
    auto gamma = ad::reshape(ad::dense(prow, at(omega_bound, "omega/gw"),
                                       at(omega_bound, "omega/gb")),
                             Shape{kFeat});
    auto beta = ad::reshape(ad::dense(prow, at(omega_bound, "omega/bw"),
                                      at(omega_bound, "omega/bb")),
                            Shape{kFeat});
    auto zt = ad::add(ad::mul(zn, gamma), beta);
    auto u = ad::concat_last(z, zt);
    auto logits = ad::dense(u, w3, p.phi.values.at("phi/b3"));

    // Reverse pass. Cross-entropy over softmax gives (P - onehot)/N.
    auto dlogits = ad::scale(
        ad::sub(ad::softmax_last(logits), ad::onehot<T>(y_in, kClasses)),
        T(1) / n);
    auto g_b3 = ad::sum_over_batch(dlogits);
    auto g_w3 = ad::matmul(ad::transpose2d(u), dlogits);
    auto du = ad::matmul(dlogits, ad::transpose2d(w3));
    auto dz_direct = ad::slice_last(du, 0, kFeat);
    auto dzt = ad::slice_last(du, kFeat, kFeat);

    // Through the modulation and standardization back to the features.
    auto gz = ad::mul(dzt, gamma);
    auto mean_gz = ad::mean_over_batch(gz);
    auto s = ad::sum_over_batch(ad::mul(gz, c));
    auto denom = ad::scale(ad::mul(sd, ad::mul(d, d)), n);
    auto dz_std = ad::sub(ad::sub(ad::div(gz, d), ad::div(mean_gz, d)),
                          ad::mul(c, ad::div(s, denom)));

    // Through the pooled prompt: scale/shift head sensitivities, then the
    // two affine maps back to the pooled features, spread over the batch.
    auto dgamma = ad::reshape(ad::sum_over_batch(ad::mul(dzt, zn)), Shape{1, kFeat});
    auto dbeta = ad::reshape(ad::sum_over_batch(dzt), Shape{1, kFeat});
    auto dp = ad::add(
        ad::matmul(dgamma, ad::transpose2d(at(omega_bound, "omega/gw"))),
        ad::matmul(dbeta, ad::transpose2d(at(omega_bound, "omega/bw"))));
    auto dz_pool = ad::scale(ad::reshape(dp, Shape{kFeat}), T(1) / n);

    auto dz = ad::add(ad::add(dz_direct, dz_std), dz_pool);

    // Through tanh and the first affine layer.
    auto da = ad::mul(dz, ad::add_scalar(ad::neg(ad::mul(z, z)), T(1)));
    auto g_w1 = ad::matmul(ad::transpose2d(x_in), da);
    auto g_b1 = ad::sum_over_batch(da);

    return {{"theta/w1", g_w1},
            {"theta/b1", g_b1},
            {"phi/w3", g_w3},
            {"phi/b3", g_b3}};
  }
};

// Engine-computed task gradient of the small problem's inner loss (used to
// check the hand program and to form the one-step update).
template <typename T>
TaskVec<T> tiny_inner_grad(const TinyProblem<T>& prob, const ModelParams<T>& p) {
  ad::Tape<T> tape;
  BoundModel<T> bound;
  auto loss = prob.inner(tape, p, bound);
  tape.backward(loss, ad::PassKind::param);
  ad::GradBook<T> book(tape);
  TaskVec<T> g;
  g.theta = extract_grads(book, p.theta, bound.theta);
  g.phi = extract_grads(book, p.phi, bound.phi);
  return g;
}

// Outer gradients of the small problem at fixed task parameters.
template <typename T>
OuterGrads<T> tiny_outer_grads(const TinyProblem<T>& prob, const ModelParams<T>& p) {
  ad::Tape<T> tape;
  BoundModel<T> bound;
  auto loss = prob.outer(tape, p, bound);
  OuterGrads<T> r;
  r.value = loss.item();
  tape.backward(loss, ad::PassKind::param);
  ad::GradBook<T> book(tape);
  r.delta.theta = extract_grads(book, p.theta, bound.theta);
  r.delta.phi = extract_grads(book, p.phi, bound.phi);
  r.g_direct = extract_grads(book, p.omega, bound.omega);
  return r;
}

// Value of the one-step objective: the outer loss evaluated at the task
// parameters produced by one inner step taken under prompt parameters `p`.
template <typename T>
T tiny_one_step_objective(const TinyProblem<T>& prob, const ModelParams<T>& p,
                          T alpha_theta) {
  auto g = tiny_inner_grad(prob, p);
  ModelParams<T> stepped = p.clone();
  task_axpy(stepped, -alpha_theta, g);
  ad::Tape<T> tape;
  BoundModel<T> bound;
  return prob.outer(tape, stepped, bound).item();
}

// Central differences of the one-step objective in every prompt coordinate:
// a from-scratch oracle for the direct + chain decomposition that never uses
// either chain-term implementation.
template <typename T>
ParamSet<T> tiny_end_to_end_grad_fd(const TinyProblem<T>& prob,
                                    const ModelParams<T>& p, T alpha_theta, T h) {
  ParamSet<T> grad = zeros_like(p.omega);
  for (auto& [name, gt] : grad.values) {
    for (std::size_t i = 0; i < gt.size(); ++i) {
      ModelParams<T> plus = p.clone();
      plus.omega.values.at(name).values()[i] += h;
      ModelParams<T> minus = p.clone();
      minus.omega.values.at(name).values()[i] -= h;
      gt.values()[i] = (tiny_one_step_objective(prob, plus, alpha_theta) -
                        tiny_one_step_objective(prob, minus, alpha_theta)) /
                       (T(2) * h);
    }
  }
  return grad;
}

// Relative gap between two prompt-space vectors, measured in l2.
template <typename T>
T prompt_rel_gap(const ParamSet<T>& a, const ParamSet<T>& b) {
  ParamSet<T> diff = a.clone();
  axpy(diff, T(-1), b);
  return l2(diff) / (l2(b) + T(1e-12));
}

// ---------------------------------------------------------------------------
// Randomized gradient oracle suite: every differentiable primitive family and
// the composed training losses, re-instantiated with fresh random values and
// verified against f64 central differences. Deterministic under `seed`.
// ---------------------------------------------------------------------------

struct GradcheckRow {
  std::string family;
  std::size_t instances = 0;
  double max_rel_err = 0.0;
};

namespace detail_audit {

inline Tensor<double> rand_t(const Shape& shape, RngStream& rng, double sd = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = rng.normal() * sd;
  return t;
}

// Keeps piecewise-linear inputs away from their kinks so the symmetric
// difference quotient stays on one linear piece.
inline void push_from_zero(Tensor<double>& t, double margin = 5e-2) {
  for (auto& v : t.values())
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
}

inline std::vector<int> rand_labels(std::size_t n, std::size_t classes,
                                    RngStream& rng) {
  std::vector<int> y(n);
  for (auto& l : y) l = static_cast<int>(rng.uniform_index(classes));
  return y;
}

// The micro model used by the composed-loss families. eps_std is raised so
// a feature that happens to be constant across the tiny batch keeps the
// standardization well-conditioned: the check targets the differentiation,
// and a near-zero denominator would drown the comparison in truncation error.
inline ModelSpec gradcheck_model_spec() {
  ModelSpec spec;
  spec.in_channels = 1;
  spec.in_height = 4;
  spec.in_width = 4;
  spec.num_classes = 3;
  spec.mlp_widths = {8, 6};
  spec.prompt_widths = {5};
  spec.prompt_post_widths = {5};
  spec.head_widths = {6};
  spec.eps_std = 0.05;
  return spec;
}

// Fully-jittered parameters: the zero-initialized prompt heads would hide the
// gamma/beta paths from the check, so every tensor gets a random offset.
inline ModelParams<double> jittered_params(const ModelSpec& spec,
                                           std::uint64_t seed) {
  auto p = init_params<double>(spec, seed);
  RngStream rng(mix_seed(seed, 0x9ad));
  for (auto* set : {&p.theta, &p.phi, &p.omega})
    for (auto& [name, t] : set->values)
      for (auto& v : t.values()) v += rng.normal() * 0.3;
  return p;
}

}  // namespace detail_audit

// Runs `per_family` random instances of each primitive family plus the
// composed clean/adversarial/outer losses. Returns the worst relative error
// seen per family; callers decide the acceptance threshold.
inline std::vector<GradcheckRow> run_gradcheck_suite(std::size_t per_family = 12,
                                                     double h = 1e-6,
                                                     std::uint64_t seed = 7) {
  using detail_audit::push_from_zero;
  using detail_audit::rand_labels;
  using detail_audit::rand_t;
  namespace ad = bsdg::ad;
  detail::require(per_family > 0, "run_gradcheck_suite: per_family must be >= 1");
  std::vector<GradcheckRow> rows;

  std::uint64_t family_idx = 0;
  auto run_family = [&](const std::string& name, auto&& make_check) {
    GradcheckRow row{name, per_family, 0.0};
    for (std::size_t i = 0; i < per_family; ++i) {
      RngStream rng(mix_seed(seed, family_idx, i));
      row.max_rel_err = std::max(row.max_rel_err, make_check(rng));
    }
    family_idx += 1;
    rows.push_back(row);
  };

  run_family("dense_chain", [&](RngStream& rng) {
    const std::size_t m = 2 + rng.uniform_index(3), k = 2 + rng.uniform_index(3),
                      n = 2 + rng.uniform_index(3);
    ParamSet<double> p;
    p.values.emplace("a", rand_t(Shape{m, k}, rng));
    p.values.emplace("b", rand_t(Shape{k, n}, rng));
    auto f = [&](ad::Tape<double>&, BoundParams<double>& bp) {
      auto mm = ad::matmul(at(bp, "a"), at(bp, "b"));
      auto t = ad::transpose2d(mm);
      auto c = ad::concat_last(mm, ad::slice_last(mm, 0, 1));
      return ad::add(ad::sum_all(ad::tanh_t(t)), ad::mean_all(ad::mul(c, c)));
    };
    return finite_diff_check<double>(f, p, h);
  });

  run_family("smooth_maps", [&](RngStream& rng) {
    auto t = rand_t(Shape{2 + rng.uniform_index(4), 3}, rng, 0.4);
    for (auto& v : t.values()) v = std::abs(v) + 0.7;
    ParamSet<double> p;
    p.values.emplace("x", t);
    auto f = [&](ad::Tape<double>&, BoundParams<double>& bp) {
      auto x = at(bp, "x");
      auto y = ad::div(ad::log_t(x), ad::add_scalar(ad::sqrt_t(x), 1.0));
      auto z = ad::sub(ad::exp_t(ad::scale(x, 0.2)), ad::neg(y));
      return ad::sum_all(ad::mul(z, y));
    };
    return finite_diff_check<double>(f, p, h);
  });

  run_family("relu_dense", [&](RngStream& rng) {
    ParamSet<double> p;
    auto x = rand_t(Shape{3, 5}, rng);
    push_from_zero(x);
    p.values.emplace("x", x);
    p.values.emplace("w", rand_t(Shape{5, 4}, rng, 0.5));
    p.values.emplace("b", rand_t(Shape{4}, rng, 0.5));
    auto f = [&](ad::Tape<double>&, BoundParams<double>& bp) {
      auto pre = ad::dense(at(bp, "x"), at(bp, "w"), at(bp, "b"));
      return ad::add(ad::mean_all(ad::relu(pre)), ad::mean_all(ad::relu(at(bp, "x"))));
    };
    // Skip instances whose pre-activations straddle a kink at this h.
    ad::Tape<double> probe_tape;
    auto bx = bind(probe_tape, p);
    auto pre = ad::dense(at(bx, "x"), at(bx, "w"), at(bx, "b"));
    for (auto v : pre.values())
      if (std::abs(v) < 1e-4) return 0.0;
    return finite_diff_check<double>(f, p, h);
  });

  run_family("softmax_maps", [&](RngStream& rng) {
    ParamSet<double> p;
    p.values.emplace("x", rand_t(Shape{3 + rng.uniform_index(3), 5}, rng));
    auto f = [&](ad::Tape<double>&, BoundParams<double>& bp) {
      auto s = ad::softmax_last(at(bp, "x"));
      auto l = ad::log_softmax_last(at(bp, "x"));
      return ad::add(ad::sum_all(ad::mul(s, s)), ad::mean_all(ad::mul(l, l)));
    };
    return finite_diff_check<double>(f, p, h);
  });

  run_family("batch_reductions", [&](RngStream& rng) {
    ParamSet<double> p;
    p.values.emplace("x", rand_t(Shape{4 + rng.uniform_index(4), 4}, rng));
    auto f = [&](ad::Tape<double>&, BoundParams<double>& bp) {
      auto x = at(bp, "x");
      auto out = ad::sum_all(ad::mul(ad::mean_over_batch(x), ad::mean_over_batch(x)));
      out = ad::add(out, ad::sum_all(ad::var_over_batch(x)));
      out = ad::add(out, ad::sum_all(ad::std_over_batch(x)));
      out = ad::add(out, ad::sum_all(ad::sum_over_batch(x)));
      return ad::add(out, ad::l2_norm(x));
    };
    return finite_diff_check<double>(f, p, h);
  });

  run_family("max_over_batch", [&](RngStream& rng) {
    ParamSet<double> p;
    Tensor<double> t(Shape{5, 3});
    for (std::size_t i = 0; i < t.size(); ++i)
      t.values()[i] = rng.normal() + 0.01 * static_cast<double>(i);
    p.values.emplace("x", t);
    auto f = [&](ad::Tape<double>&, BoundParams<double>& bp) {
      auto m = ad::max_over_batch(at(bp, "x"));
      return ad::sum_all(ad::mul(m, m));
    };
    return finite_diff_check<double>(f, p, h);
  });

  run_family("conv_pool", [&](RngStream& rng) {
    ParamSet<double> p;
    Tensor<double> x(Shape{2, 2, 4, 4});
    for (std::size_t i = 0; i < x.size(); ++i)
      x.values()[i] = std::cos(static_cast<double>(i) * 0.9 + rng.normal()) +
                      0.02 * static_cast<double>(i % 11);
    p.values.emplace("x", x);
    p.values.emplace("k", rand_t(Shape{3, 2, 3, 3}, rng, 0.4));
    p.values.emplace("b", rand_t(Shape{3}, rng, 0.2));
    auto f = [&](ad::Tape<double>&, BoundParams<double>& bp) {
      auto y = ad::conv2d_3x3(at(bp, "x"), at(bp, "k"), at(bp, "b"));
      return ad::mean_all(ad::maxpool2d_2x2(ad::tanh_t(y)));
    };
    return finite_diff_check<double>(f, p, h);
  });

  run_family("ce_kl", [&](RngStream& rng) {
    const std::size_t n = 3 + rng.uniform_index(3);
    ParamSet<double> p;
    p.values.emplace("a", rand_t(Shape{n, 6}, rng));
    p.values.emplace("b", rand_t(Shape{n, 6}, rng));
    auto y = rand_labels(n, 6, rng);
    auto f = [&](ad::Tape<double>&, BoundParams<double>& bp) {
      return ad::add(ad::ce_mean(at(bp, "a"), y), ad::kl_mean(at(bp, "a"), at(bp, "b")));
    };
    return finite_diff_check<double>(f, p, h);
  });

  // Composed task loss: clean cross entropy plus the adversarial consistency
  // term, with the perturbation and the prompt's feature input frozen the way
  // the training step freezes them (the loss differentiates through the
  // perturbed forward pass, never through the perturbation's construction or
  // the prompt's gradient barrier).
  run_family("task_loss_composed", [&](RngStream& rng) {
    const auto spec = detail_audit::gradcheck_model_spec();
    auto mp = detail_audit::jittered_params(spec, rng.next_u64());
    const std::size_t n = 5;
    Tensor<double> x(Shape{n, 1, 4, 4});
    for (auto& v : x.values()) v = 0.5 + 0.3 * rng.normal();
    auto y = rand_labels(n, spec.num_classes, rng);
    AdvConfig<double> adv;
    adv.lambda = 0.5;
    adv.rho = 0.7;
    auto eps = adversarial_direction(spec, mp, x, adv, rng.derive(3));
    Tensor<double> x_adv = x.clone();
    for (std::size_t i = 0; i < x_adv.size(); ++i) x_adv.values()[i] += eps.values()[i];
    Tensor<double> z_frozen;
    {
      auto tc = as_constants(mp.theta);
      z_frozen = backbone_features(spec, tc, x);
    }
    auto f = [&](ad::Tape<double>&, std::vector<BoundParams<double>>& bp) {
      auto& bth = bp[0];
      auto& bph = bp[1];
      auto& bom = bp[2];
      auto prompt = encode_prompt(spec, bom, z_frozen);
      auto z = backbone_features(spec, bth, x);
      auto logits = head_logits(spec, bph, z, prompt);
      auto z_adv = backbone_features(spec, bth, x_adv);
      auto logits_adv = head_logits(spec, bph, z_adv, prompt);
      auto cl = ad::ce_mean(logits, y);
      auto kl = ad::kl_mean(logits, logits_adv);
      return ad::add(cl, ad::scale(kl, adv.lambda));
    };
    return finite_diff_vector_gap<double>(f, {&mp.theta, &mp.phi, &mp.omega}, h);
  });

  // Composed generalization loss: cross entropy over a held-out batch through
  // the same frozen-prompt prediction path.
  run_family("outer_loss_composed", [&](RngStream& rng) {
    const auto spec = detail_audit::gradcheck_model_spec();
    auto mp = detail_audit::jittered_params(spec, rng.next_u64());
    const std::size_t n = 6;
    Tensor<double> x(Shape{n, 1, 4, 4});
    for (auto& v : x.values()) v = 0.5 + 0.3 * rng.normal();
    auto y = rand_labels(n, spec.num_classes, rng);
    Tensor<double> z_frozen;
    {
      auto tc = as_constants(mp.theta);
      z_frozen = backbone_features(spec, tc, x);
    }
    auto f = [&](ad::Tape<double>&, std::vector<BoundParams<double>>& bp) {
      auto prompt = encode_prompt(spec, bp[2], z_frozen);
      auto z = backbone_features(spec, bp[0], x);
      return ad::ce_mean(head_logits(spec, bp[1], z, prompt), y);
    };
    return finite_diff_vector_gap<double>(f, {&mp.theta, &mp.phi, &mp.omega}, h);
  });

  return rows;
}

}  // namespace bsdg
