// Two-level optimizer: a single inner gradient step on the task parameters,
// an outer gradient on the prompt parameters, and a symmetric-difference
// approximation of the mixed second-order chain term so that training never
// needs derivatives of derivatives. An exact oracle for that chain term is
// provided for small models, built from a hand-written gradient program that
// the tape differentiates once (still strictly first-order machinery).
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bsdg/objectives.hpp"
#include "bsdg/transforms.hpp"

namespace bsdg {

enum class HypergradMode { fd, exact_audit };

template <typename T>
struct HypergradConfig {
  T epsilon_theta = T(0.01);            // half-width scale of the symmetric difference
  HypergradMode mode = HypergradMode::fd;
  bool recompute_committed_grad = false;  // refresh the task gradient after the prompt update
  bool normalize_delta = false;           // rescale the probe to epsilon/|delta| instead
};

// A vector in task-parameter space: one entry per backbone tensor and one per
// head tensor, keyed like the model's own sets.
template <typename T>
struct TaskVec {
  ParamSet<T> theta{Partition::theta, {}};
  ParamSet<T> phi{Partition::phi, {}};
  std::size_t count() const { return theta.count() + phi.count(); }
};

template <typename T>
void task_axpy(ModelParams<T>& p, T a, const TaskVec<T>& v) {
  axpy(p.theta, a, v.theta);
  axpy(p.phi, a, v.phi);
}

template <typename T>
T task_sq_norm(const TaskVec<T>& v) {
  return sq_norm(v.theta) + sq_norm(v.phi);
}

template <typename T>
T task_l2(const TaskVec<T>& v) {
  return std::sqrt(task_sq_norm(v));
}

template <typename T>
bool set_finite(const ParamSet<T>& ps) {
  for (const auto& [k, v] : ps.values)
    for (const auto x : v.values())
      if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

template <typename T>
bool task_finite(const TaskVec<T>& v) {
  return set_finite(v.theta) && set_finite(v.phi);
}

// ---------------------------------------------------------------------------
// Inner step
// ---------------------------------------------------------------------------

template <typename T>
struct InnerStepResult {
  ModelParams<T> next;  // candidate updated task parameters; prompt side copied
  TaskVec<T> g_in;      // task gradient of the inner loss at the starting point
  T total = T(0), cl = T(0), adv = T(0);
  Tensor<T> eps;        // perturbation actually used (empty when the weight is 0)
};

// One gradient-descent step on the inner loss. The starting parameters are
// not mutated; the updated values come back as a fresh set.
template <typename T>
InnerStepResult<T> inner_step(const ModelSpec& spec, const ModelParams<T>& params,
                              const Tensor<T>& x, const std::vector<int>& y,
                              const AdvConfig<T>& adv, RngStream adv_rng,
                              T alpha_theta) {
  ad::Tape<T> tape;
  BoundModel<T> bound;
  auto parts = build_inner_loss(tape, spec, params, x, y, adv, adv_rng, &bound);
  InnerStepResult<T> r;
  r.total = parts.total.item();
  r.cl = parts.cl.item();
  r.adv = parts.adv.item();
  if (!std::isfinite(static_cast<double>(r.total)))
    throw training_error("inner step: loss is not finite (cl=" + std::to_string(r.cl) +
                         ", adv=" + std::to_string(r.adv) + ")");
  tape.backward(parts.total, ad::PassKind::param);
  ad::GradBook<T> book(tape);
  r.g_in.theta = extract_grads(book, params.theta, bound.theta);
  r.g_in.phi = extract_grads(book, params.phi, bound.phi);
  if (!task_finite(r.g_in))
    throw training_error("inner step: task gradient is not finite");
  r.next = params.clone();
  task_axpy(r.next, -alpha_theta, r.g_in);
  r.eps = parts.eps;
  return r;
}

// ---------------------------------------------------------------------------
// Outer gradients
// ---------------------------------------------------------------------------

template <typename T>
struct OuterGrads {
  TaskVec<T> delta;      // gradient of the outer loss over the task parameters
  ParamSet<T> g_direct;  // gradient over the prompt parameters (direct term)
  T value = T(0);
};

// One evaluation of the outer loss at the updated task parameters. The update
// that produced them is a committed value, not part of this graph, so the
// prompt-side gradient here is the direct term only.
template <typename T>
OuterGrads<T> outer_grads(const ModelSpec& spec, const ModelParams<T>& params,
                          const std::vector<Tensor<T>>& surrogate_batches,
                          const std::vector<int>& labels) {
  ad::Tape<T> tape;
  auto bm = bind_model(tape, params);
  auto loss = outer_loss(spec, bm, surrogate_batches, labels);
  OuterGrads<T> r;
  r.value = loss.item();
  if (!std::isfinite(static_cast<double>(r.value)))
    throw training_error("outer loss is not finite");
  tape.backward(loss, ad::PassKind::param);
  ad::GradBook<T> book(tape);
  r.delta.theta = extract_grads(book, params.theta, bm.theta);
  r.delta.phi = extract_grads(book, params.phi, bm.phi);
  r.g_direct = extract_grads(book, params.omega, bm.omega);
  if (!task_finite(r.delta) || !set_finite(r.g_direct))
    throw training_error("outer gradients are not finite");
  return r;
}

// ---------------------------------------------------------------------------
// Chain term, symmetric-difference form
// ---------------------------------------------------------------------------

// Builder contract: bind `p` onto `tape` (leaves stored in `bound`) and return
// the scalar inner loss. The builder must consume identical randomness on
// every call so paired evaluations differ only through the parameters.
template <typename T, typename BuildLoss>
ParamSet<T> hypergrad_fd_with(BuildLoss&& build, const ModelParams<T>& params,
                              const TaskVec<T>& delta, T alpha_theta,
                              const HypergradConfig<T>& cfg) {
  detail::require(cfg.epsilon_theta > T(0), "hypergrad: probe scale must be positive");
  T eps = cfg.epsilon_theta;
  if (cfg.normalize_delta) {
    const T dn = task_l2(delta);
    if (dn == T(0)) return zeros_like(params.omega);
    eps = cfg.epsilon_theta / dn;
  }
  auto prompt_grad_at = [&](T sign) {
    ModelParams<T> p = params.clone();
    task_axpy(p, sign * eps, delta);
    ad::Tape<T> tape;
    BoundModel<T> bound;
    auto loss = build(tape, p, bound);
    tape.backward(loss, ad::PassKind::param);
    ad::GradBook<T> book(tape);
    return extract_grads(book, p.omega, bound.omega);
  };
  ParamSet<T> gp = prompt_grad_at(T(1));
  ParamSet<T> gm = prompt_grad_at(T(-1));
  ParamSet<T> chain = zeros_like(params.omega);
  const T c = alpha_theta / (T(2) * eps);
  axpy(chain, -c, gp);
  axpy(chain, +c, gm);
  if (!set_finite(chain)) throw training_error("chain term is not finite");
  return chain;
}

// Chain term for the real model: the same inner loss rebuilt at the two
// probed task-parameter points, sharing one adversarial random substream.
template <typename T>
ParamSet<T> hypergrad_fd(const ModelSpec& spec, const ModelParams<T>& params,
                         const TaskVec<T>& delta, const Tensor<T>& x,
                         const std::vector<int>& y, const AdvConfig<T>& adv,
                         RngStream adv_rng, T alpha_theta,
                         const HypergradConfig<T>& cfg) {
  auto build = [&](ad::Tape<T>& tape, const ModelParams<T>& p, BoundModel<T>& bound) {
    return build_inner_loss(tape, spec, p, x, y, adv, adv_rng, &bound).total;
  };
  return hypergrad_fd_with(build, params, delta, alpha_theta, cfg);
}

// ---------------------------------------------------------------------------
// Chain term, exact oracle
// ---------------------------------------------------------------------------

inline constexpr std::size_t kAuditParamLimit = 512;

// Gradient-program contract: with the prompt parameters bound as tape leaves
// and the task parameters entering as plain constants, return taped tensors
// equal to the inner loss's task gradient, keyed by the task tensor names.
// Differentiating the probe scalar sum(delta * grad) once through that
// program yields the exact chain term (the probe direction held constant).
template <typename T, typename GradProgram>
ParamSet<T> hypergrad_exact_with(GradProgram&& program, const ModelParams<T>& params,
                                 const TaskVec<T>& delta, T alpha_theta,
                                 std::size_t param_limit = kAuditParamLimit) {
  const std::size_t n_task = params.theta.count() + params.phi.count();
  if (n_task > param_limit)
    throw config_error("exact chain-term audit refused: " + std::to_string(n_task) +
                       " task parameters exceed the audit limit of " +
                       std::to_string(param_limit));
  ad::Tape<T> tape;
  BoundParams<T> omega_bound = bind(tape, params.omega);
  std::map<std::string, Tensor<T>> g = program(tape, omega_bound, params);
  Tensor<T> s;
  bool first = true;
  auto take = [&](const ParamSet<T>& part) {
    for (const auto& [name, d] : part.values) {
      auto it = g.find(name);
      detail::require(it != g.end(),
                      "audit: gradient program is missing '" + name + "'");
      auto term = ad::sum_all(ad::mul(it->second, d));
      s = first ? term : ad::add(s, term);
      first = false;
    }
  };
  take(delta.theta);
  take(delta.phi);
  detail::require(!first, "audit: empty probe direction");
  tape.backward(s, ad::PassKind::audit);
  ad::GradBook<T> book(tape);
  ParamSet<T> g_omega = extract_grads(book, params.omega, omega_bound);
  ParamSet<T> chain = zeros_like(params.omega);
  axpy(chain, -alpha_theta, g_omega);
  return chain;
}

// ---------------------------------------------------------------------------
// Full training step
// ---------------------------------------------------------------------------

template <typename T>
struct TrainerState {
  std::uint64_t t = 0;
  ModelParams<T> params;
  T alpha_theta = T(1e-4);
  T alpha_omega = T(1e-5);
  AdvConfig<T> adv;
  HypergradConfig<T> hyper;
  std::uint64_t seed = 0;  // master seed; per-step substreams derive from it
};

template <typename T>
struct StepStats {
  T inner_total = T(0), inner_cl = T(0), inner_adv = T(0);
  T outer_value = T(0);
  T grad_norm_theta = T(0);  // task-gradient norm at the starting point
  T grad_norm_omega = T(0);  // norm of the full prompt gradient (direct + chain)
};

// One full optimization step, in a fixed order:
//   (1) build the surrogate batches from the source batch,
//   (2) inner step at the current task parameters,
//   (3) outer gradients at the updated task parameters,
//   (4) chain term around the starting task parameters,
//   (5) total prompt gradient = direct + chain,
//   (6) prompt update,
//   (7) commit the task update (optionally recomputed with the new prompt),
//   (8) advance the step counter.
// Default mode runs exactly four parameter backward passes: (2), (3), and the
// two probes inside (4); recompute_committed_grad adds a fifth in (7).
template <typename T>
StepStats<T> train_step(const ModelSpec& spec, TrainerState<T>& st,
                        const Tensor<T>& x, const std::vector<int>& y,
                        const std::vector<Pipeline>& pipelines) {
  if (st.hyper.mode != HypergradMode::fd)
    throw config_error(
        "train_step: the exact chain-term oracle is for audits only; "
        "training runs in fd mode");
  detail::require(!pipelines.empty(), "train_step: needs at least one pipeline");
  try {
    std::vector<Tensor<T>> sur;
    sur.reserve(pipelines.size());
    const std::uint64_t sur_seed = mix_seed(st.seed, stream_tag::surrogate, st.t);
    for (std::size_t k = 0; k < pipelines.size(); ++k)
      sur.push_back(apply_pipeline(x, pipelines[k], mix_seed(sur_seed, k)));

    const RngStream adv_rng(mix_seed(st.seed, stream_tag::inner, st.t));
    auto inner = inner_step(spec, st.params, x, y, st.adv, adv_rng, st.alpha_theta);
    auto outer = outer_grads(spec, inner.next, sur, y);
    auto chain = hypergrad_fd(spec, st.params, outer.delta, x, y, st.adv, adv_rng,
                              st.alpha_theta, st.hyper);

    ParamSet<T> g_omega = outer.g_direct.clone();
    axpy(g_omega, T(1), chain);
    axpy(st.params.omega, -st.alpha_omega, g_omega);

    if (st.hyper.recompute_committed_grad) {
      auto redo = inner_step(spec, st.params, x, y, st.adv, adv_rng, st.alpha_theta);
      st.params.theta = std::move(redo.next.theta);
      st.params.phi = std::move(redo.next.phi);
    } else {
      st.params.theta = std::move(inner.next.theta);
      st.params.phi = std::move(inner.next.phi);
    }
    st.t += 1;

    StepStats<T> out;
    out.inner_total = inner.total;
    out.inner_cl = inner.cl;
    out.inner_adv = inner.adv;
    out.outer_value = outer.value;
    out.grad_norm_theta = task_l2(inner.g_in);
    out.grad_norm_omega = l2(g_omega);
    return out;
  } catch (const training_error& e) {
    throw training_error(std::string(e.what()) + " [step " + std::to_string(st.t) + "]");
  }
}

}  // namespace bsdg
