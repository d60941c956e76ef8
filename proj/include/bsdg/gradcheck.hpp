#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bsdg/params.hpp"

namespace bsdg {

// Central-difference verification of reverse-mode gradients.
//
// `f` must deterministically build a scalar loss on the given tape from the
// bound parameter sets (one BoundParams per entry of `params`, same order).
// Returns the maximum relative error across all coordinates,
// |analytic - numeric| / (|numeric| + 1e-12).
template <typename T, typename F>
T finite_diff_check(F&& f, std::vector<ParamSet<T>*> params, T h) {
  detail::require(h > T(0), "finite_diff_check: h must be positive");

  auto eval = [&](std::vector<ParamSet<T>*>& ps) -> T {
    ad::Tape<T> tape;
    std::vector<BoundParams<T>> bound;
    bound.reserve(ps.size());
    for (auto* p : ps) bound.push_back(bind(tape, *p));
    Tensor<T> loss = f(tape, bound);
    detail::require(loss.size() == 1, "finite_diff_check: f must return a scalar");
    const T v = loss.item();
    if (!std::isfinite(static_cast<double>(v)))
      throw training_error("finite_diff_check: non-finite loss");
    return v;
  };

  // Analytic gradients from one taped evaluation.
  std::vector<ParamSet<T>> analytic;
  {
    ad::Tape<T> tape;
    std::vector<BoundParams<T>> bound;
    for (auto* p : params) bound.push_back(bind(tape, *p));
    Tensor<T> loss = f(tape, bound);
    detail::require(loss.size() == 1, "finite_diff_check: f must return a scalar");
    if (!std::isfinite(static_cast<double>(loss.item())))
      throw training_error("finite_diff_check: non-finite loss");
    tape.backward(loss, ad::PassKind::param);
    ad::GradBook<T> book(tape);
    for (std::size_t s = 0; s < params.size(); ++s)
      analytic.push_back(extract_grads(book, *params[s], bound[s]));
  }

  T max_rel = T(0);
  for (std::size_t s = 0; s < params.size(); ++s) {
    for (auto& [name, tensor] : params[s]->values) {
      auto& vals = tensor.values();
      const auto& ga = analytic[s].values.at(name).values();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const T keep = vals[i];
        vals[i] = keep + h;
        const T up = eval(params);
        vals[i] = keep - h;
        const T dn = eval(params);
        vals[i] = keep;
        const T numeric = (up - dn) / (T(2) * h);
        const T rel = std::abs(ga[i] - numeric) /
                      (std::abs(numeric) + T(1e-12));
        if (rel > max_rel) max_rel = rel;
      }
    }
  }
  return max_rel;
}

template <typename T, typename F>
T finite_diff_check(F&& f, ParamSet<T>& params, T h) {
  std::vector<ParamSet<T>*> v{&params};
  auto g = [&](ad::Tape<T>& tape, std::vector<BoundParams<T>>& bound) {
    return f(tape, bound[0]);
  };
  return finite_diff_check<T>(g, v, h);
}

// Vector-level counterpart: sup-norm of the analytic-vs-numeric deviation
// relative to the sup-norm of the numeric gradient. The per-coordinate form
// above is unbounded on coordinates whose true derivative is near zero (the
// difference quotient there is pure rounding noise), so composed losses with
// wide dynamic range are judged at the gradient-vector level instead.
template <typename T, typename F>
T finite_diff_vector_gap(F&& f, std::vector<ParamSet<T>*> params, T h) {
  detail::require(h > T(0), "finite_diff_vector_gap: h must be positive");

  auto eval = [&](std::vector<ParamSet<T>*>& ps) -> T {
    ad::Tape<T> tape;
    std::vector<BoundParams<T>> bound;
    bound.reserve(ps.size());
    for (auto* p : ps) bound.push_back(bind(tape, *p));
    Tensor<T> loss = f(tape, bound);
    detail::require(loss.size() == 1, "finite_diff_vector_gap: f must return a scalar");
    const T v = loss.item();
    if (!std::isfinite(static_cast<double>(v)))
      throw training_error("finite_diff_vector_gap: non-finite loss");
    return v;
  };

  std::vector<ParamSet<T>> analytic;
  {
    ad::Tape<T> tape;
    std::vector<BoundParams<T>> bound;
    for (auto* p : params) bound.push_back(bind(tape, *p));
    Tensor<T> loss = f(tape, bound);
    detail::require(loss.size() == 1, "finite_diff_vector_gap: f must return a scalar");
    if (!std::isfinite(static_cast<double>(loss.item())))
      throw training_error("finite_diff_vector_gap: non-finite loss");
    tape.backward(loss, ad::PassKind::param);
    ad::GradBook<T> book(tape);
    for (std::size_t s = 0; s < params.size(); ++s)
      analytic.push_back(extract_grads(book, *params[s], bound[s]));
  }

  T max_dev = T(0), max_num = T(0);
  for (std::size_t s = 0; s < params.size(); ++s) {
    for (auto& [name, tensor] : params[s]->values) {
      auto& vals = tensor.values();
      const auto& ga = analytic[s].values.at(name).values();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const T keep = vals[i];
        vals[i] = keep + h;
        const T up = eval(params);
        vals[i] = keep - h;
        const T dn = eval(params);
        vals[i] = keep;
        const T numeric = (up - dn) / (T(2) * h);
        max_dev = std::max(max_dev, std::abs(ga[i] - numeric));
        max_num = std::max(max_num, std::abs(numeric));
      }
    }
  }
  return max_dev / (max_num + T(1e-12));
}

}  // namespace bsdg
