#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "bsdg/ops.hpp"
#include "bsdg/random.hpp"
#include "bsdg/tensor.hpp"

namespace bsdg {

using ad::Shape;
using ad::Tensor;

// Which bi-level role a parameter set plays: theta and phi form the inner
// (task) parameters, omega the outer (prompt) parameters.
enum class Partition { theta, phi, omega };

inline const char* partition_name(Partition p) {
  switch (p) {
    case Partition::theta: return "theta";
    case Partition::phi: return "phi";
    case Partition::omega: return "omega";
  }
  return "?";
}

// Ordered, named collection of off-tape master tensors for one partition.
// Iteration order (std::map) is part of the determinism contract.
template <typename T>
struct ParamSet {
  Partition partition = Partition::theta;
  std::map<std::string, Tensor<T>> values;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : values) n += v.size();
    return n;
  }

  ParamSet clone() const {
    ParamSet c;
    c.partition = partition;
    for (const auto& [k, v] : values) c.values.emplace(k, v.clone());
    return c;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> c;
    c.partition = partition;
    for (const auto& [k, v] : values) c.values.emplace(k, v.template cast<U>());
    return c;
  }
};

// Leaf views of a ParamSet on a tape, same names.
template <typename T>
using BoundParams = std::map<std::string, Tensor<T>>;

template <typename T>
BoundParams<T> bind(ad::Tape<T>& tape, const ParamSet<T>& ps) {
  BoundParams<T> out;
  for (const auto& [k, v] : ps.values) out.emplace(k, tape.leaf(v));
  return out;
}

// Same names as `ps`, values taken as constants (no gradient flow).
template <typename T>
BoundParams<T> as_constants(const ParamSet<T>& ps) {
  BoundParams<T> out;
  for (const auto& [k, v] : ps.values) out.emplace(k, v);
  return out;
}

template <typename T>
const Tensor<T>& at(const BoundParams<T>& bp, const std::string& name) {
  auto it = bp.find(name);
  detail::require(it != bp.end(), "params: missing tensor '" + name + "'");
  return it->second;
}

// Gradients of one partition after a backward sweep; zeros for parameters
// the loss never touched. Parameters outside `ps` are simply not extracted,
// which is how partition-selective gradients work.
template <typename T>
ParamSet<T> extract_grads(const ad::GradBook<T>& book, const ParamSet<T>& ps,
                          const BoundParams<T>& bound) {
  ParamSet<T> g;
  g.partition = ps.partition;
  for (const auto& [k, v] : ps.values) g.values.emplace(k, book.grad(at(bound, k)));
  return g;
}

// y <- y + a * x, matching by name.
template <typename T>
void axpy(ParamSet<T>& y, T a, const ParamSet<T>& x) {
  detail::require(y.values.size() == x.values.size(), "axpy: set size mismatch");
  auto ity = y.values.begin();
  auto itx = x.values.begin();
  for (; ity != y.values.end(); ++ity, ++itx) {
    detail::require(ity->first == itx->first, "axpy: name mismatch");
    auto& yd = ity->second.values();
    const auto& xd = itx->second.values();
    detail::require(yd.size() == xd.size(), "axpy: tensor size mismatch");
    for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += a * xd[i];
  }
}

template <typename T>
ParamSet<T> add_scaled(const ParamSet<T>& base, T a, const ParamSet<T>& dir) {
  ParamSet<T> out = base.clone();
  axpy(out, a, dir);
  return out;
}

template <typename T>
T dot(const ParamSet<T>& a, const ParamSet<T>& b) {
  detail::require(a.values.size() == b.values.size(), "dot: set size mismatch");
  T s = T(0);
  auto ita = a.values.begin();
  auto itb = b.values.begin();
  for (; ita != a.values.end(); ++ita, ++itb) {
    detail::require(ita->first == itb->first, "dot: name mismatch");
    const auto& ad_ = ita->second.values();
    const auto& bd = itb->second.values();
    for (std::size_t i = 0; i < ad_.size(); ++i) s += ad_[i] * bd[i];
  }
  return s;
}

template <typename T>
T sq_norm(const ParamSet<T>& a) {
  return dot(a, a);
}

template <typename T>
T l2(const ParamSet<T>& a) {
  return std::sqrt(sq_norm(a));
}

template <typename T>
ParamSet<T> zeros_like(const ParamSet<T>& a) {
  ParamSet<T> z;
  z.partition = a.partition;
  for (const auto& [k, v] : a.values) z.values.emplace(k, Tensor<T>(v.shape(), T(0)));
  return z;
}

template <typename T>
void fill_normal(ParamSet<T>& ps, RngStream& rng, double stddev) {
  for (auto& [k, v] : ps.values)
    for (auto& x : v.values()) x = static_cast<T>(rng.normal() * stddev);
}

}  // namespace bsdg
