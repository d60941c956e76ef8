#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "bsdg/common.hpp"

namespace bsdg::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

// Why this exists: several invariants are phrased in terms of how many
// backward passes of each kind a training step performs, so the engine
// counts them where they happen instead of trusting call sites.
enum class PassKind {
  param,  // gradient w.r.t. model parameters
  probe,  // gradient w.r.t. an input perturbation (adversarial direction)
  audit,  // backward through a hand-built gradient program
};

struct AdStats {
  std::uint64_t param_backward = 0;
  std::uint64_t probe_backward = 0;
  std::uint64_t audit_backward = 0;
  std::uint64_t total() const { return param_backward + probe_backward + audit_backward; }
  void reset() { *this = AdStats{}; }
};

inline AdStats& ad_stats() {
  thread_local AdStats s;
  return s;
}

template <typename T>
class Tape;

template <typename T>
class GradBook;

// Dense row-major tensor. Copies are shallow (shared buffer). A tensor is
// either off-tape (a constant) or registered on exactly one tape.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_size(shape_), fill)) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(std::move(values))) {
    detail::require(data_->size() == shape_size(shape_),
                    "tensor: value count does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t rank() const { return shape_.size(); }

  const std::vector<T>& values() const {
    detail::require(static_cast<bool>(data_), "tensor: empty");
    return *data_;
  }
  std::vector<T>& values() {
    detail::require(static_cast<bool>(data_), "tensor: empty");
    return *data_;
  }
  std::shared_ptr<std::vector<T>> buffer() const { return data_; }

  T item() const {
    detail::require(size() == 1, "tensor: item() requires a scalar");
    return (*data_)[0];
  }

  bool on_tape() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  int node() const { return node_; }

  // Same buffer, no tape: reads as a constant downstream, so gradients do
  // not flow through it.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  // Deep copy of the values, off-tape.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(values());
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(values()[i]);
    return Tensor<U>(shape_, std::move(v));
  }

 private:
  friend class Tape<T>;
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
};

// Records one node per op output, in creation order (already topological).
// Backward walks ids from the loss down, invoking each node's pullback.
template <typename T>
class Tape {
 public:
  using Pullback = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers an off-tape tensor as a differentiable leaf. The returned
  // tensor shares the input's buffer.
  Tensor<T> leaf(const Tensor<T>& t) {
    detail::require(!t.on_tape(), "tape: leaf() input is already on a tape");
    Tensor<T> out = t;
    attach(out);
    return out;
  }

  Tensor<T> leaf(Shape shape, std::vector<T> values) {
    return leaf(Tensor<T>(std::move(shape), std::move(values)));
  }

  // Registers the output of an op and returns its node id. The pullback is
  // installed afterwards (it usually wants to capture the id); it runs only
  // if the node is reached from the loss.
  int attach(Tensor<T>& out) {
    out.tape_ = this;
    out.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{out.size(), nullptr});
    return out.node_;
  }

  void set_pull(int id, Pullback pull) {
    nodes_[static_cast<std::size_t>(id)].pull = std::move(pull);
  }

  std::size_t node_count() const { return nodes_.size(); }

  bool audit_mode = false;  // set while building hand-written gradient programs

  void backward(const Tensor<T>& loss, PassKind kind = PassKind::param) {
    detail::require(loss.tape_ == this, "tape: backward() loss is not on this tape");
    detail::require(loss.size() == 1, "tape: backward() needs a scalar loss");
    const auto n = nodes_.size();
    grads_.assign(n, {});
    reached_.assign(n, 0);
    mark_reached(loss.node_);
    auto id = static_cast<std::size_t>(loss.node_);
    grads_[id].assign(1, T(1));
    for (std::size_t i = id + 1; i > 0;) {
      --i;
      if (!reached_[i]) continue;
      if (grads_[i].empty()) grads_[i].assign(nodes_[i].size, T(0));
      if (nodes_[i].pull) nodes_[i].pull(*this);
    }
    // First-order only: a reverse sweep writes gradient buffers and never
    // records new operations, so no derivative-of-derivative graph can form.
    detail::require(nodes_.size() == n, "tape: backward() must not extend the tape");
    switch (kind) {
      case PassKind::param: ad_stats().param_backward++; break;
      case PassKind::probe: ad_stats().probe_backward++; break;
      case PassKind::audit: ad_stats().audit_backward++; break;
    }
    swept_ = true;
  }

  // Accumulate `g` into node `id`'s gradient (no-op for constants).
  void accum(int id, std::size_t index, T g) {
    if (id < 0) return;
    auto& buf = grads_[static_cast<std::size_t>(id)];
    if (buf.empty()) buf.assign(nodes_[static_cast<std::size_t>(id)].size, T(0));
    buf[index] += g;
  }

  std::vector<T>* grad_buffer(int id) {
    if (id < 0) return nullptr;
    auto& buf = grads_[static_cast<std::size_t>(id)];
    if (buf.empty()) buf.assign(nodes_[static_cast<std::size_t>(id)].size, T(0));
    return &buf;
  }

  // Dependency marking: pullbacks touch input ids through record_inputs at
  // attach time, so reachability is tracked with an explicit edge list.
  void record_edges(int out, std::initializer_list<int> ins) {
    for (int i : ins)
      if (i >= 0) edges_.push_back({out, i});
  }

  bool swept() const { return swept_; }

  const std::vector<T>& grad_values(int id) const {
    detail::require(id >= 0 && static_cast<std::size_t>(id) < grads_.size(),
                    "tape: grad_values() of a constant or unknown node");
    return grads_[static_cast<std::size_t>(id)];
  }

  bool reached(int id) const {
    return id >= 0 && static_cast<std::size_t>(id) < reached_.size() &&
           reached_[static_cast<std::size_t>(id)] != 0;
  }

  std::size_t node_size(int id) const { return nodes_[static_cast<std::size_t>(id)].size; }

 private:
  struct Node {
    std::size_t size = 0;
    Pullback pull;
  };

  void mark_reached(int loss_id) {
    // Edges were appended in creation order; sweep once from the back.
    reached_[static_cast<std::size_t>(loss_id)] = 1;
    for (std::size_t e = edges_.size(); e > 0; --e) {
      const auto& [out, in] = edges_[e - 1];
      if (out <= loss_id && reached_[static_cast<std::size_t>(out)])
        reached_[static_cast<std::size_t>(in)] = 1;
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<int, int>> edges_;
  std::vector<std::vector<T>> grads_;
  std::vector<std::uint8_t> reached_;
  bool swept_ = false;
};

// Snapshot of the gradients of selected tensors after a backward sweep.
template <typename T>
class GradBook {
 public:
  GradBook(Tape<T>& tape) : tape_(&tape) {
    detail::require(tape.swept(), "gradbook: tape has no completed backward sweep");
  }

  // Gradient of `t`; zeros if `t` did not influence the loss.
  Tensor<T> grad(const Tensor<T>& t) const {
    detail::require(t.tape() == tape_, "gradbook: tensor is not on the swept tape");
    if (!tape_->reached(t.node())) return Tensor<T>(t.shape(), T(0));
    const auto& g = tape_->grad_values(t.node());
    if (g.empty()) return Tensor<T>(t.shape(), T(0));
    return Tensor<T>(t.shape(), g);
  }

  bool influenced(const Tensor<T>& t) const {
    detail::require(t.tape() == tape_, "gradbook: tensor is not on the swept tape");
    return tape_->reached(t.node());
  }

 private:
  Tape<T>* tape_;
};

}  // namespace bsdg::ad
