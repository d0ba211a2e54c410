#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "dcs/common.hpp"

namespace dcs {

namespace detail {

inline std::int64_t next_seq() {
  static std::atomic<std::int64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& numeric_checks_flag() {
  static bool enabled = false;
  return enabled;
}

template <typename S>
struct TensorNode {
  std::vector<int> shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::int64_t seq = next_seq();
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  bool is_leaf() const { return !backward_fn; }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

inline std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimError("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

}  // namespace detail

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

// When on, every op scans its output for NaN/Inf and throws NumericFault.
inline void set_numeric_checks(bool on) { detail::numeric_checks_flag() = on; }
inline bool numeric_checks_enabled() { return detail::numeric_checks_flag(); }

// Dense n-dimensional array with an optional gradient slot. Copies are
// shallow: they share the underlying node, so a Tensor handle can be kept
// by both the caller and the recorded graph.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Node = detail::TensorNode<S>;

  Tensor() = default;

  explicit Tensor(std::vector<int> shape) {
    const auto n = detail::shape_numel(shape);
    n_ = std::make_shared<Node>();
    n_->shape = std::move(shape);
    n_->value.assign(static_cast<std::size_t>(n), S(0));
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, S v) {
    Tensor t(std::move(shape));
    std::fill(t.n_->value.begin(), t.n_->value.end(), v);
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<S> data) {
    const auto n = detail::shape_numel(shape);
    if (n != static_cast<std::int64_t>(data.size()))
      throw DimError("from_data: shape/" + std::to_string(n) + " does not match data length " +
                     std::to_string(data.size()));
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    return t;
  }

  static Tensor scalar(S v) { return full({1}, v); }

  bool defined() const { return static_cast<bool>(n_); }

  const std::vector<int>& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return n_->size(); }

  S* data() { return n_->value.data(); }
  const S* data() const { return n_->value.data(); }
  std::vector<S>& values() { return n_->value; }
  const std::vector<S>& values() const { return n_->value; }

  S item() const {
    if (size() != 1) throw DimError("item() requires a scalar tensor");
    return n_->value[0];
  }

  bool requires_grad() const { return n_ && n_->requires_grad; }

  Tensor& set_requires_grad(bool on) {
    if (!n_->is_leaf()) throw Error("set_requires_grad is only valid on leaf tensors");
    n_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return n_ && !n_->grad.empty(); }

  // Gradient slot, allocated (zeroed) on first access.
  std::vector<S>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const S* grad_data() const { return n_->grad.empty() ? nullptr : n_->grad.data(); }

  void zero_grad() {
    if (n_ && !n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
  }

  // Value copy with no graph history.
  Tensor detach() const {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = n_->shape;
    t.n_->value = n_->value;
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(n_->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(n_->value[i]);
    return Tensor<T>::from_data(n_->shape, std::move(out));
  }

  std::shared_ptr<Node>& node() { return n_; }
  const std::shared_ptr<Node>& node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {

template <typename S>
inline void check_finite(const char* op, const Tensor<S>& t) {
  if (!numeric_checks_flag()) return;
  for (const S v : t.values()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericFault(std::string("numeric fault in ") + op);
  }
}

// Attaches inputs and a backward closure to `out` when recording is active.
template <typename S>
inline void record(Tensor<S>& out, std::vector<Tensor<S>> inputs,
                   std::function<void(TensorNode<S>&)> backward_fn) {
  if (!grad_mode_flag()) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(inputs.size());
  for (auto& t : inputs) node.parents.push_back(t.node());
  node.backward_fn = std::move(backward_fn);
}

template <typename S>
inline void accumulate(const std::shared_ptr<TensorNode<S>>& dst, const S* src, std::int64_t n) {
  if (!dst->requires_grad) return;
  dst->ensure_grad();
  S* g = dst->grad.data();
  for (std::int64_t i = 0; i < n; ++i) g[i] += src[i];
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Every op recorded under this loss
// is visited exactly once, in reverse topological (creation) order, and
// leaf gradients are summed into their grad slots; repeated calls without
// zero_grad accumulate.
//
// With release_graph, each interior node's value and gradient buffers are
// dropped as soon as its backward function has run — by then no later
// backward function can read them. That caps peak memory at roughly the
// forward footprint instead of twice it, but the graph cannot be swept a
// second time and interior tensors lose their values (the loss scalar
// itself stays readable). Leaves are never touched.
template <typename S>
inline void backward(const Tensor<S>& loss, bool release_graph = false) {
  if (!loss.defined() || loss.size() != 1) throw DimError("backward requires a scalar loss");
  auto root = loss.node();
  if (!root->requires_grad) return;

  std::vector<detail::TensorNode<S>*> order;
  std::unordered_set<detail::TensorNode<S>*> seen;
  std::vector<detail::TensorNode<S>*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->seq > b->seq; });

  // Interior grads are scratch for this sweep; only leaves accumulate
  // across sweeps.
  for (auto* n : order) {
    if (!n->is_leaf() && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), S(0));
  }
  root->ensure_grad();
  root->grad[0] += S(1);
  for (auto* n : order) {
    if (n->backward_fn) n->backward_fn(*n);
    if (release_graph && !n->is_leaf()) {
      std::vector<S>().swap(n->grad);
      if (n != root.get()) std::vector<S>().swap(n->value);
    }
  }
}

}  // namespace dcs
