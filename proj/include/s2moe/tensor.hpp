#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace s2moe {

using Shape = std::vector<std::size_t>;

// Tensor storage. A fixed alignment keeps vectorized kernels on the same
// code path for every call, so results are bitwise repeatable.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  matmul_bt,
  add,
  sub,
  mul,
  affine,
  relu,
  sigmoid,
  softmax,
  layer_norm,
  embedding,
  concat,
  mean,
  variance,
  sum,
  log,
  exp,
  cross_entropy,
  reshape,
  gather_rows,
  gather_elements,
  combine_rows,
  l2_normalize,
  attention,
  dropout,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::matmul_bt: return "matmul_bt";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::affine: return "affine";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softmax: return "softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::embedding: return "embedding";
    case OpKind::concat: return "concat";
    case OpKind::mean: return "mean";
    case OpKind::variance: return "variance";
    case OpKind::sum: return "sum";
    case OpKind::log: return "log";
    case OpKind::exp: return "exp";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::reshape: return "reshape";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::gather_elements: return "gather_elements";
    case OpKind::combine_rows: return "combine_rows";
    case OpKind::l2_normalize: return "l2_normalize";
    case OpKind::attention: return "attention";
    case OpKind::dropout: return "dropout";
  }
  return "unknown";
}

/// Handle of a recorded node: valid only while the tape generation matches.
struct NodeId {
  std::uint64_t generation = 0;
  std::size_t index = 0;
  friend bool operator==(const NodeId&, const NodeId&) = default;
};

template <class T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  OpKind op = OpKind::leaf;
  std::vector<std::shared_ptr<Node>> inputs;
  // Accumulates this node's gradient into its inputs. Receives the node
  // itself so closures never hold a reference cycle.
  std::function<void(Node&)> backward_fn;
  std::optional<NodeId> id;

  T* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& nan_guard_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }
inline bool nan_guard_enabled() { return detail::nan_guard_flag(); }

/// Sets tape recording on or off for the enclosing scope.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = enabled; }
  ~GradModeGuard() { detail::grad_mode_flag() = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

/// Disables tape recording in the enclosing scope.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class NanGuardScope {
 public:
  explicit NanGuardScope(bool enabled) : previous_(detail::nan_guard_flag()) {
    detail::nan_guard_flag() = enabled;
  }
  ~NanGuardScope() { detail::nan_guard_flag() = previous_; }
  NanGuardScope(const NanGuardScope&) = delete;
  NanGuardScope& operator=(const NanGuardScope&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tape;

/// Dense row-major array that optionally participates in the gradient tape.
/// Copies share the underlying node, like a reference-counted handle.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Buffer<T> data(s2moe::numel(shape), T(0));
    return from_buffer(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Buffer<T> data(s2moe::numel(shape), value);
    return from_buffer(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from(Shape shape, const std::vector<T>& data, bool requires_grad = false) {
    return from_buffer(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad);
  }

  static Tensor from_buffer(Shape shape, Buffer<T> data, bool requires_grad = false) {
    if (s2moe::numel(shape) != data.size()) {
      throw ShapeError("tensor shape " + to_string(shape) + " holds " + std::to_string(s2moe::numel(shape)) +
                       " elements but " + std::to_string(data.size()) + " values were given");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from_buffer({}, Buffer<T>{v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t last_dim() const { return node_->shape.empty() ? 1 : node_->shape.back(); }
  std::size_t rows() const { return numel() / last_dim(); }

  std::span<const T> data() const { return node_->value; }
  // Direct mutation is meant for leaves (optimizer updates, test setup).
  std::span<T> mutable_data() { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->value.size()}; }

  /// Gradient, or zeros when nothing has been accumulated yet.
  std::vector<T> grad_or_zero() const {
    if (has_grad()) return std::vector<T>(node_->grad.begin(), node_->grad.end());
    return std::vector<T>(numel(), T(0));
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  bool is_leaf() const { return node_->op == OpKind::leaf; }
  OpKind op() const { return node_->op; }
  std::optional<NodeId> node_id() const { return node_->id; }

  /// Fresh leaf holding a copy of the values, disconnected from any tape.
  Tensor detach() const { return from_buffer(shape(), node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  void backward() const;

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of every op output that requires a gradient. Records are
/// appended at creation, so insertion order is a topological order.
template <class T>
class Tape {
 public:
  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  void record(const std::shared_ptr<Node<T>>& node) {
    if (consumed_) clear();
    node->id = NodeId{generation_, records_.size()};
    records_.push_back(node);
  }

  /// Drops every record; node ids handed out so far become invalid.
  void clear() {
    for (auto& n : records_) {
      n->backward_fn = nullptr;
      n->inputs.clear();
    }
    records_.clear();
    ++generation_;
    consumed_ = false;
  }

  void backward(const Tensor<T>& loss) {
    if (!loss.defined()) throw TapeError("backward on an undefined tensor");
    if (loss.numel() != 1) {
      throw TapeError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    auto id = loss.node_id();
    if (!id || loss.is_leaf()) throw TapeError("backward on a detached tensor");
    if (id->generation != generation_ || id->index >= records_.size() ||
        records_[id->index].get() != loss.node()) {
      throw TapeError("loss is not on the current tape (cleared or superseded by a new forward)");
    }
    if (consumed_) throw TapeError("backward called twice without re-running forward");

    loss.node()->grad_buffer()[0] += T(1);
    for (std::size_t i = id->index + 1; i-- > 0;) {
      auto& node = *records_[i];
      if (node.grad.empty() || !node.backward_fn) continue;
      node.backward_fn(node);
    }
    consumed_ = true;
    // Intermediates are no longer needed; leaves keep their gradients.
    for (auto& n : records_) {
      n->backward_fn = nullptr;
      n->inputs.clear();
    }
  }

  std::size_t size() const { return records_.size(); }
  std::uint64_t generation() const { return generation_; }
  bool consumed() const { return consumed_; }
  OpKind op_at(std::size_t i) const { return records_.at(i)->op; }

 private:
  std::vector<std::shared_ptr<Node<T>>> records_;
  std::uint64_t generation_ = 1;
  bool consumed_ = false;
};

template <class T>
void Tensor<T>::backward() const {
  Tape<T>::active().backward(*this);
}

/// Named, ordered parameter collection.
template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

}  // namespace s2moe
