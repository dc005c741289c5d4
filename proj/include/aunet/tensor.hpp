#pragma once

// Dense row-major tensors that record a reverse-mode differentiation graph.
//
// A tensor is a shared handle to a graph node. Nodes are numbered in creation
// order, so every input of a node has a smaller id than the node itself and
// reverse id order is a valid reverse topological order.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace aunet {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

namespace detail {

struct BranchTrace {
  bool active = false;
  std::uint64_t hash = 0;
};

inline BranchTrace& branch_trace() {
  thread_local BranchTrace trace;
  return trace;
}

inline void trace_branch(std::uint64_t v) {
  auto& t = branch_trace();
  t.hash = (t.hash ^ v) * 0x100000001b3ULL;
}

}  // namespace detail

// Fingerprints the branches taken by piecewise ops (relu sign pattern,
// pooling argmax) on the current thread while alive. Two evaluations with the
// same fingerprint lie on the same smooth piece.
class BranchTracer {
 public:
  BranchTracer() : previous_(detail::branch_trace()) {
    detail::branch_trace() = {true, kOffset};
  }
  ~BranchTracer() { detail::branch_trace() = previous_; }
  BranchTracer(const BranchTracer&) = delete;
  BranchTracer& operator=(const BranchTracer&) = delete;

  void reset() { detail::branch_trace().hash = kOffset; }
  std::uint64_t fingerprint() const { return detail::branch_trace().hash; }

 private:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  detail::BranchTrace previous_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

template <typename Scalar>
struct Node {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using BackwardFn = std::function<void(Node&)>;

  std::uint64_t id = 0;
  Shape shape;
  Array value;
  Array grad;  // empty until something flows into it
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;  // empty for leaves

  bool is_leaf() const { return !backward; }

  // Adds `g` into this node's gradient, allocating it on first use.
  template <typename Derived>
  void accumulate(const Eigen::ArrayBase<Derived>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) grad = Array::Zero(value.size());
    grad += g;
  }

  Array& grad_buffer() {
    if (grad.size() == 0) grad = Array::Zero(value.size());
    return grad;
  }
};

template <typename Scalar>
class BasicTensor {
 public:
  using NodeType = Node<Scalar>;
  using Array = typename NodeType::Array;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  BasicTensor() = default;

  BasicTensor(Shape shape, Array values, bool requires_grad = false)
      : node_(std::make_shared<NodeType>()) {
    for (Index d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    if (shape_size(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_string(shape));
    }
    node_->id = detail::node_counter().fetch_add(1);
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(const Shape& shape, bool requires_grad = false) {
    return BasicTensor(shape, Array::Zero(shape_size(shape)), requires_grad);
  }

  static BasicTensor full(const Shape& shape, Scalar v, bool requires_grad = false) {
    return BasicTensor(shape, Array::Constant(shape_size(shape), v), requires_grad);
  }

  static BasicTensor scalar(Scalar v, bool requires_grad = false) {
    return BasicTensor(Shape{1}, Array::Constant(1, v), requires_grad);
  }

  static BasicTensor from(const Shape& shape, std::initializer_list<Scalar> values,
                          bool requires_grad = false) {
    Array a(static_cast<Index>(values.size()));
    std::copy(values.begin(), values.end(), a.data());
    return BasicTensor(shape, std::move(a), requires_grad);
  }

  // Builds an op result. The node only keeps its inputs and backward closure
  // when recording is enabled and at least one input needs a gradient.
  static BasicTensor make_result(Shape shape, Array values, std::string op,
                                 std::vector<BasicTensor> inputs,
                                 typename NodeType::BackwardFn backward) {
    BasicTensor out(std::move(shape), std::move(values));
    out.node_->op = std::move(op);
    if (!grad_mode_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  Index dim(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t rank() const { return node().shape.size(); }
  Index size() const { return node().value.size(); }
  std::uint64_t id() const { return node().id; }
  const std::string& op() const { return node().op; }

  const Array& value() const { return node().value; }
  // Mutable access is meant for leaves (parameters, inputs); mutating an
  // intermediate invalidates the recorded graph.
  Array& mutable_value() { return node().value; }
  const Scalar* data() const { return node().value.data(); }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() requires a single-element tensor, shape " + shape_string(shape()));
    return node().value[0];
  }
  Scalar operator[](Index i) const { return node().value[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node().requires_grad = on; }

  bool has_grad() const { return node().grad.size() != 0; }
  // Gradient, or zeros when nothing has flowed in yet.
  Array grad() const {
    return has_grad() ? node().grad : Array::Zero(size());
  }
  void zero_grad() {
    if (has_grad()) node().grad.setZero();
  }

  ConstMatrixMap as_matrix(Index rows, Index cols) const {
    return ConstMatrixMap(node().value.data(), rows, cols);
  }

  // Copy detached from any graph.
  BasicTensor detach() const { return BasicTensor(shape(), value()); }

  NodeType& node() const {
    if (!node_) throw std::logic_error("use of an undefined tensor");
    return *node_;
  }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

using Tensor = BasicTensor<double>;

// Propagates d(loss)/d(x) to every reachable tensor that requires a gradient.
// Leaves accumulate into their existing gradient; intermediates are reset on
// every call.
template <typename Scalar>
void backward(const BasicTensor<Scalar>& loss) {
  using NodeType = Node<Scalar>;
  if (loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<NodeType*> order;
  std::unordered_set<const NodeType*> seen;
  std::vector<NodeType*> stack{&loss.node()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    NodeType* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const NodeType* a, const NodeType* b) { return a->id > b->id; });

  for (NodeType* n : order) {
    if (!n->is_leaf()) n->grad = NodeType::Array::Zero(n->value.size());
  }
  loss.node().grad_buffer()[0] += Scalar(1);
  for (NodeType* n : order) {
    if (!n->is_leaf()) n->backward(*n);
  }
}

}  // namespace aunet
