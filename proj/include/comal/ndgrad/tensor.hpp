#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace comal::nd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t numel_of(const Shape& shape);

/// Raised when operand shapes are incompatible. The message names the
/// operation and both shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Raised when finite-checking is enabled and a primitive produces NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& op)
      : std::runtime_error("non-finite value produced by '" + op + "'"),
        op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  bool consumed = false;  // set on a loss once backward() ran from it
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array of doubles with optional reverse-mode gradient.
///
/// A Tensor is a cheap handle; copies share the underlying storage. Values
/// produced by operations are immutable. Leaves created with
/// `requires_grad = true` act as parameters and accumulate gradients across
/// backward passes until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Mutable access for parameter initialization and optimizer updates.
  /// Must not be used on tensors that are part of a live graph.
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }
  const char* op_name() const { return node_->op; }

  /// A new leaf holding a copy of the values, detached from any graph.
  Tensor detach() const;
  /// Deep copy, keeping the requires_grad flag but none of the graph.
  Tensor clone() const;

  /// Reverse-mode sweep from this scalar. Errors on non-scalars and on a
  /// second call for the same loss.
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// The topologically ordered list of operation nodes reachable from `loss`
/// that participate in differentiation. Replaying it in reverse visits every
/// node exactly once.
std::vector<detail::Node*> computation_record(const Tensor& loss);

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Enables NaN/Inf checks on every primitive result on this thread.
class FiniteCheckGuard {
 public:
  FiniteCheckGuard();
  ~FiniteCheckGuard();
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
  FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Builds an operation result. `backward` receives the result node (whose
/// `grad` holds the upstream gradient) and must accumulate into the
/// parents that require gradients. Used by all primitives and available
/// for module-specific fused operations.
Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs,
               std::function<void(detail::Node&)> backward);

}  // namespace comal::nd
