#include "comal/ndgrad/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace comal::nd {

namespace {
thread_local bool g_grad_enabled = true;
thread_local bool g_check_finite = false;
}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " +
                            shape_str(b)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->data.assign(numel_of(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (numel_of(shape) != values.size()) {
    throw ShapeError("Tensor::from: " + shape_str(shape) + " holds " +
                     std::to_string(numel_of(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("dim: axis out of range for " + shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: expected one element, shape " + shape_str(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) {
    throw ShapeError("at: index rank mismatch for " + shape_str(shape()));
  }
  std::size_t flat = 0;
  std::size_t i = 0;
  for (auto v : index) {
    if (v >= shape()[i]) throw std::out_of_range("Tensor::at");
    flat = flat * shape()[i] + v;
    ++i;
  }
  return node_->data[flat];
}

Tensor Tensor::detach() const {
  return from(shape(), node_->data, false);
}

Tensor Tensor::clone() const {
  return from(shape(), node_->data, node_->requires_grad);
}

std::vector<detail::Node*> computation_record(const Tensor& loss) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  // Iterative post-order DFS; only nodes that carry gradients are kept.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  detail::Node* root = loss.node().get();
  if (!root->requires_grad) return order;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw AutogradError("backward: loss must be scalar, got shape " +
                        shape_str(shape()));
  }
  if (node_->consumed) {
    throw AutogradError(
        "backward: called twice on the same loss without rebuilding it");
  }
  if (!node_->requires_grad) {
    throw AutogradError("backward: loss does not depend on any parameter");
  }
  auto order = computation_record(*this);
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  node_->consumed = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

FiniteCheckGuard::FiniteCheckGuard() : previous_(g_check_finite) {
  g_check_finite = true;
}
FiniteCheckGuard::~FiniteCheckGuard() { g_check_finite = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs,
               std::function<void(detail::Node&)> backward) {
  if (g_check_finite) {
    for (double v : data) {
      if (!std::isfinite(v)) throw NonFiniteError(op);
    }
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace comal::nd
