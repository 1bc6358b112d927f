#include "jst/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace jst {

namespace {

std::atomic<std::uint64_t> g_node_counter{0};
thread_local bool t_grad_enabled = true;

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> value) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->order = g_node_counter.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_mode_enabled() { return t_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  auto node = new_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto node = new_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

void Tensor::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw Error("requires_grad can only be set on leaves");
  node_->requires_grad = flag;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar root, got shape " + shape_str(shape()));
  }
  ComputationTape tape(*this);
  tape.run_backward();
}

Tensor Tensor::detach() const {
  return Tensor(new_node(node_->shape, node_->value));
}

Tensor Tensor::clone(bool requires_grad) const {
  auto node = new_node(node_->shape, node_->value);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(value));
  if (!t_grad_enabled) return Tensor(std::move(node));
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return Tensor(std::move(node));
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) {
    node->inputs.push_back(in.defined() ? in.node_ptr() : nullptr);
  }
  node->backward_fn = std::move(backward_fn);
  return Tensor(std::move(node));
}

ComputationTape::ComputationTape(const Tensor& root) {
  std::vector<Node*> stack{root.node()};
  std::unordered_set<Node*> seen{root.node()};
  keep_alive_.push_back(root.node_ptr());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    nodes_.push_back(n);
    for (const auto& in : n->inputs) {
      if (in && in->requires_grad && seen.insert(in.get()).second) {
        stack.push_back(in.get());
      }
    }
  }
  // Inputs are always created before their consumers, so descending creation
  // order is a reverse topological order.
  std::sort(nodes_.begin(), nodes_.end(),
            [](const Node* a, const Node* b) { return a->order > b->order; });
}

void ComputationTape::run_backward() {
  for (Node* n : nodes_) {
    if (!n->is_leaf()) n->grad.clear();
  }
  Node* root = nodes_.front();
  auto& g = root->grad_buffer();
  g[0] += 1.0;
  for (Node* n : nodes_) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

}  // namespace jst
