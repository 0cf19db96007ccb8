// SPDX-License-Identifier: Apache-2.0
#include "congater/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace congater {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

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

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  auto n = values.size();
  return Tensor({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return Tensor({rows, cols}, std::move(values), requires_grad);
}

detail::Node& Tensor::node() const {
  if (!node_) throw std::logic_error("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  if (s.size() <= 1) return 1;
  return numel(s) / s.back();
}

std::size_t Tensor::cols() const { return shape().empty() ? 1 : shape().back(); }

std::span<const double> Tensor::values() const { return node().values; }

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw std::logic_error("in-place mutation of a non-leaf tensor");
  return node().values;
}

double Tensor::at(std::size_t row, std::size_t col) const { return values()[row * cols() + col]; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return values()[0];
}

bool Tensor::requires_grad() const { return node().requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw std::logic_error("requires_grad can only be set on leaves");
  node().requires_grad = flag;
}

bool Tensor::is_leaf() const { return !node().backward; }

const std::string& Tensor::op() const { return node().op; }

bool Tensor::has_grad() const { return !node().grad.empty(); }

std::span<const double> Tensor::grad() const {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

std::span<double> Tensor::mutable_grad() {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

void Tensor::zero_grad() { node().grad.clear(); }

Tensor Tensor::detach() const { return Tensor(shape(), node().values, false); }

Tensor Tensor::clone(bool requires_grad) const { return Tensor(shape(), node().values, requires_grad); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::string op, BackwardFn backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = std::move(op);
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_);
  }
  return Tensor(std::move(node));
}

std::span<double> grad_sink(const Tensor& t) {
  auto& n = t.node();
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; the order depends only on input order, so
  // repeated sweeps over identical graphs are bit-identical.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  visited.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto& root = *loss.node_;
  if (root.grad.empty()) root.grad.assign(1, 0.0);
  root.grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (!node->backward || node->grad.empty()) continue;
    node->backward(node->values, node->grad);
  }
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double h, double floor) {
  if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  Tensor leaf = x.clone(true);
  Tensor out = f(leaf);
  if (out.size() != 1) throw ShapeError("finite_difference_check needs a scalar function");
  if (!std::isfinite(out.item())) throw NumericError("function value is not finite");
  backward(out);
  std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());

  NoGradGuard no_grad;
  std::vector<double> probe(x.values().begin(), x.values().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double up = f(Tensor(x.shape(), probe)).item();
    probe[i] = saved - h;
    const double down = f(Tensor(x.shape(), probe)).item();
    probe[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("function value is not finite at coordinate " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max({floor, std::abs(numeric), std::abs(analytic[i])}));
  }
  return worst;
}

}  // namespace congater
