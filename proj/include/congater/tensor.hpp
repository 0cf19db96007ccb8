// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace congater {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Backward rule of a recorded operation. Receives the forward output values
/// and the upstream gradient; accumulates into the captured inputs.
using BackwardFn =
    std::function<void(std::span<const double> out_values, std::span<const double> out_grad)>;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

/// Dense row-major f64 array with an optional gradient slot.
///
/// Tensors are cheap handles; copying a Tensor shares the underlying node.
/// Results of operations record their inputs so that `backward` can walk the
/// graph in reverse topological order. Rank 1 tensors behave as a single row
/// wherever an operation is defined over rows.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return values().size(); }
  /// Leading dimension for rank 2, 1 for rank 1.
  std::size_t rows() const;
  /// Trailing dimension.
  std::size_t cols() const;

  std::span<const double> values() const;
  /// Writable values; only leaves may be mutated in place (optimizer updates).
  std::span<double> mutable_values();
  double operator[](std::size_t i) const { return values()[i]; }
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  const std::string& op() const;

  bool has_grad() const;
  /// Gradient, allocated as zeros on first access.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Copy of the values with no graph history.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  const detail::Node* id() const { return node_.get(); }

 private:
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>, std::string,
                            BackwardFn);
  friend void backward(const Tensor& loss);
  friend std::span<double> grad_sink(const Tensor& t);

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  detail::Node& node() const;

  std::shared_ptr<detail::Node> node_;
};

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds the output of an operation. The backward rule is kept only when
/// recording is enabled and some input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::string op, BackwardFn backward);

/// Mutable gradient buffer of `t` for use inside backward rules; empty span
/// when `t` does not require a gradient.
std::span<double> grad_sink(const Tensor& t);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor that requires one.
void backward(const Tensor& loss);

/// Max over coordinates of |analytic - numeric| / max(floor, |analytic|, |numeric|),
/// with central differences of step `h`. The floor keeps coordinates whose
/// gradient is near zero from amplifying rounding noise.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5, double floor = 1e-6);

}  // namespace congater
