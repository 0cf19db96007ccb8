// SPDX-License-Identifier: Apache-2.0
#include "congater/gate.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "congater/ops.hpp"

namespace congater {

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

void check_finite(const Tensor& t, const char* name) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(name) + " contains non-finite values");
  }
}

void check_width(const Tensor& h, std::size_t width, const char* what) {
  if (h.rank() > 2 || h.cols() != width) {
    throw ShapeError(std::string(what) + ": input " + shape_str(h.shape()) + " does not match width " +
                     std::to_string(width));
  }
}

// sigma(-x), evaluated without overflow for large |x|.
double logistic_complement(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(x));
}

}  // namespace

GateSensitivity::GateSensitivity(double value) : value_(value) {
  if (!(value >= 0.0 && value <= 1.0)) {
    throw std::out_of_range("gate sensitivity must lie in [0,1], got " + std::to_string(value));
  }
}

double GateSensitivity::amplitude() const { return std::log2(value_ + 1.0); }

Tensor t_sigmoid(const Tensor& x, GateSensitivity omega) {
  const double amp = omega.amplitude();
  std::vector<double> out(x.size());
  std::vector<double> tail(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!std::isfinite(xv[i])) throw NumericError("t_sigmoid: non-finite input");
    tail[i] = logistic_complement(xv[i]);
    out[i] = 1.0 - amp * tail[i];
  }
  return make_result(x.shape(), std::move(out), {x}, "t_sigmoid",
                     [x, amp, tail = std::move(tail)](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < gx.size(); ++i) {
                         gx[i] += g[i] * amp * tail[i] * (1.0 - tail[i]);
                       }
                     });
}

std::size_t bottleneck_width(std::size_t width, std::size_t factor) {
  if (factor == 0) throw std::invalid_argument("bottleneck factor must be positive");
  return std::max<std::size_t>(1, width / factor);
}

ConGaterLayer ConGaterLayer::init(std::size_t width, std::size_t bottleneck_factor, std::mt19937_64& rng) {
  const std::size_t b = bottleneck_width(width, bottleneck_factor);
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  ConGaterLayer layer;
  layer.w1 = uniform({b, width}, bound, rng);
  layer.b1 = Tensor::zeros({b}, true);
  layer.w2 = uniform({width, b}, bound, rng);
  layer.b2 = Tensor::full({width}, 4.0, true);
  return layer;
}

void ConGaterLayer::validate() const {
  if (w1.rank() != 2 || w2.rank() != 2 || b1.rank() != 1 || b2.rank() != 1) {
    throw ShapeError("congater layer: parameters must be matrices and vectors");
  }
  const std::size_t b = w1.shape()[0], d = w1.shape()[1];
  if (b < 1 || b1.size() != b || w2.shape()[0] != d || w2.shape()[1] != b || b2.size() != d) {
    throw ShapeError("congater layer: inconsistent shapes W1 " + shape_str(w1.shape()) + ", b1 " +
                     shape_str(b1.shape()) + ", W2 " + shape_str(w2.shape()) + ", b2 " +
                     shape_str(b2.shape()));
  }
  check_finite(w1, "W1");
  check_finite(b1, "b1");
  check_finite(w2, "W2");
  check_finite(b2, "b2");
}

AdapterLayer AdapterLayer::init(std::size_t width, std::size_t bottleneck_factor, std::mt19937_64& rng) {
  const std::size_t b = bottleneck_width(width, bottleneck_factor);
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  AdapterLayer layer;
  layer.down_w = uniform({b, width}, bound, rng);
  layer.down_b = Tensor::zeros({b}, true);
  layer.up_w = Tensor::zeros({width, b}, true);
  layer.up_b = Tensor::zeros({width}, true);
  return layer;
}

void AdapterLayer::validate() const {
  if (down_w.rank() != 2 || up_w.rank() != 2) throw ShapeError("adapter layer: projections must be matrices");
  const std::size_t b = down_w.shape()[0], d = down_w.shape()[1];
  if (down_b.size() != b || up_w.shape()[0] != d || up_w.shape()[1] != b || up_b.size() != d) {
    throw ShapeError("adapter layer: down " + shape_str(down_w.shape()) + " and up " +
                     shape_str(up_w.shape()) + " projections do not compose");
  }
  check_finite(down_w, "adapter down");
  check_finite(up_w, "adapter up");
}

Tensor gate_vector(const Tensor& h, const ConGaterLayer& layer, GateSensitivity omega) {
  check_width(h, layer.width(), "gate_vector");
  if (omega.is_open()) return Tensor::full(h.shape(), 1.0);
  const Tensor v = linear(tanh(linear(h, layer.w1, layer.b1)), layer.w2, layer.b2);
  return t_sigmoid(v, omega);
}

Tensor congater_forward(const Tensor& h, const ConGaterLayer& layer, GateSensitivity omega) {
  check_width(h, layer.width(), "congater_forward");
  if (omega.is_open()) return h;
  return mul(h, gate_vector(h, layer, omega));
}

Tensor fuse_gates(std::span<const Tensor> gates) {
  if (gates.empty()) throw std::invalid_argument("fuse_gates: empty gate list");
  const Shape& shape = gates[0].shape();
  for (const auto& g : gates) {
    if (g.shape() != shape) {
      throw ShapeError("fuse_gates: gate " + shape_str(g.shape()) + " vs " + shape_str(shape));
    }
  }
  if (gates.size() == 1) return gates[0];
  // Factors are multiplied in ascending order per coordinate so the result is
  // bit-identical under any permutation of the list.
  const std::size_t n = gates[0].size(), k = gates.size();
  std::vector<double> out(n), factors(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) factors[j] = gates[j].values()[i];
    std::sort(factors.begin(), factors.end());
    double prod = 1.0;
    for (double f : factors) prod *= f;
    out[i] = prod;
  }
  std::vector<Tensor> inputs(gates.begin(), gates.end());
  return make_result(shape, std::move(out), inputs, "fuse_gates",
                     [inputs, n, k](std::span<const double>, std::span<const double> g) {
                       std::vector<double> others;
                       for (std::size_t j = 0; j < k; ++j) {
                         auto gj = grad_sink(inputs[j]);
                         if (gj.empty()) continue;
                         for (std::size_t i = 0; i < n; ++i) {
                           others.clear();
                           for (std::size_t m = 0; m < k; ++m) {
                             if (m != j) others.push_back(inputs[m].values()[i]);
                           }
                           std::sort(others.begin(), others.end());
                           double prod = 1.0;
                           for (double f : others) prod *= f;
                           gj[i] += g[i] * prod;
                         }
                       }
                     });
}

Tensor adapter_forward(const Tensor& h, const AdapterLayer& layer) {
  layer.validate();
  check_width(h, layer.width(), "adapter_forward");
  return add(h, linear(tanh(linear(h, layer.down_w, layer.down_b)), layer.up_w, layer.up_b));
}

}  // namespace congater
