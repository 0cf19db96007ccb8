// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "congater/tensor.hpp"

namespace congater {

/// Gate sensitivity of one attribute. 0 leaves the gate fully open, 1 turns
/// the trajectory sigmoid into the logistic sigmoid. Not a trainable value.
class GateSensitivity {
 public:
  constexpr GateSensitivity() = default;
  explicit GateSensitivity(double value);

  double value() const { return value_; }
  bool is_open() const { return value_ == 0.0; }
  /// log2(omega + 1); the amplitude by which the sigmoid part is subtracted.
  double amplitude() const;

  friend bool operator==(GateSensitivity a, GateSensitivity b) { return a.value_ == b.value_; }

 private:
  double value_ = 0.0;
};

/// Elementwise 1 - log2(omega + 1) / (1 + e^x).
Tensor t_sigmoid(const Tensor& x, GateSensitivity omega);

/// Bottleneck gate network of one attribute at one block:
/// v = W2 tanh(W1 h + b1) + b2, gate = t_sigmoid(v).
struct ConGaterLayer {
  Tensor w1;  // [bottleneck, width]
  Tensor b1;  // [bottleneck]
  Tensor w2;  // [width, bottleneck]
  Tensor b2;  // [width]

  /// W1, W2 ~ U(-1/sqrt(width), 1/sqrt(width)); b1 = 0; b2 = 4 so a fresh
  /// gate at omega = 1 passes ~98% of each coordinate.
  static ConGaterLayer init(std::size_t width, std::size_t bottleneck_factor, std::mt19937_64& rng);

  std::size_t width() const { return w2.shape()[0]; }
  std::size_t bottleneck() const { return w1.shape()[0]; }
  std::vector<Tensor> parameters() const { return {w1, b1, w2, b2}; }
  /// Throws on inconsistent dimensions or non-finite values.
  void validate() const;
};

/// Residual feed-forward adapter: h + up(tanh(down(h))).
struct AdapterLayer {
  Tensor down_w;  // [bottleneck, width]
  Tensor down_b;  // [bottleneck]
  Tensor up_w;    // [width, bottleneck]
  Tensor up_b;    // [width]

  /// Zero up-projection, so a fresh adapter is the identity.
  static AdapterLayer init(std::size_t width, std::size_t bottleneck_factor, std::mt19937_64& rng);

  std::size_t width() const { return up_w.shape()[0]; }
  std::vector<Tensor> parameters() const { return {down_w, down_b, up_w, up_b}; }
  void validate() const;
};

/// Bottleneck width for a hidden width and factor; at least 1.
std::size_t bottleneck_width(std::size_t width, std::size_t factor);

/// Gate values for rows of `h` ([n,width] or [width]). Open sensitivity gives
/// a constant all-ones tensor without touching the layer.
Tensor gate_vector(const Tensor& h, const ConGaterLayer& layer, GateSensitivity omega);

/// h * gate. Open sensitivity returns `h` itself.
Tensor congater_forward(const Tensor& h, const ConGaterLayer& layer, GateSensitivity omega);

/// Elementwise product of per-attribute gates.
Tensor fuse_gates(std::span<const Tensor> gates);

Tensor adapter_forward(const Tensor& h, const AdapterLayer& layer);

}  // namespace congater
