// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "congater/tensor.hpp"

namespace congater {

// Elementwise binary ops accept identical shapes, or one operand whose shape
// equals the other's with the leading (batch) dimension removed.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor neg(const Tensor& x);

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// x W^T + bias for x of shape [n,in] (or [in]), W of shape [out,in].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

/// Softmax over the trailing dimension, max-subtracted.
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);

/// Rows of `table` selected by `ids` -> [ids.size(), cols].
Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids);
/// Mean of the selected rows per group -> [groups.size(), cols].
Tensor mean_pool_groups(const Tensor& table, std::span<const std::vector<std::int32_t>> groups);
/// x[i, index[i]] for each row -> [rows].
Tensor pick_rows(const Tensor& x, std::span<const int> index);

/// Identity forward, negated gradient backward.
Tensor grad_reverse(const Tensor& x);

/// Inverted dropout; identity when `p == 0`.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

}  // namespace congater
