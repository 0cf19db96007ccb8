// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "congater/encoder.hpp"
#include "congater/tensor.hpp"

namespace congater {

struct LossConfig {
  TaskKind kind = TaskKind::classification;
  /// Scale of each attribute's loss; attributes not listed use `default_lambda`.
  std::map<std::string, double> lambda;
  double default_lambda = 1.0;
  int warmup_epochs = 3;

  double lambda_for(const std::string& attribute) const;
  void validate() const;
};

/// Lower bound applied to label probabilities in the cross-entropy losses.
inline constexpr double kProbabilityFloor = 1e-12;

struct CrossEntropy {
  Tensor loss;
  /// Number of rows whose label probability was clamped at the floor.
  std::size_t clamped = 0;
};

/// Mean of -log p(y) over rows of a probability matrix.
CrossEntropy task_ce_loss(const Tensor& probs, std::span<const int> labels);

/// Mean over ensemble members of the cross entropy on attribute labels, with
/// the members fed through gradient reversal.
Tensor adversarial_loss(const Tensor& z, std::span<const int> labels, const EncoderModel& model,
                        const std::string& attribute, const HeadOptions& options = {});

/// min(1, (epoch + 1) / warmup_epochs), or 1 without warm-up.
double warmup_factor(int epoch, int warmup_epochs);

/// task + sum_i warmup(epoch) * lambda_i * attr_i.
Tensor total_loss(const Tensor& task, const std::map<std::string, Tensor>& attribute_losses,
                  const LossConfig& config, int epoch);

/// KL(softmax(relevance) || softmax(scores)), averaged over rows.
Tensor listnet_task_loss(const Tensor& relevance, const Tensor& scores);

/// KL(softmax(scores) || softmax(neutrality)), averaged over rows.
Tensor fairness_reg_loss(const Tensor& scores, const Tensor& neutrality);

}  // namespace congater
