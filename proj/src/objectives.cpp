// SPDX-License-Identifier: Apache-2.0
#include "congater/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "congater/ops.hpp"

namespace congater {

double LossConfig::lambda_for(const std::string& attribute) const {
  auto it = lambda.find(attribute);
  return it == lambda.end() ? default_lambda : it->second;
}

void LossConfig::validate() const {
  if (!(default_lambda >= 0.0)) throw std::invalid_argument("lambda must be nonnegative");
  for (const auto& [name, value] : lambda) {
    if (!(value >= 0.0)) throw std::invalid_argument("lambda for '" + name + "' must be nonnegative");
  }
  if (warmup_epochs < 0) throw std::invalid_argument("warmup_epochs must be nonnegative");
}

CrossEntropy task_ce_loss(const Tensor& probs, std::span<const int> labels) {
  const std::size_t r = probs.rows(), c = probs.cols();
  if (labels.size() != r) {
    throw ShapeError("task_ce_loss: " + std::to_string(labels.size()) + " labels for probabilities " +
                     shape_str(probs.shape()));
  }
  std::vector<double> logp(r);
  std::vector<bool> clamped(r, false);
  std::size_t n_clamped = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw std::out_of_range("task_ce_loss: label " + std::to_string(labels[i]) + " outside " +
                              std::to_string(c) + " classes");
    }
    double p = probs.values()[i * c + labels[i]];
    if (p < kProbabilityFloor) {
      p = kProbabilityFloor;
      clamped[i] = true;
      ++n_clamped;
    }
    total -= std::log(p);
  }
  std::vector<int> saved(labels.begin(), labels.end());
  const double inv = 1.0 / static_cast<double>(r);
  Tensor loss = make_result({1}, {total * inv}, {probs}, "task_ce",
                            [probs, saved = std::move(saved), clamped = std::move(clamped), c, inv](
                                std::span<const double>, std::span<const double> g) {
                              auto gp = grad_sink(probs);
                              for (std::size_t i = 0; i < saved.size(); ++i) {
                                if (clamped[i]) continue;  // flat below the floor
                                const std::size_t k = i * c + saved[i];
                                gp[k] -= g[0] * inv / probs.values()[k];
                              }
                            });
  return {loss, n_clamped};
}

Tensor adversarial_loss(const Tensor& z, std::span<const int> labels, const EncoderModel& model,
                        const std::string& attribute, const HeadOptions& options) {
  const auto members = model.adversary_logits(z, attribute, options, /*reverse=*/true);
  Tensor acc;
  for (const auto& logits : members) {
    Tensor ce = task_ce_loss(softmax_rows(logits), labels).loss;
    acc = acc.defined() ? add(acc, ce) : ce;
  }
  return scale(acc, 1.0 / static_cast<double>(members.size()));
}

double warmup_factor(int epoch, int warmup_epochs) {
  if (epoch < 0) throw std::invalid_argument("epoch must be nonnegative");
  if (warmup_epochs <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs));
}

Tensor total_loss(const Tensor& task, const std::map<std::string, Tensor>& attribute_losses,
                  const LossConfig& config, int epoch) {
  const double ramp = warmup_factor(epoch, config.warmup_epochs);
  Tensor total = task;
  for (const auto& [name, loss] : attribute_losses) {
    total = add(total, scale(loss, ramp * config.lambda_for(name)));
  }
  return total;
}

namespace {

void check_list(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  }
  if (a.cols() < 2) throw std::invalid_argument(std::string(op) + ": need at least two candidates");
  for (double v : a.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
  for (double v : b.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// sum(p * (log p - log q)) / rows, with p and q given as log-probabilities.
Tensor kl_rows(const Tensor& log_p, const Tensor& log_q) {
  const Tensor p = exp(log_p);
  return scale(sum(mul(p, sub(log_p, log_q))), 1.0 / static_cast<double>(log_p.rows()));
}

}  // namespace

Tensor listnet_task_loss(const Tensor& relevance, const Tensor& scores) {
  check_list(relevance, scores, "listnet_task_loss");
  return kl_rows(log_softmax_rows(relevance), log_softmax_rows(scores));
}

Tensor fairness_reg_loss(const Tensor& scores, const Tensor& neutrality) {
  check_list(scores, neutrality, "fairness_reg_loss");
  const std::size_t r = neutrality.rows(), c = neutrality.cols();
  for (std::size_t i = 0; i < r; ++i) {
    bool positive = false;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = neutrality.values()[i * c + j];
      if (v < 0.0) throw std::invalid_argument("fairness_reg_loss: negative neutrality");
      positive = positive || v > 0.0;
    }
    if (!positive) throw std::invalid_argument("fairness_reg_loss: all-zero neutrality list");
  }
  return kl_rows(log_softmax_rows(scores), log_softmax_rows(neutrality));
}

}  // namespace congater
