// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "congater/data.hpp"
#include "congater/encoder.hpp"
#include "congater/objectives.hpp"
#include "json.hpp"

namespace congater {

class OptimizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamWOptions {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t steps = 0;
};

/// One AdamW update (decoupled weight decay) reading each parameter's
/// gradient. A non-finite gradient rejects the whole step before any
/// parameter changes.
void optimizer_step(std::span<Tensor> params, AdamWState& state, const AdamWOptions& options);

enum class Regime { parallel, posthoc };
std::string to_string(Regime r);
Regime parse_regime(const std::string& s);

struct TrainConfig {
  Regime regime = Regime::parallel;
  int epochs_task = 5;
  int epochs_attr = 5;
  std::size_t batch_size = 64;
  /// Θ learning rate; decays along a cosine over all task steps.
  double task_lr = 1e-3;
  /// Constant learning rate of gate and adversary parameters.
  double adv_lr = 1e-4;
  double weight_decay = 0.01;
  double dropout = 0.1;
  bool cosine_decay = true;
  LossConfig loss;
  /// Attributes whose modules are trained; empty means every attribute with a module.
  std::vector<std::string> attributes;
  std::uint64_t seed = 7;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  /// "task" (Θ at ω = 0) or "attribute" (θ_i at ω_i = 1).
  std::string phase;
  std::string attribute;
  double omega = 0.0;
  double task_loss = 0.0;
  double attr_loss = 0.0;
  double wall_seconds = 0.0;
  std::map<std::string, double> metrics;
};

struct RunLog {
  std::vector<EpochRecord> epochs;
  nlohmann::json to_json() const;
};

/// Called after every epoch; the returned values land in EpochRecord::metrics.
using EpochHook = std::function<std::map<std::string, double>(const EncoderModel&, const EpochRecord&)>;

RunLog train_parallel(EncoderModel& model, const std::vector<Example>& data, const TrainConfig& config,
                      const EpochHook& hook = {});
RunLog train_posthoc(EncoderModel& model, const std::vector<Example>& data, const TrainConfig& config,
                     const EpochHook& hook = {});
RunLog train_parallel(EncoderModel& model, const std::vector<RankingExample>& data, const TrainConfig& config,
                      const EpochHook& hook = {});
RunLog train_posthoc(EncoderModel& model, const std::vector<RankingExample>& data, const TrainConfig& config,
                     const EpochHook& hook = {});

/// Dispatches on config.regime.
RunLog train(EncoderModel& model, const std::vector<Example>& data, const TrainConfig& config,
             const EpochHook& hook = {});
RunLog train(EncoderModel& model, const std::vector<RankingExample>& data, const TrainConfig& config,
             const EpochHook& hook = {});

/// Temporarily stops gradient flow into the given parameters.
class FreezeGuard {
 public:
  explicit FreezeGuard(std::vector<Tensor> params);
  ~FreezeGuard();
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<Tensor> params_;
};

}  // namespace congater
