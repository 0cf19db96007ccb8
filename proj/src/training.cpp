// SPDX-License-Identifier: Apache-2.0
#include "congater/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "congater/ops.hpp"

namespace congater {

using nlohmann::json;

void optimizer_step(std::span<Tensor> params, AdamWState& state, const AdamWOptions& o) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), 0.0);
      state.v[i].assign(params[i].size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("optimizer state belongs to other parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    const auto g = params[i].grad();
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!std::isfinite(g[k])) {
        std::ostringstream msg;
        msg << "non-finite gradient " << g[k] << " in parameter " << i << " " << shape_str(params[i].shape())
            << " at coordinate " << k << "; step rejected";
        throw OptimizerError(msg.str());
      }
    }
  }
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    const auto g = params[i].grad();
    auto p = params[i].mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] -= o.lr * o.weight_decay * p[k];
      m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g[k];
      v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g[k] * g[k];
      p[k] -= o.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + o.eps);
    }
  }
}

std::string to_string(Regime r) { return r == Regime::parallel ? "parallel" : "posthoc"; }

Regime parse_regime(const std::string& s) {
  if (s == "parallel") return Regime::parallel;
  if (s == "posthoc") return Regime::posthoc;
  throw std::invalid_argument("unknown regime '" + s + "'");
}

void TrainConfig::validate() const {
  if (epochs_task < 0 || epochs_attr < 0) throw std::invalid_argument("epoch counts must be nonnegative");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(task_lr > 0.0) || !(adv_lr > 0.0)) throw std::invalid_argument("learning rates must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be nonnegative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0,1)");
  loss.validate();
}

json RunLog::to_json() const {
  json out = json::array();
  for (const auto& e : epochs) {
    out.push_back({{"epoch", e.epoch},
                   {"phase", e.phase},
                   {"attribute", e.attribute},
                   {"omega", e.omega},
                   {"task_loss", e.task_loss},
                   {"attr_loss", e.attr_loss},
                   {"wall_seconds", e.wall_seconds},
                   {"metrics", e.metrics}});
  }
  return out;
}

FreezeGuard::FreezeGuard(std::vector<Tensor> params) : params_(std::move(params)) {
  for (auto& p : params_) p.set_requires_grad(false);
}

FreezeGuard::~FreezeGuard() {
  for (auto& p : params_) p.set_requires_grad(true);
}

namespace {

using Clock = std::chrono::steady_clock;

// Losses of one mini-batch for either task kind.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::size_t size() const = 0;
  virtual Tensor task_loss(const EncoderModel& m, std::span<const std::size_t> idx, const OmegaMap& omegas,
                           const HeadOptions& head) const = 0;
  // Returns {task, attribute} losses with only `attribute` at sensitivity 1.
  virtual std::pair<Tensor, Tensor> attribute_losses(const EncoderModel& m, std::span<const std::size_t> idx,
                                                     const OmegaMap& omegas, const std::string& attribute,
                                                     const HeadOptions& head) const = 0;
  virtual bool has_adversaries() const = 0;
};

class ClassificationObjective final : public Objective {
 public:
  explicit ClassificationObjective(const std::vector<Example>& data) : data_(data) {}
  std::size_t size() const override { return data_.size(); }

  Tensor task_loss(const EncoderModel& m, std::span<const std::size_t> idx, const OmegaMap& omegas,
                   const HeadOptions& head) const override {
    const Tensor z = m.encode(tokens(idx), omegas);
    return task_ce_loss(softmax_rows(m.task_logits(z, head)), labels(idx)).loss;
  }

  std::pair<Tensor, Tensor> attribute_losses(const EncoderModel& m, std::span<const std::size_t> idx,
                                             const OmegaMap& omegas, const std::string& attribute,
                                             const HeadOptions& head) const override {
    const Tensor z = m.encode(tokens(idx), omegas);
    Tensor task = task_ce_loss(softmax_rows(m.task_logits(z, head)), labels(idx)).loss;
    std::vector<int> attr(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) attr[i] = data_[idx[i]].attr_labels.at(attribute);
    return {task, adversarial_loss(z, attr, m, attribute, head)};
  }

  bool has_adversaries() const override { return true; }

 private:
  std::vector<TokenSequence> tokens(std::span<const std::size_t> idx) const {
    std::vector<TokenSequence> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(data_[i].tokens);
    return out;
  }
  std::vector<int> labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(data_[i].task_label);
    return out;
  }

  const std::vector<Example>& data_;
};

class RankingObjective final : public Objective {
 public:
  explicit RankingObjective(const std::vector<RankingExample>& data) : data_(data) {}
  std::size_t size() const override { return data_.size(); }

  Tensor task_loss(const EncoderModel& m, std::span<const std::size_t> idx, const OmegaMap& omegas,
                   const HeadOptions&) const override {
    return losses(m, idx, omegas, false).first;
  }

  std::pair<Tensor, Tensor> attribute_losses(const EncoderModel& m, std::span<const std::size_t> idx,
                                             const OmegaMap& omegas, const std::string&,
                                             const HeadOptions&) const override {
    return losses(m, idx, omegas, true);
  }

  bool has_adversaries() const override { return false; }

 private:
  std::pair<Tensor, Tensor> losses(const EncoderModel& m, std::span<const std::size_t> idx, const OmegaMap& omegas,
                                   bool with_fairness) const {
    Tensor task, fair;
    for (auto i : idx) {
      const auto& q = data_[i];
      std::vector<TokenSequence> docs;
      std::vector<double> rel, neu;
      for (const auto& c : q.candidates) {
        docs.push_back(c.tokens);
        rel.push_back(static_cast<double>(c.relevance));
        neu.push_back(c.neutrality);
      }
      const Tensor s = m.score_candidates(q.query, docs, omegas);
      const Tensor t = listnet_task_loss(Tensor::vector(rel), s);
      task = task.defined() ? add(task, t) : t;
      if (with_fairness) {
        const Tensor f = fairness_reg_loss(s, Tensor::vector(neu));
        fair = fair.defined() ? add(fair, f) : f;
      }
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    task = scale(task, inv);
    if (fair.defined()) fair = scale(fair, inv);
    return {task, fair};
  }

  const std::vector<RankingExample>& data_;
};

class Trainer {
 public:
  Trainer(EncoderModel& model, const Objective& objective, const TrainConfig& cfg, const EpochHook& hook)
      : model_(model), obj_(objective), cfg_(cfg), hook_(hook), order_rng_(cfg.seed), dropout_rng_(cfg.seed ^ 0x5bd1e995ULL) {
    cfg_.validate();
    if (obj_.size() == 0) throw std::invalid_argument("training data is empty");
    for (const auto& a : model_.config().attributes) {
      if (a.kind == ModuleKind::none) continue;
      if (cfg_.attributes.empty() ||
          std::find(cfg_.attributes.begin(), cfg_.attributes.end(), a.name) != cfg_.attributes.end()) {
        attributes_.push_back(a.name);
      }
    }
    for (const auto& name : cfg_.attributes) {
      const auto& spec = model_.config().attribute(name);
      if (spec.kind == ModuleKind::none) throw std::invalid_argument("attribute '" + name + "' has no module to train");
    }
    task_params_ = model_.group(kTaskGroup);
    steps_per_epoch_ = (obj_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    total_task_steps_ = steps_per_epoch_ * static_cast<std::size_t>(cfg_.epochs_task);
    for (const auto& a : attributes_) {
      auto params = model_.group(attribute_group(a));
      if (obj_.has_adversaries()) {
        auto adv = model_.group(adversary_group(a));
        params.insert(params.end(), adv.begin(), adv.end());
      }
      attr_params_[a] = std::move(params);
    }
  }

  RunLog parallel() {
    const int cycles = std::max(cfg_.epochs_task, cfg_.epochs_attr);
    for (int e = 0; e < cycles; ++e) {
      if (e < cfg_.epochs_task) task_epoch(e);
      if (e < cfg_.epochs_attr) {
        for (const auto& a : attributes_) attribute_epoch(e, a);
      }
    }
    return std::move(log_);
  }

  RunLog posthoc() {
    for (int e = 0; e < cfg_.epochs_task; ++e) task_epoch(e);
    for (int e = 0; e < cfg_.epochs_attr; ++e) {
      for (const auto& a : attributes_) attribute_epoch(e, a);
    }
    return std::move(log_);
  }

 private:
  std::vector<std::size_t> shuffled() {
    std::vector<std::size_t> order(obj_.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng_);
    return order;
  }

  OmegaMap omegas(const std::string& open) const {
    OmegaMap out;
    for (const auto& a : model_.config().attributes) {
      if (a.kind == ModuleKind::congater) out[a.name] = a.name == open ? 1.0 : 0.0;
    }
    return out;
  }

  std::vector<Tensor> non_task_params() const {
    std::vector<Tensor> out;
    for (const auto& p : model_.parameters()) {
      if (p.group != kTaskGroup) out.push_back(p.tensor);
    }
    return out;
  }

  double task_lr() const {
    if (!cfg_.cosine_decay || total_task_steps_ == 0) return cfg_.task_lr;
    const double progress = static_cast<double>(task_step_) / static_cast<double>(total_task_steps_);
    return cfg_.task_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }

  void task_epoch(int epoch) {
    const auto start = Clock::now();
    FreezeGuard freeze(non_task_params());
    const auto order = shuffled();
    const OmegaMap closed = omegas("");
    const HeadOptions head{cfg_.dropout, &dropout_rng_};
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(cfg_.batch_size, order.size() - b));
      for (auto& p : task_params_) p.zero_grad();
      const Tensor loss = obj_.task_loss(model_, idx, closed, head);
      backward(loss);
      optimizer_step(task_params_, task_state_, {task_lr(), cfg_.weight_decay});
      ++task_step_;
      total += loss.item();
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = "task";
    rec.task_loss = total / static_cast<double>(batches);
    finish(rec, start);
  }

  void attribute_epoch(int epoch, const std::string& attribute) {
    const auto start = Clock::now();
    auto& params = attr_params_.at(attribute);
    FreezeGuard freeze(frozen_for(attribute));
    const auto order = shuffled();
    const OmegaMap open = omegas(attribute);
    const HeadOptions head{cfg_.dropout, &dropout_rng_};
    LossConfig loss_cfg = cfg_.loss;
    double task_total = 0.0, attr_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(cfg_.batch_size, order.size() - b));
      for (auto& p : params) p.zero_grad();
      auto [task, attr] = obj_.attribute_losses(model_, idx, open, attribute, head);
      const Tensor loss = total_loss(task, {{attribute, attr}}, loss_cfg, epoch);
      backward(loss);
      optimizer_step(params, attr_states_[attribute], {cfg_.adv_lr, cfg_.weight_decay});
      task_total += task.item();
      attr_total += attr.item();
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = "attribute";
    rec.attribute = attribute;
    rec.omega = 1.0;
    rec.task_loss = task_total / static_cast<double>(batches);
    rec.attr_loss = attr_total / static_cast<double>(batches);
    finish(rec, start);
  }

  std::vector<Tensor> frozen_for(const std::string& attribute) const {
    const std::string keep_a = attribute_group(attribute);
    const std::string keep_b = adversary_group(attribute);
    std::vector<Tensor> out;
    for (const auto& p : model_.parameters()) {
      if (p.group != keep_a && p.group != keep_b) out.push_back(p.tensor);
    }
    return out;
  }

  void finish(EpochRecord& rec, Clock::time_point start) {
    rec.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    if (hook_) rec.metrics = hook_(model_, rec);
    log_.epochs.push_back(std::move(rec));
  }

  EncoderModel& model_;
  const Objective& obj_;
  TrainConfig cfg_;
  const EpochHook& hook_;
  std::mt19937_64 order_rng_;
  std::mt19937_64 dropout_rng_;
  std::vector<std::string> attributes_;
  std::vector<Tensor> task_params_;
  std::map<std::string, std::vector<Tensor>> attr_params_;
  AdamWState task_state_;
  std::map<std::string, AdamWState> attr_states_;
  std::size_t steps_per_epoch_ = 0;
  std::size_t total_task_steps_ = 0;
  std::size_t task_step_ = 0;
  RunLog log_;
};

void check_labels(const EncoderModel& model, const std::vector<Example>& data, const TrainConfig& cfg) {
  if (model.config().task != TaskKind::classification) {
    throw std::invalid_argument("classification data given to a ranking model");
  }
  for (const auto& a : model.config().attributes) {
    if (a.kind == ModuleKind::none) continue;
    if (!cfg.attributes.empty() && std::find(cfg.attributes.begin(), cfg.attributes.end(), a.name) == cfg.attributes.end())
      continue;
    for (std::size_t i = 0; i < data.size(); ++i) {
      auto it = data[i].attr_labels.find(a.name);
      if (it == data[i].attr_labels.end()) {
        throw DataError("example " + std::to_string(i) + " has no label for attribute '" + a.name + "'");
      }
      if (it->second < 0 || static_cast<std::size_t>(it->second) >= a.classes) {
        throw DataError("example " + std::to_string(i) + " has label " + std::to_string(it->second) +
                        " outside the classes of '" + a.name + "'");
      }
    }
  }
}

void check_ranking(const EncoderModel& model) {
  if (model.config().task != TaskKind::ranking) throw std::invalid_argument("ranking data given to a classification model");
}

}  // namespace

RunLog train_parallel(EncoderModel& model, const std::vector<Example>& data, const TrainConfig& config,
                      const EpochHook& hook) {
  check_labels(model, data, config);
  ClassificationObjective obj(data);
  return Trainer(model, obj, config, hook).parallel();
}

RunLog train_posthoc(EncoderModel& model, const std::vector<Example>& data, const TrainConfig& config,
                     const EpochHook& hook) {
  check_labels(model, data, config);
  ClassificationObjective obj(data);
  return Trainer(model, obj, config, hook).posthoc();
}

RunLog train_parallel(EncoderModel& model, const std::vector<RankingExample>& data, const TrainConfig& config,
                      const EpochHook& hook) {
  check_ranking(model);
  RankingObjective obj(data);
  return Trainer(model, obj, config, hook).parallel();
}

RunLog train_posthoc(EncoderModel& model, const std::vector<RankingExample>& data, const TrainConfig& config,
                     const EpochHook& hook) {
  check_ranking(model);
  RankingObjective obj(data);
  return Trainer(model, obj, config, hook).posthoc();
}

RunLog train(EncoderModel& model, const std::vector<Example>& data, const TrainConfig& config, const EpochHook& hook) {
  return config.regime == Regime::parallel ? train_parallel(model, data, config, hook)
                                           : train_posthoc(model, data, config, hook);
}

RunLog train(EncoderModel& model, const std::vector<RankingExample>& data, const TrainConfig& config,
             const EpochHook& hook) {
  return config.regime == Regime::parallel ? train_parallel(model, data, config, hook)
                                           : train_posthoc(model, data, config, hook);
}

}  // namespace congater
