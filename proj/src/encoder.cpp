// SPDX-License-Identifier: Apache-2.0
#include "congater/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "congater/ops.hpp"

namespace congater {

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// Torch-style default for a dense layer of fan-in `in`.
double fan_in_bound(std::size_t in) { return 1.0 / std::sqrt(static_cast<double>(in)); }

}  // namespace

std::string to_string(Architecture a) { return a == Architecture::transformer ? "transformer" : "mlp"; }

std::string to_string(ModuleKind k) {
  switch (k) {
    case ModuleKind::none: return "none";
    case ModuleKind::congater: return "congater";
    case ModuleKind::adapter: return "adapter";
  }
  return "none";
}

std::string to_string(TaskKind k) { return k == TaskKind::classification ? "classification" : "ranking"; }

Architecture parse_architecture(const std::string& s) {
  if (s == "transformer") return Architecture::transformer;
  if (s == "mlp") return Architecture::mlp;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected transformer|mlp)");
}

ModuleKind parse_module_kind(const std::string& s) {
  if (s == "none") return ModuleKind::none;
  if (s == "congater") return ModuleKind::congater;
  if (s == "adapter") return ModuleKind::adapter;
  throw std::invalid_argument("unknown module kind '" + s + "' (expected congater|adapter|none)");
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "ranking") return TaskKind::ranking;
  throw std::invalid_argument("unknown task kind '" + s + "' (expected classification|ranking)");
}

std::string attribute_group(const std::string& attribute) { return "attr:" + attribute; }
std::string adversary_group(const std::string& attribute) { return "adv:" + attribute; }

void EncoderConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kFirstFreeId)) throw std::invalid_argument("vocab_size too small");
  if (width == 0) throw std::invalid_argument("width must be positive");
  if (blocks < 1) throw std::invalid_argument("at least one block is required");
  if (architecture == Architecture::transformer) {
    if (heads == 0 || width % heads != 0) {
      throw std::invalid_argument("width " + std::to_string(width) + " is not divisible by " +
                                  std::to_string(heads) + " attention heads");
    }
    if (ff_width == 0) throw std::invalid_argument("ff_width must be positive");
  }
  if (max_length < 1) throw std::invalid_argument("max_length must be positive");
  if (bottleneck_factor == 0) throw std::invalid_argument("bottleneck_factor must be positive");
  if (task == TaskKind::classification && task_classes < 2) {
    throw std::invalid_argument("classification needs at least two task classes");
  }
  if (adversary_ensemble < 1) throw std::invalid_argument("adversary ensemble size must be at least 1");
  std::set<std::string> names;
  for (const auto& a : attributes) {
    if (a.name.empty()) throw std::invalid_argument("attribute names must be nonempty");
    if (!names.insert(a.name).second) throw std::invalid_argument("duplicate attribute '" + a.name + "'");
    if (a.classes < 2) throw std::invalid_argument("attribute '" + a.name + "' needs at least two classes");
  }
}

const AttributeSpec& EncoderConfig::attribute(const std::string& name) const {
  for (const auto& a : attributes) {
    if (a.name == name) return a;
  }
  throw std::out_of_range("unknown attribute '" + name + "'");
}

Tensor MlpHead::operator()(const Tensor& x) const { return linear(tanh(linear(x, w1, b1)), w2, b2); }

Tensor EncoderModel::register_param(std::string name, std::string group, Tensor t) {
  parameters_.push_back({std::move(name), std::move(group), t});
  return t;
}

EncoderModel::EncoderModel(EncoderConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.width;

  embedding_ = register_param("embedding", kTaskGroup, normal({config_.vocab_size, d}, 1.0, rng));
  if (config_.architecture == Architecture::transformer) {
    positions_ = register_param("positions", kTaskGroup, normal({config_.max_length, d}, 0.1, rng));
    for (std::size_t l = 0; l < config_.blocks; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      const double bd = fan_in_bound(d), bf = fan_in_bound(config_.ff_width);
      AttentionBlock b;
      b.wq = register_param(p + "attn.wq", kTaskGroup, uniform({d, d}, bd, rng));
      b.bq = register_param(p + "attn.bq", kTaskGroup, Tensor::zeros({d}, true));
      b.wk = register_param(p + "attn.wk", kTaskGroup, uniform({d, d}, bd, rng));
      b.bk = register_param(p + "attn.bk", kTaskGroup, Tensor::zeros({d}, true));
      b.wv = register_param(p + "attn.wv", kTaskGroup, uniform({d, d}, bd, rng));
      b.bv = register_param(p + "attn.bv", kTaskGroup, Tensor::zeros({d}, true));
      b.wo = register_param(p + "attn.wo", kTaskGroup, uniform({d, d}, bd, rng));
      b.bo = register_param(p + "attn.bo", kTaskGroup, Tensor::zeros({d}, true));
      b.ln1_g = register_param(p + "ln1.gamma", kTaskGroup, Tensor::full({d}, 1.0, true));
      b.ln1_b = register_param(p + "ln1.beta", kTaskGroup, Tensor::zeros({d}, true));
      b.ff1_w = register_param(p + "ff1.w", kTaskGroup, uniform({config_.ff_width, d}, bd, rng));
      b.ff1_b = register_param(p + "ff1.b", kTaskGroup, Tensor::zeros({config_.ff_width}, true));
      b.ff2_w = register_param(p + "ff2.w", kTaskGroup, uniform({d, config_.ff_width}, bf, rng));
      b.ff2_b = register_param(p + "ff2.b", kTaskGroup, Tensor::zeros({d}, true));
      b.ln2_g = register_param(p + "ln2.gamma", kTaskGroup, Tensor::full({d}, 1.0, true));
      b.ln2_b = register_param(p + "ln2.beta", kTaskGroup, Tensor::zeros({d}, true));
      attention_.push_back(std::move(b));
    }
  } else {
    for (std::size_t l = 0; l < config_.blocks; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      DenseBlock b;
      b.w = register_param(p + "dense.w", kTaskGroup, uniform({d, d}, fan_in_bound(d), rng));
      b.b = register_param(p + "dense.b", kTaskGroup, Tensor::zeros({d}, true));
      dense_.push_back(std::move(b));
    }
  }

  modules_.resize(config_.blocks);
  for (std::size_t l = 0; l < config_.blocks; ++l) {
    auto& m = modules_[l];
    m.gates.resize(config_.attributes.size());
    m.adapters.resize(config_.attributes.size());
    for (std::size_t a = 0; a < config_.attributes.size(); ++a) {
      const auto& attr = config_.attributes[a];
      const std::string p = "block" + std::to_string(l) + "." + to_string(attr.kind) + "." + attr.name + ".";
      const std::string g = attribute_group(attr.name);
      if (attr.kind == ModuleKind::congater) {
        auto layer = ConGaterLayer::init(d, config_.bottleneck_factor, rng);
        layer.w1 = register_param(p + "w1", g, layer.w1);
        layer.b1 = register_param(p + "b1", g, layer.b1);
        layer.w2 = register_param(p + "w2", g, layer.w2);
        layer.b2 = register_param(p + "b2", g, layer.b2);
        m.gates[a] = std::move(layer);
      } else if (attr.kind == ModuleKind::adapter) {
        auto layer = AdapterLayer::init(d, config_.bottleneck_factor, rng);
        layer.down_w = register_param(p + "down_w", g, layer.down_w);
        layer.down_b = register_param(p + "down_b", g, layer.down_b);
        layer.up_w = register_param(p + "up_w", g, layer.up_w);
        layer.up_b = register_param(p + "up_b", g, layer.up_b);
        m.adapters[a] = std::move(layer);
      }
    }
  }

  if (config_.task == TaskKind::classification) {
    task_w_ = register_param("task_head.w", kTaskGroup, uniform({config_.task_classes, d}, fan_in_bound(d), rng));
    task_b_ = register_param("task_head.b", kTaskGroup, Tensor::zeros({config_.task_classes}, true));
    const std::size_t hidden = config_.adversary_hidden ? config_.adversary_hidden : d;
    for (const auto& attr : config_.attributes) {
      std::vector<MlpHead> ensemble;
      for (std::size_t k = 0; k < config_.adversary_ensemble; ++k) {
        const std::string p = "adversary." + attr.name + "." + std::to_string(k) + ".";
        const std::string g = adversary_group(attr.name);
        MlpHead h;
        h.w1 = register_param(p + "w1", g, uniform({hidden, d}, fan_in_bound(d), rng));
        h.b1 = register_param(p + "b1", g, Tensor::zeros({hidden}, true));
        h.w2 = register_param(p + "w2", g, uniform({attr.classes, hidden}, fan_in_bound(hidden), rng));
        h.b2 = register_param(p + "b2", g, Tensor::zeros({attr.classes}, true));
        ensemble.push_back(std::move(h));
      }
      adversaries_.push_back(std::move(ensemble));
    }
  }
}

EncoderModel EncoderModel::clone() const {
  EncoderModel copy(config_, 0);
  for (std::size_t i = 0; i < parameters_.size(); ++i) {
    auto src = parameters_[i].tensor.values();
    auto dst = copy.parameters_[i].tensor.mutable_values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

void EncoderModel::validate_tokens(std::span<const TokenSequence> batch) const {
  if (batch.empty()) throw std::invalid_argument("encode: empty batch");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].empty()) throw std::invalid_argument("encode: sequence " + std::to_string(i) + " is empty");
    for (std::size_t j = 0; j < batch[i].size(); ++j) {
      const auto t = batch[i][j];
      if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
        throw std::out_of_range("token id " + std::to_string(t) + " at sequence " + std::to_string(i) +
                                ", position " + std::to_string(j) + " is outside the vocabulary of " +
                                std::to_string(config_.vocab_size));
      }
    }
  }
}

std::vector<std::string> EncoderModel::check_omegas(const OmegaMap& omegas) const {
  std::vector<std::string> warnings;
  for (const auto& [name, value] : omegas) {
    const auto& attr = config_.attribute(name);
    GateSensitivity checked(value);
    if (attr.kind != ModuleKind::congater && !checked.is_open()) {
      warnings.push_back("attribute '" + name + "' uses a " + to_string(attr.kind) +
                         " module; its sensitivity is ignored");
    }
  }
  return warnings;
}

Tensor EncoderModel::apply_modules(const Tensor& x, std::size_t block, const OmegaMap* omegas) const {
  if (!omegas) return x;
  const auto& m = modules_[block];
  std::vector<Tensor> gates;
  for (std::size_t a = 0; a < config_.attributes.size(); ++a) {
    const auto& attr = config_.attributes[a];
    if (attr.kind != ModuleKind::congater) continue;
    auto it = omegas->find(attr.name);
    const GateSensitivity omega(it == omegas->end() ? 0.0 : it->second);
    if (omega.is_open()) continue;
    gates.push_back(gate_vector(x, m.gates[a], omega));
  }
  Tensor out = gates.empty() ? x : mul(x, fuse_gates(gates));
  for (std::size_t a = 0; a < config_.attributes.size(); ++a) {
    if (config_.attributes[a].kind == ModuleKind::adapter) out = adapter_forward(out, m.adapters[a]);
  }
  return out;
}

Tensor EncoderModel::run_sequence(const TokenSequence& tokens, const OmegaMap* omegas) const {
  TokenSequence ids;
  ids.reserve(std::min(tokens.size() + 1, config_.max_length));
  ids.push_back(kClsId);
  for (auto t : tokens) {
    if (ids.size() == config_.max_length) break;
    ids.push_back(t);
  }
  const std::size_t T = ids.size(), d = config_.width, H = config_.heads, dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor x = add(gather_rows(embedding_, ids), slice_rows(positions_, 0, T));
  for (std::size_t l = 0; l < config_.blocks; ++l) {
    const auto& b = attention_[l];
    // Only the pooled first row feeds anything after the final block.
    const bool last = l + 1 == config_.blocks;
    const Tensor xq = last ? slice_rows(x, 0, 1) : x;
    const Tensor q = linear(xq, b.wq, b.bq);
    const Tensor k = linear(x, b.wk, b.bk);
    const Tensor v = linear(x, b.wv, b.bv);
    std::vector<Tensor> heads;
    heads.reserve(H);
    for (std::size_t h = 0; h < H; ++h) {
      const Tensor qh = slice_cols(q, h * dh, dh);
      const Tensor kh = slice_cols(k, h * dh, dh);
      const Tensor vh = slice_cols(v, h * dh, dh);
      const Tensor attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
      heads.push_back(matmul(attn, vh));
    }
    const Tensor attended = linear(H == 1 ? heads[0] : concat_cols(heads), b.wo, b.bo);
    Tensor y = layer_norm_rows(add(xq, attended), b.ln1_g, b.ln1_b, 1e-5);
    const Tensor ff = linear(gelu(linear(y, b.ff1_w, b.ff1_b)), b.ff2_w, b.ff2_b);
    y = layer_norm_rows(add(y, ff), b.ln2_g, b.ln2_b, 1e-5);
    x = apply_modules(y, l, omegas);
  }
  return x;  // [1, d]
}

Tensor EncoderModel::run(std::span<const TokenSequence> batch, const OmegaMap* omegas) const {
  validate_tokens(batch);
  if (omegas) check_omegas(*omegas);
  if (config_.architecture == Architecture::mlp) {
    Tensor x = mean_pool_groups(embedding_, batch);
    for (std::size_t l = 0; l < config_.blocks; ++l) {
      x = tanh(linear(x, dense_[l].w, dense_[l].b));
      x = apply_modules(x, l, omegas);
    }
    return x;
  }
  std::vector<Tensor> pooled;
  pooled.reserve(batch.size());
  for (const auto& seq : batch) pooled.push_back(run_sequence(seq, omegas));
  return concat_rows(pooled);
}

Tensor EncoderModel::encode(std::span<const TokenSequence> batch, const OmegaMap& omegas) const {
  return run(batch, &omegas);
}

Tensor EncoderModel::encode_base(std::span<const TokenSequence> batch) const { return run(batch, nullptr); }

Tensor EncoderModel::task_logits(const Tensor& z, const HeadOptions& options) const {
  if (config_.task != TaskKind::classification) throw std::logic_error("ranking models have no task head");
  Tensor x = z;
  if (options.dropout > 0.0 && options.rng) x = dropout(x, options.dropout, *options.rng);
  return linear(x, task_w_, task_b_);
}

Tensor EncoderModel::predict(const Tensor& z) const { return softmax_rows(task_logits(z)); }

std::vector<Tensor> EncoderModel::adversary_logits(const Tensor& z, const std::string& attribute,
                                                   const HeadOptions& options, bool reverse) const {
  if (config_.task != TaskKind::classification) throw std::logic_error("ranking models have no adversaries");
  std::size_t index = 0;
  while (index < config_.attributes.size() && config_.attributes[index].name != attribute) ++index;
  if (index == config_.attributes.size()) throw std::out_of_range("unknown attribute '" + attribute + "'");
  const Tensor input = reverse ? grad_reverse(z) : z;
  std::vector<Tensor> out;
  for (const auto& member : adversaries_[index]) {
    Tensor x = input;
    if (options.dropout > 0.0 && options.rng) x = dropout(x, options.dropout, *options.rng);
    out.push_back(member(x));
  }
  return out;
}

std::vector<Tensor> EncoderModel::adversary_predict(const Tensor& z, const std::string& attribute) const {
  auto logits = adversary_logits(z, attribute);
  for (auto& l : logits) l = softmax_rows(l);
  return logits;
}

Tensor EncoderModel::score_candidates(const TokenSequence& query, std::span<const TokenSequence> documents,
                                      const OmegaMap& omegas) const {
  if (documents.empty()) throw std::invalid_argument("score_candidates: no documents");
  std::vector<TokenSequence> batch;
  batch.reserve(documents.size() + 1);
  batch.push_back(query);
  batch.insert(batch.end(), documents.begin(), documents.end());
  const Tensor z = encode(batch, omegas);
  const Tensor q = slice_rows(z, 0, 1);
  const Tensor docs = slice_rows(z, 1, documents.size());
  return reshape(matmul(docs, transpose(q)), {documents.size()});
}

std::vector<Tensor> EncoderModel::group(const std::string& name) const {
  std::vector<Tensor> out;
  for (const auto& p : parameters_) {
    if (p.group == name) out.push_back(p.tensor);
  }
  return out;
}

std::vector<std::string> EncoderModel::groups() const {
  std::vector<std::string> out;
  for (const auto& p : parameters_) {
    if (std::find(out.begin(), out.end(), p.group) == out.end()) out.push_back(p.group);
  }
  return out;
}

std::size_t EncoderModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters_) n += p.tensor.size();
  return n;
}

const ConGaterLayer& EncoderModel::gate_layer(std::size_t block, const std::string& attribute) const {
  for (std::size_t a = 0; a < config_.attributes.size(); ++a) {
    if (config_.attributes[a].name == attribute && config_.attributes[a].kind == ModuleKind::congater) {
      return modules_.at(block).gates[a];
    }
  }
  throw std::out_of_range("no ConGater module for attribute '" + attribute + "'");
}

const AdapterLayer& EncoderModel::adapter_layer(std::size_t block, const std::string& attribute) const {
  for (std::size_t a = 0; a < config_.attributes.size(); ++a) {
    if (config_.attributes[a].name == attribute && config_.attributes[a].kind == ModuleKind::adapter) {
      return modules_.at(block).adapters[a];
    }
  }
  throw std::out_of_range("no adapter module for attribute '" + attribute + "'");
}

}  // namespace congater
