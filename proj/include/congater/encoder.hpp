// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "congater/gate.hpp"
#include "congater/tensor.hpp"
#include "congater/types.hpp"

namespace congater {

enum class Architecture { transformer, mlp };
enum class ModuleKind { none, congater, adapter };
enum class TaskKind { classification, ranking };

std::string to_string(Architecture a);
std::string to_string(ModuleKind k);
std::string to_string(TaskKind k);
Architecture parse_architecture(const std::string& s);
ModuleKind parse_module_kind(const std::string& s);
TaskKind parse_task_kind(const std::string& s);

struct AttributeSpec {
  std::string name;
  std::size_t classes = 2;
  ModuleKind kind = ModuleKind::congater;
};

struct EncoderConfig {
  Architecture architecture = Architecture::transformer;
  TaskKind task = TaskKind::classification;
  std::size_t vocab_size = 512;
  std::size_t width = 48;
  std::size_t blocks = 2;
  std::size_t heads = 2;
  std::size_t ff_width = 96;
  std::size_t max_length = 32;
  std::size_t bottleneck_factor = 8;
  std::size_t task_classes = 2;
  std::vector<AttributeSpec> attributes;
  std::size_t adversary_ensemble = 5;
  /// Hidden width of adversary members; 0 means `width`.
  std::size_t adversary_hidden = 0;

  void validate() const;
  const AttributeSpec& attribute(const std::string& name) const;
};

/// Parameter groups: Θ is "task", θ_i is "attr:<name>", adversary heads of
/// attribute i are "adv:<name>".
inline constexpr const char* kTaskGroup = "task";
std::string attribute_group(const std::string& attribute);
std::string adversary_group(const std::string& attribute);

struct NamedParameter {
  std::string name;
  std::string group;
  Tensor tensor;
};

/// Two fully connected layers with tanh in between.
struct MlpHead {
  Tensor w1, b1, w2, b2;
  Tensor operator()(const Tensor& x) const;
};

/// Dropout applied to the pooled embedding before a head; training only.
struct HeadOptions {
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

/// Token embedding, transformer (or MLP) blocks, per-attribute ConGater or
/// adapter modules after every block, a one-layer task head and, for each
/// attribute, an ensemble of adversary heads.
class EncoderModel {
 public:
  EncoderModel(EncoderConfig config, std::uint64_t seed);

  EncoderModel(EncoderModel&&) noexcept = default;
  EncoderModel& operator=(EncoderModel&&) noexcept = default;
  EncoderModel(const EncoderModel&) = delete;
  EncoderModel& operator=(const EncoderModel&) = delete;

  /// Deep copy with independent parameter storage.
  EncoderModel clone() const;

  const EncoderConfig& config() const { return config_; }

  /// Pooled embeddings [batch, width] with per-attribute modules active.
  Tensor encode(std::span<const TokenSequence> batch, const OmegaMap& omegas) const;
  /// The same network with every inserted module removed.
  Tensor encode_base(std::span<const TokenSequence> batch) const;

  Tensor task_logits(const Tensor& z, const HeadOptions& options = {}) const;
  /// Class probabilities [batch, task_classes].
  Tensor predict(const Tensor& z) const;
  /// One logit matrix per ensemble member, each computed on grad_reverse(z).
  std::vector<Tensor> adversary_logits(const Tensor& z, const std::string& attribute,
                                       const HeadOptions& options = {}, bool reverse = true) const;
  std::vector<Tensor> adversary_predict(const Tensor& z, const std::string& attribute) const;

  /// Relevance scores [candidates] as dot products of query and document embeddings.
  Tensor score_candidates(const TokenSequence& query, std::span<const TokenSequence> documents,
                          const OmegaMap& omegas) const;

  /// Validates keys and ranges; returns warnings for sensitivities given to
  /// attributes whose module has no sensitivity (adapters, none).
  std::vector<std::string> check_omegas(const OmegaMap& omegas) const;

  std::span<const NamedParameter> parameters() const { return parameters_; }
  std::vector<Tensor> group(const std::string& name) const;
  std::vector<std::string> groups() const;
  std::size_t parameter_count() const;

  const ConGaterLayer& gate_layer(std::size_t block, const std::string& attribute) const;
  const AdapterLayer& adapter_layer(std::size_t block, const std::string& attribute) const;

 private:
  struct AttentionBlock {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b, ff1_w, ff1_b, ff2_w, ff2_b, ln2_g, ln2_b;
  };
  struct DenseBlock {
    Tensor w, b;
  };
  struct BlockModules {
    std::vector<ConGaterLayer> gates;     // indexed like config_.attributes
    std::vector<AdapterLayer> adapters;   // indexed like config_.attributes
  };

  Tensor register_param(std::string name, std::string group, Tensor t);
  Tensor run(std::span<const TokenSequence> batch, const OmegaMap* omegas) const;
  Tensor run_sequence(const TokenSequence& tokens, const OmegaMap* omegas) const;
  Tensor apply_modules(const Tensor& x, std::size_t block, const OmegaMap* omegas) const;
  void validate_tokens(std::span<const TokenSequence> batch) const;

  EncoderConfig config_;
  Tensor embedding_;
  Tensor positions_;
  std::vector<AttentionBlock> attention_;
  std::vector<DenseBlock> dense_;
  std::vector<BlockModules> modules_;
  Tensor task_w_, task_b_;
  std::vector<std::vector<MlpHead>> adversaries_;  // per attribute
  std::vector<NamedParameter> parameters_;
};

}  // namespace congater
