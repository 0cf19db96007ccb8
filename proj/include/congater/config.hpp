// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "congater/data.hpp"
#include "congater/encoder.hpp"
#include "congater/evaluation.hpp"
#include "congater/training.hpp"
#include "json.hpp"

namespace congater {

/// Invalid configuration document; `path` names the offending key, e.g. "training.task_lr".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::runtime_error(path.empty() ? message : path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string model_dir = "models";
  std::string cors_origin = "*";
  unsigned sweep_threads = 1;
};

/// Resolved run configuration. The encoder shares vocab_size, task_classes
/// and attributes with the data section.
struct RunConfig {
  EncoderConfig encoder;
  std::uint64_t model_seed = 1;
  SynthConfig data;
  /// Directory of JSONL splits; empty means synthesize in memory.
  std::string data_dir;
  TrainConfig training;
  SweepOptions evaluation;

  ServiceConfig service;

  nlohmann::json to_json() const;
  /// Hex FNV-1a 64 of the canonical JSON form.
  std::string hash() const;
};

/// Parses a configuration document, rejecting unknown keys and invalid values.
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies "section.key=value" overrides to a raw document. The value is read
/// as JSON when it parses, otherwise as a string.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides);

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_from_json(const nlohmann::json& j);

}  // namespace congater
