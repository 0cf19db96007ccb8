// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "congater/data.hpp"
#include "congater/encoder.hpp"
#include "json.hpp"

namespace congater {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'C', 'G', 'A', 'T', 'E', 'R', 'C', 'K'};

/// Everything stored next to the parameters.
struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::string config_hash;
  /// Resolved run configuration and training log, stored verbatim.
  nlohmann::json provenance = nlohmann::json::object();
  Wordlists wordlists;
  /// Neutralities of the retrieval background collection.
  std::vector<double> background_neutrality;
};

struct Checkpoint {
  EncoderModel model;
  CheckpointMeta meta;
  /// Hex FNV-1a 64 of the whole file.
  std::string file_hash;
};

/// Layout: 8-byte magic, little-endian u64 header length, JSON header, then
/// little-endian f32 parameter values at the offsets listed in the header.
void save_checkpoint(const EncoderModel& model, const CheckpointMeta& meta, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Parses an in-memory checkpoint image.
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");
std::string serialize_checkpoint(const EncoderModel& model, const CheckpointMeta& meta);

/// Rounds every parameter to f32 in place, matching what a round trip stores.
void round_to_f32(EncoderModel& model);

}  // namespace congater
