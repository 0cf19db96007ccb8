// SPDX-License-Identifier: Apache-2.0
#include "congater/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "congater/config.hpp"

namespace congater {

using nlohmann::json;

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 64ULL << 20;

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32_le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

json wordlists_json(const Wordlists& w) {
  json out = json::object();
  for (const auto& [name, lists] : w) out[name] = lists;
  return out;
}

}  // namespace

std::string serialize_checkpoint(const EncoderModel& model, const CheckpointMeta& meta) {
  std::string payload;
  json index = json::array();
  for (const auto& p : model.parameters()) {
    index.push_back({{"name", p.name},
                     {"group", p.group},
                     {"shape", p.tensor.shape()},
                     {"dtype", "f32"},
                     {"byte_offset", payload.size()}});
    for (double v : p.tensor.values()) put_u32_le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  json attrs = json::array();
  for (const auto& a : model.config().attributes) {
    attrs.push_back({{"name", a.name}, {"classes", a.classes}, {"kind", to_string(a.kind)}});
  }
  const json header = {{"format_version", kCheckpointFormatVersion},
                       {"encoder", to_json(model.config())},
                       {"attributes", attrs},
                       {"seed", meta.seed},
                       {"config_hash", meta.config_hash},
                       {"parameters", index},
                       {"payload_bytes", payload.size()},
                       {"payload_checksum", hex64(fnv1a64(payload.data(), payload.size()))},
                       {"wordlists", wordlists_json(meta.wordlists)},
                       {"background_neutrality", meta.background_neutrality},
                       {"provenance", meta.provenance}};
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u64_le(out, text.size());
  out += text;
  out += payload;
  return out;
}

void save_checkpoint(const EncoderModel& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model, meta);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_checkpoint(ss.str(), path.string());
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
  auto fail = [&](const std::string& why) { return CheckpointError(origin + ": " + why); };
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(data, kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw fail("not a checkpoint (bad magic)");
  }
  const std::uint64_t header_len = get_u64_le(data + 8);
  if (header_len > kMaxHeaderBytes || 16 + header_len > bytes.size()) {
    throw fail("header length " + std::to_string(header_len) + " exceeds file size " + std::to_string(bytes.size()));
  }
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw fail(std::string("header is not valid JSON: ") + e.what());
  }
  const std::string payload = bytes.substr(16 + header_len);

  try {
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw fail("format_version " + std::to_string(version) + " is not supported (expected " +
                 std::to_string(kCheckpointFormatVersion) + ")");
    }
    const auto payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    if (payload_bytes != payload.size()) {
      throw fail("payload is " + std::to_string(payload.size()) + " bytes, header declares " +
                 std::to_string(payload_bytes) + " (truncated or padded file)");
    }
    const std::string checksum = hex64(fnv1a64(payload.data(), payload.size()));
    if (checksum != header.at("payload_checksum").get<std::string>()) {
      throw fail("payload checksum mismatch (corrupted payload)");
    }

    const EncoderConfig config = encoder_from_json(header.at("encoder"));
    CheckpointMeta meta;
    meta.seed = header.at("seed").get<std::uint64_t>();
    meta.config_hash = header.at("config_hash").get<std::string>();
    meta.provenance = header.value("provenance", json::object());
    for (auto it = header.at("wordlists").begin(); it != header.at("wordlists").end(); ++it) {
      meta.wordlists[it.key()] = it->get<std::vector<std::vector<TokenId>>>();
    }
    meta.background_neutrality = header.at("background_neutrality").get<std::vector<double>>();

    EncoderModel model(config, meta.seed);
    const auto& index = header.at("parameters");
    const auto params = model.parameters();
    if (index.size() != params.size()) {
      throw fail("parameter index lists " + std::to_string(index.size()) + " tensors, model has " +
                 std::to_string(params.size()));
    }
    std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& entry = index[i];
      const auto name = entry.at("name").get<std::string>();
      if (name != params[i].name) throw fail("parameter " + std::to_string(i) + " is '" + name + "', expected '" + params[i].name + "'");
      if (entry.at("dtype").get<std::string>() != "f32") throw fail("parameter '" + name + "' has unsupported dtype");
      const auto shape = entry.at("shape").get<Shape>();
      if (shape != params[i].tensor.shape()) {
        throw fail("parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                   shape_str(params[i].tensor.shape()));
      }
      const auto offset = entry.at("byte_offset").get<std::uint64_t>();
      const std::uint64_t len = 4ULL * numel(shape);
      if (offset > payload.size() || len > payload.size() - offset) {
        throw fail("parameter '" + name + "' extends past the payload");
      }
      ranges.emplace_back(offset, offset + len);
    }
    auto sorted = ranges;
    std::sort(sorted.begin(), sorted.end());
    std::uint64_t cursor = 0;
    for (const auto& [begin, end] : sorted) {
      if (begin < cursor) throw fail("parameter byte ranges overlap at offset " + std::to_string(begin));
      if (begin > cursor) throw fail("payload has uncovered bytes at offset " + std::to_string(cursor));
      cursor = end;
    }
    if (cursor != payload.size()) throw fail("payload has uncovered trailing bytes");

    const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor t = params[i].tensor;
      auto values = t.mutable_values();
      for (std::size_t k = 0; k < values.size(); ++k) {
        values[k] = static_cast<double>(std::bit_cast<float>(get_u32_le(p + ranges[i].first + 4 * k)));
      }
    }
    return {std::move(model), std::move(meta), hex64(fnv1a64(bytes.data(), bytes.size()))};
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  }
}

void round_to_f32(EncoderModel& model) {
  for (const auto& p : model.parameters()) {
    Tensor t = p.tensor;
    for (auto& v : t.mutable_values()) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace congater
