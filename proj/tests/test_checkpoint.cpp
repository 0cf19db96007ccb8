// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "congater/checkpoint.hpp"
#include "congater/config.hpp"
#include "test_support.hpp"

using namespace congater;
using congater::testing::random_batch;
using congater::testing::snapshot;
using congater::testing::tiny_config;
using nlohmann::json;

namespace {

EncoderModel f32_model(Architecture arch = Architecture::transformer) {
  EncoderModel m(tiny_config(arch, TaskKind::classification,
                             {{"gender", 2, ModuleKind::congater}, {"age", 3, ModuleKind::adapter}}),
                 21);
  round_to_f32(m);
  return m;
}

CheckpointMeta sample_meta() {
  CheckpointMeta meta;
  meta.seed = 21;
  meta.config_hash = "00000000deadbeef";
  meta.provenance = {{"note", "unit test"}};
  meta.wordlists = {{"gender", {{10, 11}, {12, 13}}}};
  meta.background_neutrality = {1.0, 0.5};
  return meta;
}

std::uint64_t header_length(const std::string& bytes) {
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data() + 8, 8);
  return n;
}

json header_of(const std::string& bytes) { return json::parse(bytes.substr(16, header_length(bytes))); }

std::string with_header(const std::string& bytes, const json& header) {
  const std::string h = header.dump();
  const std::uint64_t n = h.size();
  std::string out(bytes.substr(0, 8));
  out.append(reinterpret_cast<const char*>(&n), 8);
  out += h;
  out += bytes.substr(16 + header_length(bytes));
  return out;
}

std::string error_of(const std::string& bytes) {
  try {
    parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.what();
  }
  return "<accepted>";
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExactAtF32) {
  for (const auto arch : {Architecture::transformer, Architecture::mlp}) {
    const EncoderModel m = f32_model(arch);
    const auto dir = std::filesystem::temp_directory_path() / "congater_ckpt_test";
    std::filesystem::create_directories(dir);
    save_checkpoint(m, sample_meta(), dir / "m.ckpt");
    const Checkpoint c = load_checkpoint(dir / "m.ckpt");
    EXPECT_EQ(snapshot(c.model), snapshot(m));
    EXPECT_EQ(to_json(c.model.config()), to_json(m.config()));
    EXPECT_EQ(c.meta.wordlists, sample_meta().wordlists);
    EXPECT_EQ(c.meta.background_neutrality, sample_meta().background_neutrality);
    EXPECT_EQ(c.meta.config_hash, "00000000deadbeef");
    EXPECT_EQ(c.meta.provenance["note"], "unit test");
    EXPECT_FALSE(c.file_hash.empty());

    std::mt19937_64 rng(1);
    const auto batch = random_batch(4, 40, rng);
    for (double w : {0.0, 0.4, 1.0}) {
      const Tensor a = m.predict(m.encode(batch, {{"gender", w}}));
      const Tensor b = c.model.predict(c.model.encode(batch, {{"gender", w}}));
      for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]);
    }
    std::filesystem::remove_all(dir);
  }
}

TEST(Checkpoint, SerialisationIsDeterministic) {
  const EncoderModel m = f32_model();
  const std::string a = serialize_checkpoint(m, sample_meta());
  EXPECT_EQ(a, serialize_checkpoint(m, sample_meta()));
  EXPECT_EQ(a.substr(0, 8), std::string(kCheckpointMagic, 8));
  const json h = header_of(a);
  EXPECT_EQ(h["format_version"], kCheckpointFormatVersion);
  EXPECT_EQ(h["seed"], 21);
  EXPECT_EQ(h["config_hash"], "00000000deadbeef");
  std::size_t expected = 0;
  for (const auto& p : h["parameters"]) {
    EXPECT_EQ(p["dtype"], "f32");
    EXPECT_EQ(p["byte_offset"].get<std::size_t>(), expected);
    std::size_t n = 1;
    for (const auto& d : p["shape"]) n *= d.get<std::size_t>();
    expected += 4 * n;
  }
  EXPECT_EQ(h["payload_bytes"].get<std::size_t>(), expected);
}

TEST(Checkpoint, CorruptedPayloadByteRejected) {
  std::string bytes = serialize_checkpoint(f32_model(), sample_meta());
  bytes[bytes.size() - 5] ^= 0x10;
  EXPECT_NE(error_of(bytes).find("checksum"), std::string::npos) << error_of(bytes);
}

TEST(Checkpoint, TruncationRejected) {
  const std::string bytes = serialize_checkpoint(f32_model(), sample_meta());
  EXPECT_NE(error_of(bytes.substr(0, bytes.size() - 4)), "<accepted>");
  EXPECT_NE(error_of(bytes.substr(0, 12)), "<accepted>");
  EXPECT_NE(error_of(bytes.substr(0, 16 + header_length(bytes) / 2)), "<accepted>");
}

TEST(Checkpoint, HeaderValidation) {
  const std::string bytes = serialize_checkpoint(f32_model(), sample_meta());
  json h = header_of(bytes);
  h["format_version"] = 2;
  EXPECT_NE(error_of(with_header(bytes, h)).find("version"), std::string::npos);

  h = header_of(bytes);
  h["parameters"][1]["byte_offset"] = h["parameters"][0]["byte_offset"].get<std::size_t>() + 4;
  EXPECT_NE(error_of(with_header(bytes, h)).find("overlap"), std::string::npos) << error_of(with_header(bytes, h));

  h = header_of(bytes);
  h["parameters"][0]["shape"] = {1};
  EXPECT_NE(error_of(with_header(bytes, h)), "<accepted>");

  h = header_of(bytes);
  h["parameters"][0]["name"] = "renamed";
  EXPECT_NE(error_of(with_header(bytes, h)), "<accepted>");

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_NE(error_of(bad_magic), "<accepted>");
}

TEST(Checkpoint, RoundToF32IsIdempotent) {
  EncoderModel m(tiny_config(Architecture::mlp), 3);
  round_to_f32(m);
  const auto once = snapshot(m);
  round_to_f32(m);
  EXPECT_EQ(snapshot(m), once);
  for (double v : once) EXPECT_EQ(static_cast<double>(static_cast<float>(v)), v);
}
