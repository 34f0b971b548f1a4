#include <gtest/gtest.h>

#include <filesystem>

#include "glaucad/weights_io.hpp"

using namespace glaucad;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("glaucad_weights_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(WeightsIO, RoundTripIsBitExact) {
  const auto dir = temp_dir("roundtrip");
  const auto cfg = ModelConfig::tiny();
  Rng rng(3);
  auto w = build_model<float>(cfg, rng);
  save_weights(w, dir / "tiny.mdnw", cfg.variant_name);
  auto loaded = load_weights<float>(dir / "tiny.mdnw", cfg);
  EXPECT_TRUE(loaded.fresh.empty());
  EXPECT_EQ(loaded.manifest.variant, cfg.variant_name);
  ASSERT_EQ(loaded.weights.size(), w.size());
  for (auto& [name, t] : w) {
    ASSERT_EQ(loaded.weights.at(name).shape(), t.shape());
    EXPECT_EQ(loaded.weights.at(name).values(), t.values()) << name;
  }
  // Re-encoding the loaded weights reproduces the file byte for byte.
  EXPECT_EQ(encode_weights(loaded.weights, cfg.variant_name), detail::read_file(dir / "tiny.mdnw"));
}

TEST(WeightsIO, ContainerLayout) {
  Rng rng(3);
  auto w = build_model<float>(ModelConfig::tiny(), rng);
  const auto bytes = encode_weights(w, "tiny");
  ASSERT_GT(bytes.size(), 14u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MDNW");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(detail::get_u32(bytes.data() + bytes.size() - 4), detail::crc32_of(bytes.data(), bytes.size() - 4));
  auto decoded = decode_weights<float>(bytes);
  std::uint64_t end = 0;
  for (const auto& e : decoded.manifest.entries) {
    EXPECT_EQ(e.offset, end) << e.name;
    EXPECT_EQ(e.length, shape_numel(e.shape) * 4);
    end = e.offset + e.length;
  }
}

TEST(WeightsIO, CorruptedPayloadByteFailsChecksum) {
  Rng rng(3);
  auto w = build_model<float>(ModelConfig::tiny(), rng);
  auto bytes = encode_weights(w, "tiny");
  bytes[bytes.size() - 100] ^= 0x01;
  try {
    decode_weights<float>(bytes);
    FAIL() << "expected checksum failure";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
  }
}

TEST(WeightsIO, RejectsBadMagicVersionAndTruncation) {
  Rng rng(3);
  auto w = build_model<float>(ModelConfig::tiny(), rng);
  const auto good = encode_weights(w);
  auto bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_weights<float>(bad), DataError);
  bad = good;
  bad[4] = 2;
  // Fix up the checksum so the version check itself is exercised.
  bad.resize(bad.size() - 4);
  detail::put_u32(bad, detail::crc32_of(bad.data(), bad.size()));
  try {
    decode_weights<float>(bad);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
  }
  EXPECT_THROW(decode_weights<float>(std::vector<std::uint8_t>(good.begin(), good.begin() + 20)), DataError);
}

TEST(WeightsIO, StrictLoadRejectsShapeConflict) {
  const auto dir = temp_dir("strict");
  Rng rng(3);
  auto tiny = ModelConfig::tiny();
  save_weights(build_model<float>(tiny, rng), dir / "w.mdnw");
  auto other = tiny;
  other.head.front().channels = 32;
  EXPECT_THROW(load_weights<float>(dir / "w.mdnw", other), DataError);
  EXPECT_THROW(load_weights<float>(dir / "missing.mdnw", tiny), DataError);
}

TEST(WeightsIO, PermissiveLoadReportsFreshHead) {
  const auto dir = temp_dir("permissive");
  const auto cfg = ModelConfig::tiny();
  Rng rng(3);
  auto full = build_model<float>(cfg, rng);
  ModelWeights<float> features;
  for (auto& [name, t] : full)
    if (name.starts_with("block")) features.emplace(name, t);
  save_weights(features, dir / "features.mdnw");

  EXPECT_THROW(load_weights<float>(dir / "features.mdnw", cfg), DataError);
  auto loaded = load_weights<float>(dir / "features.mdnw", cfg, true, 99);
  std::vector<std::string> expected_fresh{"head_1.weight", "head_1.bias", "head_2.weight", "head_2.bias"};
  auto fresh = loaded.fresh;
  std::sort(fresh.begin(), fresh.end());
  std::sort(expected_fresh.begin(), expected_fresh.end());
  EXPECT_EQ(fresh, expected_fresh);
  EXPECT_TRUE(loaded.ignored.empty());
  check_weights(cfg, loaded.weights);
  for (auto& [name, t] : features) EXPECT_EQ(loaded.weights.at(name).values(), t.values());
  // Fresh values depend only on the init seed.
  auto again = load_weights<float>(dir / "features.mdnw", cfg, true, 99);
  EXPECT_EQ(again.weights.at("head_1.weight").values(), loaded.weights.at("head_1.weight").values());
}
