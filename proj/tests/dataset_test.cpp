#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "glaucad/dataset.hpp"
#include "glaucad/synthetic.hpp"
#include "json.hpp"

using namespace glaucad;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("glaucad_dataset_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SyntheticConfig small_config(std::uint64_t seed = 7) {
  SyntheticConfig c;
  c.train_count = 10;
  c.val_count = 4;
  c.test_count = 4;
  c.image_extent = 64;
  c.seed = seed;
  return c;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) { return detail::read_file(p); }

// Every file under `root`, relative path -> bytes.
std::map<std::string, std::vector<std::uint8_t>> tree(const fs::path& root) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = file_bytes(e.path());
  return out;
}

}  // namespace

TEST(BatchPartition, TenByThree) {
  const auto b = batch_partition(10, 3, false, nullptr);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b[0].size(), 3u);
  EXPECT_EQ(b[1].size(), 3u);
  EXPECT_EQ(b[2].size(), 3u);
  EXPECT_EQ(b[3].size(), 1u);
}

TEST(BatchPartition, ShuffleCoversOnceAndIsSeeded) {
  Rng a(5), b(5), c(6);
  const auto x = batch_partition(37, 8, true, &a), y = batch_partition(37, 8, true, &b),
             z = batch_partition(37, 8, true, &c);
  EXPECT_EQ(x, y);
  EXPECT_NE(x, z);
  std::vector<std::size_t> all;
  for (const auto& batch : x) all.insert(all.end(), batch.begin(), batch.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 37; ++i) EXPECT_EQ(all[i], i);
  EXPECT_THROW(batch_partition(5, 0, false, nullptr), ConfigError);
  EXPECT_THROW(batch_partition(5, 2, true, nullptr), ConfigError);
}

TEST(Synthetic, DefaultCountsAndBalance) {
  const SyntheticConfig c;
  EXPECT_EQ(c.train_count, 1080u);
  EXPECT_EQ(c.val_count, 220u);
  EXPECT_EQ(c.test_count, 110u);
  EXPECT_EQ(c.seed, 7u);
  auto odd = small_config();
  odd.val_count = 5;
  EXPECT_THROW(odd.validate(), ConfigError);
  EXPECT_THROW(generate_synthetic_corpus(odd, temp_dir("odd")), ConfigError);
}

TEST(Synthetic, GlaucomaMaskInsideDiscNormalMaskEmpty) {
  const auto cfg = small_config();
  for (int i = 0; i < 40; ++i) {
    const int label = i % 2;
    Rng rng(derive_seed(99, static_cast<std::uint64_t>(i)));
    const auto s = render_synthetic(cfg, label, rng, "x" + std::to_string(i), "train");
    const auto& mask = *s.sample.lesion_mask;
    std::size_t on = 0;
    for (std::size_t y = 0; y < mask.height; ++y)
      for (std::size_t x = 0; x < mask.width; ++x) {
        if (!mask.at(x, y)) continue;
        ++on;
        EXPECT_TRUE(s.disc.contains(x + 0.5, y + 0.5)) << i << " at " << x << "," << y;
      }
    if (label == kGlaucoma) {
      EXPECT_GT(on, 0u);
      EXPECT_GT(s.cup_to_disc, cfg.cdr_threshold);
    } else {
      EXPECT_EQ(on, 0u);
      EXPECT_LT(s.cup_to_disc, cfg.cdr_threshold);
    }
  }
}

TEST(Synthetic, CorpusManifestsMetadataAndSeparability) {
  const auto dir = temp_dir("corpus");
  const auto cfg = small_config();
  const auto corpus = generate_synthetic_corpus(cfg, dir);
  for (const auto& [split, n] : {std::pair{"train", 10u}, {"val", 4u}, {"test", 4u}}) {
    const auto m = load_manifest(dir / (std::string(split) + ".tsv"));
    EXPECT_EQ(m.size(), n);
    EXPECT_EQ(m.class_counts()[0], n / 2);
    EXPECT_EQ(m.class_counts()[1], n / 2);
    EXPECT_EQ(m.split, split);
    EXPECT_EQ(m.labels(), corpus.splits.at(split).labels());
  }
  std::ifstream in(corpus.metadata_path);
  const auto meta = nlohmann::json::parse(in);
  EXPECT_EQ(meta.at("seed"), 7);
  ASSERT_EQ(meta.at("samples").size(), 18u);
  for (const auto& s : meta.at("samples")) {
    const bool above = s.at("cup_to_disc").get<double>() > cfg.cdr_threshold;
    EXPECT_EQ(above, s.at("label").get<int>() == 1);
  }
}

TEST(Synthetic, SameSeedByteIdenticalCorpus) {
  const auto a = temp_dir("seed_a"), b = temp_dir("seed_b"), c = temp_dir("seed_c");
  generate_synthetic_corpus(small_config(7), a);
  generate_synthetic_corpus(small_config(7), b);
  generate_synthetic_corpus(small_config(8), c);
  EXPECT_EQ(tree(a), tree(b));
  EXPECT_NE(tree(a), tree(c));
}

TEST(Manifest, LoadErrorsNameThePath) {
  const auto dir = temp_dir("manifest");
  std::ofstream(dir / "bad.tsv") << "images/missing.png\t1\n";
  try {
    load_manifest(dir / "bad.tsv");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.png"), std::string::npos);
  }
  write_png(Image(4, 4, 3), dir / "a.png");
  std::ofstream(dir / "label.tsv") << "a.png\t2\n";
  EXPECT_THROW(load_manifest(dir / "label.tsv"), DataError);
  EXPECT_THROW(load_manifest(dir / "nope.tsv"), DataError);
  std::ofstream(dir / "ok.tsv") << "a.png\t0\n";
  const auto m = load_manifest(dir / "ok.tsv");
  EXPECT_EQ(m.size(), 1u);
  EXPECT_FALSE(m.mask_path(0));
}

TEST(BatchIter, EpochLabelsAreManifestMultiset) {
  const auto dir = temp_dir("iter");
  const auto corpus = generate_synthetic_corpus(small_config(), dir);
  const auto m = load_manifest(dir / "train.tsv");
  Rng rng(3);
  auto stream = batch_iter<float>(m, 3, true, &rng, 32);
  EXPECT_EQ(stream.batch_count(), 4u);
  std::vector<int> seen;
  std::vector<std::size_t> sizes, idx;
  while (auto b = stream.next()) {
    EXPECT_EQ(b->images.shape(), (Shape{b->labels.size(), 3, 32, 32}));
    sizes.push_back(b->labels.size());
    seen.insert(seen.end(), b->labels.begin(), b->labels.end());
    for (std::size_t k = 0; k < b->indices.size(); ++k) {
      EXPECT_EQ(m.entries[b->indices[k]].label, b->labels[k]);
      idx.push_back(b->indices[k]);
    }
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 3, 1}));
  auto expected = m.labels();
  std::sort(expected.begin(), expected.end());
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen, expected);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(idx[i], i);
}

TEST(MakeBatch, AugmentationDependsOnSampleNotBatch) {
  const auto dir = temp_dir("augbatch");
  generate_synthetic_corpus(small_config(), dir);
  const auto samples = load_samples(load_manifest(dir / "train.tsv"), 32);
  AugmentConfig aug;
  const auto whole = make_batch<float>(samples, {0, 1, 2, 3}, {}, &aug, 11);
  const auto part = make_batch<float>(samples, {2}, {}, &aug, 11);
  const std::size_t per = 3 * 32 * 32;
  for (std::size_t i = 0; i < per; ++i) ASSERT_EQ(whole.images[2 * per + i], part.images[i]);
  const auto other = make_batch<float>(samples, {2}, {}, &aug, 12);
  EXPECT_NE(other.images.values(), part.images.values());
  const auto plain = make_batch<float>(samples, {2}, {});
  EXPECT_EQ(plain.images.values(), normalize<float>(samples[2].pixels).values());
}
