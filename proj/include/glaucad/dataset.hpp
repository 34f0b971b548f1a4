#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "glaucad/error.hpp"
#include "glaucad/image.hpp"
#include "glaucad/preprocess.hpp"
#include "glaucad/rng.hpp"
#include "glaucad/tensor.hpp"

namespace glaucad {

struct ManifestEntry {
  std::string image;                // relative to the manifest directory
  int label = kNormal;
  std::optional<std::string> mask;  // relative to the manifest directory
};

// Tab-separated corpus index: "image<TAB>label[<TAB>mask]" per line.
struct DatasetManifest {
  std::filesystem::path root;  // directory that entry paths are relative to
  std::string split;           // train / val / test, taken from the file stem
  std::vector<ManifestEntry> entries;

  std::size_t size() const { return entries.size(); }

  std::array<std::size_t, 2> class_counts() const {
    std::array<std::size_t, 2> c{0, 0};
    for (const auto& e : entries) ++c[static_cast<std::size_t>(e.label)];
    return c;
  }

  std::filesystem::path image_path(std::size_t i) const { return root / entries.at(i).image; }
  std::optional<std::filesystem::path> mask_path(std::size_t i) const {
    const auto& m = entries.at(i).mask;
    return m ? std::optional(root / *m) : std::nullopt;
  }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.label);
    return out;
  }

  // Manifest over a subset of entries, sharing the same root.
  DatasetManifest subset(const std::vector<std::size_t>& indices, std::string tag) const {
    DatasetManifest m{root, std::move(tag), {}};
    for (auto i : indices) m.entries.push_back(entries.at(i));
    return m;
  }
};

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  m.split = path.stem().string();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
    const auto where = path.string() + ":" + std::to_string(lineno);
    if (fields.size() < 2 || fields.size() > 3) throw DataError(where + ": expected 2 or 3 tab-separated fields");
    ManifestEntry e;
    e.image = fields[0];
    if (fields[1] == "0") e.label = kNormal;
    else if (fields[1] == "1") e.label = kGlaucoma;
    else throw DataError(where + ": label must be 0 or 1, got '" + fields[1] + "'");
    if (fields.size() == 3 && !fields[2].empty()) e.mask = fields[2];
    if (!std::filesystem::exists(m.root / e.image)) {
      throw DataError(where + ": missing image file " + (m.root / e.image).string());
    }
    if (e.mask && !std::filesystem::exists(m.root / *e.mask)) {
      throw DataError(where + ": missing mask file " + (m.root / *e.mask).string());
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ostringstream os;
  for (const auto& e : m.entries) {
    os << e.image << '\t' << e.label;
    if (e.mask) os << '\t' << *e.mask;
    os << '\n';
  }
  const auto text = os.str();
  detail::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline ImageSample load_sample(const DatasetManifest& m, std::size_t i) {
  ImageSample s;
  s.id = m.entries.at(i).image;
  s.label = m.entries[i].label;
  s.pixels = read_image(m.image_path(i));
  if (auto mp = m.mask_path(i)) s.lesion_mask = read_mask(*mp);
  s.validate();
  return s;
}

// Loads and center-crops every sample of a manifest to `size` x `size`.
inline std::vector<ImageSample> load_samples(const DatasetManifest& m, std::size_t size) {
  std::vector<ImageSample> out;
  out.reserve(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out.push_back(center_crop_resize(load_sample(m, i), size));
  return out;
}

// Epoch partition into batches; the last short batch is kept.
inline std::vector<std::vector<std::size_t>> batch_partition(std::size_t n, std::size_t batch_size,
                                                              bool shuffle, Rng* rng) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    if (!rng) throw ConfigError("shuffled batching requires an Rng");
    rng->shuffle(order);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

template <class T = float>
struct Batch {
  Tensor<T> images;  // N x 3 x S x S, mean-subtracted
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // positions in the source sample list
};

// Stacks samples into a batch. When `augment_cfg` is set, each sample is
// augmented with an Rng derived from (augment_seed, sample id), so results
// do not depend on batch composition or worker assignment.
template <class T = float>
Batch<T> make_batch(std::span<const ImageSample> samples, const std::vector<std::size_t>& indices,
                    const NormalizationStats& stats = {},
                    const AugmentConfig* augment_cfg = nullptr, std::uint64_t augment_seed = 0) {
  if (indices.empty()) throw ConfigError("make_batch: empty batch");
  const auto& first = samples[indices.front()].pixels;
  const std::size_t H = first.height, W = first.width;
  Batch<T> b;
  b.images = Tensor<T>({indices.size(), 3, H, W});
  auto dst = b.images.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const ImageSample& src = samples[indices[k]];
    if (src.pixels.width != W || src.pixels.height != H) throw ShapeError("make_batch: samples differ in extent");
    Tensor<T> x;
    if (augment_cfg) {
      Rng rng(derive_seed(augment_seed, hash_id(src.id)));
      x = normalize<T>(augment(src, *augment_cfg, rng).pixels, stats);
    } else {
      x = normalize<T>(src.pixels, stats);
    }
    std::copy(x.data().begin(), x.data().end(), dst.begin() + static_cast<std::ptrdiff_t>(k * x.numel()));
    b.labels.push_back(src.label);
    b.indices.push_back(indices[k]);
  }
  return b;
}

// Streams preprocessed batches straight from disk, one epoch.
template <class T = float>
class BatchStream {
 public:
  BatchStream(DatasetManifest manifest, std::size_t batch_size, bool shuffle, Rng* rng,
              std::size_t input_size, NormalizationStats stats = {})
      : manifest_(std::move(manifest)),
        batches_(batch_partition(manifest_.size(), batch_size, shuffle, rng)),
        input_size_(input_size),
        stats_(stats) {}

  std::size_t batch_count() const { return batches_.size(); }

  std::optional<Batch<T>> next() {
    if (pos_ >= batches_.size()) return std::nullopt;
    const auto& idx = batches_[pos_++];
    std::vector<ImageSample> loaded;
    std::vector<std::size_t> local;
    for (std::size_t i : idx) {
      local.push_back(loaded.size());
      loaded.push_back(center_crop_resize(load_sample(manifest_, i), input_size_));
    }
    Batch<T> b = make_batch<T>(loaded, local, stats_);
    b.indices = idx;
    return b;
  }

 private:
  DatasetManifest manifest_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t input_size_;
  NormalizationStats stats_;
  std::size_t pos_ = 0;
};

template <class T = float>
BatchStream<T> batch_iter(const DatasetManifest& m, std::size_t batch_size, bool shuffle, Rng* rng,
                          std::size_t input_size) {
  return BatchStream<T>(m, batch_size, shuffle, rng, input_size);
}

}  // namespace glaucad
