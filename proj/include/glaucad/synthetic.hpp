#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "glaucad/dataset.hpp"
#include "glaucad/error.hpp"
#include "glaucad/image.hpp"
#include "glaucad/rng.hpp"
#include "json.hpp"

// Synthetic fundus-like corpus: a dark circular field with vessel-like
// curves, a bright elliptical optic disc and a paler inner cup. Glaucoma
// samples get a large cup (cup-to-disc ratio above `cdr_threshold`) whose
// pixels form the lesion mask; normal samples get a small cup and an empty
// mask.

namespace glaucad {

struct SyntheticConfig {
  std::size_t train_count = 1080;
  std::size_t val_count = 220;
  std::size_t test_count = 110;
  std::size_t image_extent = 256;  // height; width is extent * 5 / 4
  double disc_radius_min = 0.12;   // fractions of the extent
  double disc_radius_max = 0.16;
  double normal_cdr_min = 0.25;
  double normal_cdr_max = 0.45;
  double glaucoma_cdr_min = 0.60;
  double glaucoma_cdr_max = 0.80;
  double cdr_threshold = 0.5;
  double noise_sigma = 6.0;  // per-pixel Gaussian noise, 0-255 units
  std::size_t vessels_min = 6;
  std::size_t vessels_max = 10;
  std::uint64_t seed = 7;

  void validate() const {
    for (auto n : {train_count, val_count, test_count}) {
      if (n % 2 != 0) throw ConfigError("synthetic: split counts must be even for 1:1 balance");
    }
    if (image_extent < 16) throw ConfigError("synthetic: image_extent must be >= 16");
    if (!(disc_radius_min > 0 && disc_radius_min <= disc_radius_max && disc_radius_max < 0.3))
      throw ConfigError("synthetic: invalid disc radius range");
    if (!(normal_cdr_min > 0 && normal_cdr_min <= normal_cdr_max && normal_cdr_max < cdr_threshold &&
          cdr_threshold < glaucoma_cdr_min && glaucoma_cdr_min <= glaucoma_cdr_max && glaucoma_cdr_max < 1.0))
      throw ConfigError("synthetic: cup-to-disc ranges must straddle cdr_threshold inside (0, 1)");
    if (vessels_min > vessels_max) throw ConfigError("synthetic: vessels_min > vessels_max");
    if (noise_sigma < 0) throw ConfigError("synthetic: noise_sigma must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = {{"train_count", c.train_count},       {"val_count", c.val_count},
       {"test_count", c.test_count},         {"image_extent", c.image_extent},
       {"disc_radius_min", c.disc_radius_min}, {"disc_radius_max", c.disc_radius_max},
       {"normal_cdr_min", c.normal_cdr_min}, {"normal_cdr_max", c.normal_cdr_max},
       {"glaucoma_cdr_min", c.glaucoma_cdr_min}, {"glaucoma_cdr_max", c.glaucoma_cdr_max},
       {"cdr_threshold", c.cdr_threshold},   {"noise_sigma", c.noise_sigma},
       {"vessels_min", c.vessels_min},       {"vessels_max", c.vessels_max},
       {"seed", c.seed}};
}

struct Ellipse {
  double cx = 0, cy = 0, rx = 1, ry = 1;

  // Normalized radius; <= 1 inside.
  double radius_at(double x, double y) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return std::sqrt(dx * dx + dy * dy);
  }
  bool contains(double x, double y) const { return radius_at(x, y) <= 1.0; }
};

struct SyntheticSample {
  std::string id;
  std::string split;
  int label = kNormal;
  double cup_to_disc = 0;
  Ellipse disc;
  Ellipse cup;
  ImageSample sample;
};

inline void to_json(nlohmann::json& j, const Ellipse& e) {
  j = {{"cx", e.cx}, {"cy", e.cy}, {"rx", e.rx}, {"ry", e.ry}};
}

namespace detail {

struct Rgb {
  double r, g, b;
};

inline void blend(Image& img, std::size_t x, std::size_t y, const Rgb& c, double a,
                  std::vector<double>& buf) {
  double* p = &buf[(y * img.width + x) * 3];
  p[0] += (c.r - p[0]) * a;
  p[1] += (c.g - p[1]) * a;
  p[2] += (c.b - p[2]) * a;
}

// Soft coverage of an ellipse edge, about one pixel wide.
inline double coverage(const Ellipse& e, double x, double y) {
  const double r = e.radius_at(x, y);
  const double px = std::min(e.rx, e.ry);
  return std::clamp((1.0 - r) * px + 0.5, 0.0, 1.0);
}

}  // namespace detail

// Renders one sample. All randomness comes from `rng`.
inline SyntheticSample render_synthetic(const SyntheticConfig& cfg, int label, Rng& rng,
                                        std::string id, std::string split) {
  const std::size_t H = cfg.image_extent, W = cfg.image_extent * 5 / 4;
  const double E = static_cast<double>(H);
  SyntheticSample out;
  out.id = std::move(id);
  out.split = std::move(split);
  out.label = label;

  const double fcx = W / 2.0, fcy = H / 2.0, fr = 0.48 * E;
  const detail::Rgb base{rng.uniform(160, 200), rng.uniform(60, 90), rng.uniform(20, 40)};
  const detail::Rgb vessel{rng.uniform(100, 130), rng.uniform(25, 45), rng.uniform(15, 30)};
  const detail::Rgb disc_col{rng.uniform(220, 245), rng.uniform(170, 200), rng.uniform(95, 125)};
  const detail::Rgb cup_col{rng.uniform(248, 255), rng.uniform(232, 248), rng.uniform(185, 215)};

  const double dr = E * rng.uniform(cfg.disc_radius_min, cfg.disc_radius_max);
  out.disc = {fcx + rng.uniform(-0.30, 0.30) * fr, fcy + rng.uniform(-0.15, 0.15) * fr,
              dr * rng.uniform(0.90, 1.05), dr * rng.uniform(1.0, 1.12)};
  out.cup_to_disc = label == kGlaucoma ? rng.uniform(cfg.glaucoma_cdr_min, cfg.glaucoma_cdr_max)
                                       : rng.uniform(cfg.normal_cdr_min, cfg.normal_cdr_max);
  // Offset small enough that the cup stays strictly inside the disc.
  const double slack = 0.5 * (1.0 - out.cup_to_disc);
  out.cup = {out.disc.cx + rng.uniform(-slack, slack) * out.disc.rx * 0.7,
             out.disc.cy + rng.uniform(-slack, slack) * out.disc.ry * 0.7,
             out.disc.rx * out.cup_to_disc, out.disc.ry * out.cup_to_disc};

  std::vector<double> buf(W * H * 3, 0.0);
  Image img(W, H, 3);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double rr = std::hypot(px - fcx, py - fcy) / fr;
      const double shade = 1.0 - 0.35 * rr * rr;
      const double a = std::clamp((1.0 - rr) * fr + 0.5, 0.0, 1.0);
      detail::blend(img, x, y, {base.r * shade, base.g * shade, base.b * shade}, a, buf);
    }
  }

  // Vessels: random walks leaving the disc rim, stamped as small discs.
  const std::size_t nv = cfg.vessels_min + rng.below(cfg.vessels_max - cfg.vessels_min + 1);
  for (std::size_t v = 0; v < nv; ++v) {
    double ang = rng.uniform(0, 2 * std::numbers::pi);
    double x = out.disc.cx + std::cos(ang) * out.disc.rx * 0.9;
    double y = out.disc.cy + std::sin(ang) * out.disc.ry * 0.9;
    double width = E / 256.0 * rng.uniform(1.2, 2.6);
    const double step = std::max(0.5, E / 256.0);
    const auto steps = static_cast<std::size_t>(rng.uniform(0.35, 0.7) * E / step);
    double turn = rng.uniform(-0.02, 0.02);
    for (std::size_t s = 0; s < steps; ++s) {
      ang += turn + rng.uniform(-0.05, 0.05);
      turn *= 0.98;
      x += std::cos(ang) * step;
      y += std::sin(ang) * step;
      if (std::hypot(x - fcx, y - fcy) > fr) break;
      const auto r = static_cast<std::ptrdiff_t>(std::ceil(width)) + 1;
      for (std::ptrdiff_t oy = -r; oy <= r; ++oy)
        for (std::ptrdiff_t ox = -r; ox <= r; ++ox) {
          const auto ix = static_cast<std::ptrdiff_t>(x) + ox, iy = static_cast<std::ptrdiff_t>(y) + oy;
          if (ix < 0 || iy < 0 || ix >= static_cast<std::ptrdiff_t>(W) || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          const double d = std::hypot(ix + 0.5 - x, iy + 0.5 - y);
          const double a = std::clamp(width * 0.5 - d + 0.5, 0.0, 1.0) * 0.8;
          if (a > 0) detail::blend(img, static_cast<std::size_t>(ix), static_cast<std::size_t>(iy), vessel, a, buf);
        }
      width = std::max(0.6 * E / 256.0, width * 0.997);
    }
  }

  Image mask(W, H, 1);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double ad = detail::coverage(out.disc, px, py);
      if (ad > 0) detail::blend(img, x, y, disc_col, ad, buf);
      const double ac = detail::coverage(out.cup, px, py);
      if (ac > 0) detail::blend(img, x, y, cup_col, ac, buf);
      if (label == kGlaucoma && out.cup.contains(px, py)) mask.at(x, y) = 1;
    }
  }

  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double n = cfg.noise_sigma > 0 ? rng.normal(0.0, cfg.noise_sigma) : 0.0;
    img.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(buf[i] + n), 0L, 255L));
  }
  out.sample.id = out.id;
  out.sample.label = label;
  out.sample.pixels = std::move(img);
  out.sample.lesion_mask = std::move(mask);
  return out;
}

struct SyntheticCorpus {
  std::map<std::string, DatasetManifest> splits;  // "train", "val", "test"
  std::filesystem::path metadata_path;
};

// Writes images/<split>/NNNNNN.png, masks/<split>/NNNNNN.png, <split>.tsv and
// synthetic.json (config, seed, per-sample geometry and cup-to-disc ratio).
inline SyntheticCorpus generate_synthetic_corpus(const SyntheticConfig& cfg,
                                                 const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw DataError("synthetic: cannot create output directory " + out_dir.string());
  }
  SyntheticCorpus corpus;
  nlohmann::json meta;
  meta["generator"] = "glaucad-synthetic-fundus";
  meta["seed"] = cfg.seed;
  meta["config"] = cfg;
  meta["samples"] = nlohmann::json::array();
  const std::pair<const char*, std::size_t> splits[] = {
      {"train", cfg.train_count}, {"val", cfg.val_count}, {"test", cfg.test_count}};
  for (std::size_t si = 0; si < 3; ++si) {
    const auto [split, count] = splits[si];
    Rng label_rng(derive_seed(cfg.seed, 1000 + si));
    std::vector<int> labels(count, kNormal);
    std::fill(labels.begin() + static_cast<std::ptrdiff_t>(count / 2), labels.end(), kGlaucoma);
    label_rng.shuffle(labels);
    DatasetManifest m{out_dir, split, {}};
    for (std::size_t i = 0; i < count; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%06zu", i);
      const std::string id = std::string(split) + "/" + name;
      Rng rng(derive_seed(cfg.seed, hash_id(id)));
      auto s = render_synthetic(cfg, labels[i], rng, id, split);
      const std::string img_rel = "images/" + id + ".png", mask_rel = "masks/" + id + ".png";
      write_png(s.sample.pixels, out_dir / img_rel);
      write_mask(*s.sample.lesion_mask, out_dir / mask_rel);
      m.entries.push_back({img_rel, labels[i], mask_rel});
      meta["samples"].push_back({{"id", id},
                                 {"split", split},
                                 {"label", labels[i]},
                                 {"cup_to_disc", s.cup_to_disc},
                                 {"disc", s.disc},
                                 {"cup", s.cup}});
    }
    save_manifest(m, out_dir / (std::string(split) + ".tsv"));
    corpus.splits.emplace(split, std::move(m));
  }
  corpus.metadata_path = out_dir / "synthetic.json";
  const std::string text = meta.dump(1);
  detail::write_file(corpus.metadata_path,
                     std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return corpus;
}

}  // namespace glaucad
