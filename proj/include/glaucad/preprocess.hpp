#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "glaucad/error.hpp"
#include "glaucad/image.hpp"
#include "glaucad/model.hpp"
#include "glaucad/rng.hpp"
#include "glaucad/tensor.hpp"

namespace glaucad {

struct ImageSample {
  Image pixels;                     // RGB
  int label = kNormal;
  std::optional<Image> lesion_mask;  // 1 channel, values 0/1, same extent as pixels
  std::string id;

  void validate() const {
    if (pixels.channels != 3) throw DataError(id + ": sample pixels must be RGB");
    if (label != kNormal && label != kGlaucoma) throw DataError(id + ": label must be 0 or 1");
    if (lesion_mask && (lesion_mask->width != pixels.width || lesion_mask->height != pixels.height ||
                        lesion_mask->channels != 1)) {
      throw DataError(id + ": lesion mask extent differs from image");
    }
  }
};

// Per-channel means in 0-255 units, RGB order.
struct NormalizationStats {
  std::array<double, 3> mean = {105.51, 54.52, 16.19};
};

// Largest centered square, resampled to target x target. Masks follow with
// nearest-neighbour sampling.
inline ImageSample center_crop_resize(const ImageSample& s, std::size_t target) {
  if (target < 8) throw ConfigError("center_crop_resize: target must be >= 8");
  if (s.pixels.empty()) throw DataError(s.id + ": degenerate image with zero extent");
  const std::size_t side = std::min(s.pixels.width, s.pixels.height);
  const std::size_t x0 = (s.pixels.width - side) / 2, y0 = (s.pixels.height - side) / 2;
  ImageSample out;
  out.label = s.label;
  out.id = s.id;
  out.pixels = resize_bilinear(s.pixels, x0, y0, side, side, target, target);
  if (s.lesion_mask) out.lesion_mask = resize_nearest(*s.lesion_mask, x0, y0, side, side, target, target);
  return out;
}

// HxWx3 bytes -> 3xHxW real tensor with the channel means subtracted.
template <class T = float>
Tensor<T> normalize(const Image& img, const NormalizationStats& stats = {}) {
  for (double m : stats.mean) {
    if (!std::isfinite(m)) throw ConfigError("normalize: non-finite channel mean");
  }
  if (img.channels != 3) throw DataError("normalize: RGB image required");
  const std::size_t H = img.height, W = img.width;
  Tensor<T> out({3, H, W});
  auto d = out.data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        d[(c * H + y) * W + x] = static_cast<T>(static_cast<double>(img.at(x, y, c)) - stats.mean[c]);
  return out;
}

struct AugmentConfig {
  double random_crop_fraction = 0.9;
  double hflip_probability = 0.5;
  double brightness_sigma = 0.8;  // factor ~ U[1 - sigma, 1 + sigma], floored at 0.2

  void validate() const {
    if (!(random_crop_fraction > 0.0 && random_crop_fraction <= 1.0))
      throw ConfigError("augment: random_crop_fraction must be in (0, 1]");
    if (!(hflip_probability >= 0.0 && hflip_probability <= 1.0))
      throw ConfigError("augment: hflip_probability must be in [0, 1]");
    if (!(brightness_sigma >= 0.0)) throw ConfigError("augment: brightness_sigma must be >= 0");
  }
};

inline constexpr double kMinBrightness = 0.2;

// The random choices of one augmentation, drawn up front so they can also be
// replayed or constructed by hand.
struct AugmentDraws {
  std::size_t crop_side = 0;  // 0 = no crop
  std::size_t crop_x = 0;
  std::size_t crop_y = 0;
  bool flip = false;
  double brightness = 1.0;
};

// Draw order is fixed: crop x, crop y, flip, brightness.
inline AugmentDraws draw_augment(const AugmentConfig& cfg, std::size_t width, std::size_t height,
                                 Rng& rng) {
  cfg.validate();
  AugmentDraws d;
  const std::size_t side = std::min(width, height);
  d.crop_side = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(cfg.random_crop_fraction * static_cast<double>(side))), 1,
      side);
  d.crop_x = static_cast<std::size_t>(rng.below(width - d.crop_side + 1));
  d.crop_y = static_cast<std::size_t>(rng.below(height - d.crop_side + 1));
  d.flip = rng.bernoulli(cfg.hflip_probability);
  d.brightness = std::max(kMinBrightness, rng.uniform(1.0 - cfg.brightness_sigma, 1.0 + cfg.brightness_sigma));
  return d;
}

// Crop-and-resize back to the original extent, optional flip, brightness
// scaling clamped to [0, 255]. Geometry is applied to the mask too.
inline ImageSample apply_augment(const ImageSample& s, const AugmentDraws& d) {
  const std::size_t W = s.pixels.width, H = s.pixels.height;
  ImageSample out = s;
  if (d.crop_side > 0 && !(d.crop_side == W && d.crop_side == H)) {
    out.pixels = resize_bilinear(s.pixels, d.crop_x, d.crop_y, d.crop_side, d.crop_side, W, H);
    if (s.lesion_mask)
      out.lesion_mask = resize_nearest(*s.lesion_mask, d.crop_x, d.crop_y, d.crop_side, d.crop_side, W, H);
  }
  if (d.flip) {
    out.pixels = flip_horizontal(out.pixels);
    if (out.lesion_mask) out.lesion_mask = flip_horizontal(*out.lesion_mask);
  }
  if (d.brightness != 1.0) {
    for (auto& v : out.pixels.pixels) {
      v = static_cast<std::uint8_t>(std::clamp(std::lround(v * d.brightness), 0L, 255L));
    }
  }
  return out;
}

inline ImageSample augment(const ImageSample& s, const AugmentConfig& cfg, Rng& rng) {
  return apply_augment(s, draw_augment(cfg, s.pixels.width, s.pixels.height, rng));
}

}  // namespace glaucad
