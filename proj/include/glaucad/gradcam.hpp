#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "glaucad/error.hpp"
#include "glaucad/image.hpp"
#include "glaucad/model.hpp"
#include "glaucad/preprocess.hpp"

namespace glaucad {

struct Heatmap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major, in [0, 1]
  std::string source_layer;
  int target_class = kGlaucoma;
  std::size_t input_size = 0;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

// Grad-CAM from one activation stack A (K x h x w) and dL/dA of the same
// shape: alpha_k = mean_ij dA_k, map = ReLU(sum_k alpha_k A_k), divided by
// its maximum when positive.
inline Heatmap gradcam_from(std::span<const double> activation, std::span<const double> gradient,
                            std::size_t channels, std::size_t h, std::size_t w) {
  if (activation.size() != channels * h * w || gradient.size() != activation.size()) {
    throw ShapeError("gradcam: activation/gradient size mismatch");
  }
  Heatmap hm;
  hm.height = h;
  hm.width = w;
  hm.values.assign(h * w, 0.0);
  const std::size_t hw = h * w;
  for (std::size_t k = 0; k < channels; ++k) {
    double alpha = 0;
    for (std::size_t i = 0; i < hw; ++i) alpha += gradient[k * hw + i];
    alpha /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) hm.values[i] += alpha * activation[k * hw + i];
  }
  double peak = 0;
  for (auto& v : hm.values) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak > 0) {
    for (auto& v : hm.values) v /= peak;
  }
  return hm;
}

// Eval-mode forward with `layer` tapped, backward from the target-class
// logit (pre-softmax), then gradcam_from on the tapped activation.
template <class T>
Heatmap compute_gradcam(const ModelConfig& cfg, const ModelWeights<T>& weights, const Tensor<T>& input,
                        int target_class, std::optional<std::string> layer = std::nullopt) {
  if (input.rank() != 4 || input.dim(0) != 1) {
    throw ShapeError("gradcam: expected a single-image batch 1 x C x S x S, got " + shape_str(input.shape()));
  }
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= cfg.num_classes) {
    throw ConfigError("gradcam: target class out of range");
  }
  const std::string name = layer.value_or(cfg.gradcam_layer());
  Tape<T> tape;
  ForwardOptions opt;
  opt.mode = Mode::eval;
  opt.tap_layer = name;
  const auto fr = forward_logits(cfg, weights, input, opt, &tape);
  const auto score = select(fr.logits, static_cast<std::size_t>(target_class), &tape);
  backward(tape, score);
  const Tensor<T>& a = fr.activations.at(name);
  std::vector<double> act(a.data().begin(), a.data().end());
  std::vector<double> grad(a.numel(), 0.0);
  if (a.has_grad()) std::copy(a.grad().begin(), a.grad().end(), grad.begin());
  auto hm = gradcam_from(act, grad, a.dim(1), a.dim(2), a.dim(3));
  hm.source_layer = name;
  hm.target_class = target_class;
  hm.input_size = cfg.input_size;
  return hm;
}

// Bilinear lift (half-pixel centers) to size x size; defaults to input_size.
inline Heatmap upsample_heatmap(const Heatmap& hm, std::size_t size = 0) {
  if (hm.height == 0 || hm.width == 0) throw ShapeError("upsample_heatmap: empty heatmap");
  if (size == 0) size = hm.input_size;
  if (size == 0) throw ConfigError("upsample_heatmap: target size unknown");
  Heatmap out = hm;
  out.height = out.width = size;
  out.values.assign(size * size, 0.0);
  std::vector<BilinearTap> xs(size);
  for (std::size_t x = 0; x < size; ++x) xs[x] = bilinear_tap(x, hm.width, size);
  for (std::size_t y = 0; y < size; ++y) {
    const auto ty = bilinear_tap(y, hm.height, size);
    for (std::size_t x = 0; x < size; ++x) {
      const auto& tx = xs[x];
      const double top = hm.at(ty.i0, tx.i0) + (hm.at(ty.i0, tx.i1) - hm.at(ty.i0, tx.i0)) * tx.t;
      const double bot = hm.at(ty.i1, tx.i0) + (hm.at(ty.i1, tx.i1) - hm.at(ty.i1, tx.i0)) * tx.t;
      out.values[y * size + x] = std::clamp(top + (bot - top) * ty.t, 0.0, 1.0);
    }
  }
  return out;
}

// Colormap stops: 0 -> blue (0,0,255), 0.5 -> green (0,255,0), 1 -> red (255,0,0),
// linear in between.
inline std::array<double, 3> colormap(double v) {
  v = std::clamp(v, 0.0, 1.0);
  if (v < 0.5) {
    const double t = v / 0.5;
    return {0.0, 255.0 * t, 255.0 * (1.0 - t)};
  }
  const double t = (v - 0.5) / 0.5;
  return {255.0 * t, 255.0 * (1.0 - t), 0.0};
}

struct OverlayConfig {
  double alpha = 0.4;
  double threshold = 0.2;

  void validate() const {
    if (!(alpha >= 0 && alpha <= 1 && threshold >= 0 && threshold <= 1))
      throw ConfigError("overlay: alpha and threshold must lie in [0, 1]");
  }
};

// out = round((1 - alpha) * image + alpha * colormap(h)) where h >= threshold.
inline Image render_overlay(const Image& image, const Heatmap& hm, const OverlayConfig& cfg = {}) {
  cfg.validate();
  if (image.channels != 3 || image.width != hm.width || image.height != hm.height) {
    throw ShapeError("overlay: image and heatmap extents differ");
  }
  Image out = image;
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double h = hm.at(y, x);
      if (h < cfg.threshold) continue;
      const auto c = colormap(h);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = (1.0 - cfg.alpha) * image.at(x, y, ch) + cfg.alpha * c[ch];
        out.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

inline Image heatmap_to_image(const Heatmap& hm) {
  Image out(hm.width, hm.height, 1);
  for (std::size_t i = 0; i < hm.values.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(hm.values[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

struct LocalizationResult {
  Prediction prediction;
  bool gated = false;              // true when a map was produced (glaucoma predicted)
  std::optional<Heatmap> heatmap;  // upsampled to input size
  std::optional<Image> overlay;
  std::optional<bool> pointing_hit;
};

// Predicts; only a glaucoma prediction triggers Grad-CAM, upsampling and the
// overlay. `image` is the preprocessed S x S RGB the network sees.
template <class T>
LocalizationResult localize(const ModelConfig& cfg, const ModelWeights<T>& weights, const Image& image,
                            const NormalizationStats& stats = {}, const OverlayConfig& overlay = {}) {
  const Tensor<T> x = normalize<T>(image, stats).reshaped({1, 3, image.height, image.width});
  LocalizationResult r;
  r.prediction = predict_proba(cfg, weights, x).at(0);
  if (r.prediction.predicted_class != kGlaucoma) return r;
  r.gated = true;
  r.heatmap = upsample_heatmap(compute_gradcam(cfg, weights, x, kGlaucoma));
  r.overlay = render_overlay(image, *r.heatmap, overlay);
  return r;
}

// First row-major maximum.
inline std::size_t heatmap_argmax(const Heatmap& hm) {
  return static_cast<std::size_t>(std::max_element(hm.values.begin(), hm.values.end()) - hm.values.begin());
}

inline bool pointing_hit(const Heatmap& hm, const Image& mask) {
  if (mask.width != hm.width || mask.height != hm.height || mask.channels != 1) {
    throw ShapeError("pointing game: mask extent differs from heatmap");
  }
  return mask.pixels[heatmap_argmax(hm)] != 0;
}

struct PointingGameResult {
  std::size_t hits = 0;
  std::size_t evaluated = 0;
  std::vector<std::size_t> excluded;  // indices skipped for an empty mask
  double rate() const { return evaluated ? static_cast<double>(hits) / static_cast<double>(evaluated) : 0.0; }
};

inline PointingGameResult pointing_game_eval(std::span<const Heatmap> heatmaps, std::span<const Image> masks) {
  if (heatmaps.size() != masks.size()) throw ConfigError("pointing game: heatmaps and masks must pair up");
  PointingGameResult r;
  for (std::size_t i = 0; i < heatmaps.size(); ++i) {
    if (std::none_of(masks[i].pixels.begin(), masks[i].pixels.end(), [](auto v) { return v != 0; })) {
      r.excluded.push_back(i);
      continue;
    }
    ++r.evaluated;
    if (pointing_hit(heatmaps[i], masks[i])) ++r.hits;
  }
  return r;
}

// IoU between {heatmap >= threshold} and the mask.
inline double mask_iou(const Heatmap& hm, const Image& mask, double threshold = 0.5) {
  if (mask.width != hm.width || mask.height != hm.height) throw ShapeError("mask_iou: extent mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < hm.values.size(); ++i) {
    const bool a = hm.values[i] >= threshold, b = mask.pixels[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace glaucad
