#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "glaucad/error.hpp"
#include "glaucad/ops.hpp"
#include "glaucad/rng.hpp"
#include "glaucad/tensor.hpp"
#include "json.hpp"

namespace glaucad {

inline constexpr int kNormal = 0;
inline constexpr int kGlaucoma = 1;

inline const char* class_name(int c) { return c == kGlaucoma ? "glaucoma" : "normal"; }

struct BlockSpec {
  std::size_t conv_count = 1;
  std::size_t channels = 8;
};

struct HeadLayerSpec {
  std::size_t kernel = 1;
  std::size_t channels = 2;
};

// VGG-style fully-convolutional classifier description.
//
// Feature blocks are [conv3x3 -> ReLU] x conv_count -> dropout -> maxpool2x2.
// Head layers are unpadded convolutions; every head layer but the last is
// followed by ReLU and dropout, and the last one's spatial map is averaged
// into per-class logits.
struct ModelConfig {
  std::string variant_name = "vgg16_fcn";
  std::vector<BlockSpec> blocks;
  std::vector<HeadLayerSpec> head;
  double dropout_rate = 0.5;
  std::size_t num_classes = 2;
  std::size_t input_size = 224;
  std::size_t input_channels = 3;
  // Multiplies the mean-subtracted input before the first convolution.
  double input_scale = 1.0;

  // VGG16 feature blocks with fc6/fc7/fc8 rewritten as 7x7/1x1/1x1 convs.
  static ModelConfig vgg16() {
    ModelConfig c;
    c.variant_name = "vgg16_fcn";
    c.blocks = {{2, 64}, {2, 128}, {3, 256}, {3, 512}, {3, 512}};
    c.head = {{7, 4096}, {1, 4096}, {1, 2}};
    c.input_size = 224;
    return c;
  }

  static ModelConfig tiny() {
    ModelConfig c;
    c.variant_name = "tiny";
    c.blocks = {{1, 8}, {1, 16}, {1, 32}};
    c.head = {{4, 64}, {1, 2}};
    c.input_size = 32;
    c.input_scale = 1.0 / 64.0;
    return c;
  }

  // Tiny variant at 64x64 input with a 1x1 head and no dropout.
  static ModelConfig tiny64() {
    ModelConfig c = tiny();
    c.variant_name = "tiny64";
    c.head = {{1, 64}, {1, 2}};
    c.input_size = 64;
    c.dropout_rate = 0.0;
    return c;
  }

  static ModelConfig named(const std::string& name) {
    if (name == "vgg16_fcn" || name == "vgg16") return vgg16();
    if (name == "tiny") return tiny();
    if (name == "tiny64") return tiny64();
    throw ConfigError("unknown model variant '" + name + "' (expected vgg16_fcn, tiny, tiny64)");
  }

  std::size_t feature_extent() const { return input_size >> blocks.size(); }

  // Activation read by Grad-CAM: output of the last conv of the final block.
  std::string gradcam_layer() const {
    return "block" + std::to_string(blocks.size()) + "_conv" +
           std::to_string(blocks.empty() ? 0 : blocks.back().conv_count);
  }

  void validate() const {
    if (blocks.empty()) throw ConfigError("model config: at least one feature block required");
    if (head.empty()) throw ConfigError("model config: at least one head layer required");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw ConfigError("model config: dropout_rate must lie in [0, 1)");
    if (!(input_scale > 0.0 && std::isfinite(input_scale)))
      throw ConfigError("model config: input_scale must be positive and finite");
    if (num_classes == 0) throw ConfigError("model config: num_classes must be positive");
    if (input_size == 0 || input_channels == 0)
      throw ConfigError("model config: input_size and input_channels must be positive");
    const std::size_t div = std::size_t{1} << blocks.size();
    if (input_size % div != 0) {
      throw ConfigError("model config: input_size " + std::to_string(input_size) +
                        " must be divisible by 2^" + std::to_string(blocks.size()));
    }
    for (const auto& b : blocks) {
      if (b.conv_count == 0 || b.channels == 0)
        throw ConfigError("model config: blocks need conv_count and channels > 0");
    }
    if (head.back().channels != num_classes) {
      throw ConfigError("model config: final head layer has " +
                        std::to_string(head.back().channels) + " channels, expected num_classes=" +
                        std::to_string(num_classes));
    }
    std::size_t extent = feature_extent();
    for (const auto& h : head) {
      if (h.kernel == 0 || h.channels == 0 || h.kernel > extent) {
        throw ConfigError("model config: head kernel " + std::to_string(h.kernel) +
                          " does not fit feature map of extent " + std::to_string(extent));
      }
      extent = extent - h.kernel + 1;
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json::object();
  j["variant_name"] = c.variant_name;
  j["blocks"] = nlohmann::json::array();
  for (const auto& b : c.blocks) j["blocks"].push_back({b.conv_count, b.channels});
  j["head"] = nlohmann::json::array();
  for (const auto& h : c.head) j["head"].push_back({h.kernel, h.channels});
  j["dropout_rate"] = c.dropout_rate;
  j["num_classes"] = c.num_classes;
  j["input_size"] = c.input_size;
  j["input_channels"] = c.input_channels;
  j["input_scale"] = c.input_scale;
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    c = ModelConfig{};
    c.variant_name = j.value("variant_name", std::string("custom"));
    c.blocks.clear();
    for (const auto& b : j.at("blocks")) c.blocks.push_back({b.at(0).get<std::size_t>(), b.at(1).get<std::size_t>()});
    c.head.clear();
    for (const auto& h : j.at("head")) c.head.push_back({h.at(0).get<std::size_t>(), h.at(1).get<std::size_t>()});
    c.dropout_rate = j.value("dropout_rate", 0.5);
    c.num_classes = j.value("num_classes", std::size_t{2});
    c.input_size = j.value("input_size", std::size_t{224});
    c.input_channels = j.value("input_channels", std::size_t{3});
    c.input_scale = j.value("input_scale", 1.0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config JSON: ") + e.what());
  }
}

struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;
  bool is_bias = false;
};

// Parameters in forward order, named blockB_convI.{weight,bias} and
// head_H.{weight,bias} with 1-based indices.
inline std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> specs;
  std::size_t cin = cfg.input_channels;
  for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
    for (std::size_t i = 0; i < cfg.blocks[b].conv_count; ++i) {
      const auto base = "block" + std::to_string(b + 1) + "_conv" + std::to_string(i + 1);
      const auto cout = cfg.blocks[b].channels;
      specs.push_back({base + ".weight", {cout, cin, 3, 3}, cin * 9, false});
      specs.push_back({base + ".bias", {cout}, cin * 9, true});
      cin = cout;
    }
  }
  for (std::size_t h = 0; h < cfg.head.size(); ++h) {
    const auto base = "head_" + std::to_string(h + 1);
    const auto k = cfg.head[h].kernel, cout = cfg.head[h].channels;
    specs.push_back({base + ".weight", {cout, cin, k, k}, cin * k * k, false});
    specs.push_back({base + ".bias", {cout}, cin * k * k, true});
    cin = cout;
  }
  return specs;
}

inline std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : parameter_specs(cfg)) n += shape_numel(s.shape);
  return n;
}

template <class T>
using ModelWeights = std::map<std::string, Tensor<T>>;

// He-normal weights (std = sqrt(2 / fan_in)), zero biases. Draws happen in
// parameter_specs() order so a seed fixes every value.
template <class T>
Tensor<T> init_parameter(const ParamSpec& spec, Rng& rng) {
  Tensor<T> t(spec.shape);
  if (!spec.is_bias) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(spec.fan_in));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  }
  return t;
}

template <class T>
ModelWeights<T> build_model(const ModelConfig& cfg, Rng& init_rng) {
  ModelWeights<T> w;
  for (const auto& spec : parameter_specs(cfg)) w.emplace(spec.name, init_parameter<T>(spec, init_rng));
  return w;
}

template <class T>
ModelWeights<T> clone_weights(const ModelWeights<T>& w) {
  ModelWeights<T> out;
  for (const auto& [name, t] : w) out.emplace(name, t.clone());
  return out;
}

template <class T>
void set_requires_grad(ModelWeights<T>& w, bool on) {
  for (auto& [name, t] : w) t.set_requires_grad(on);
}

template <class T>
void zero_grad(ModelWeights<T>& w) {
  for (auto& [name, t] : w) t.zero_grad();
}

// Throws unless `w` holds exactly the parameters of `cfg` with matching shapes.
template <class T>
void check_weights(const ModelConfig& cfg, const ModelWeights<T>& w) {
  const auto specs = parameter_specs(cfg);
  for (const auto& s : specs) {
    auto it = w.find(s.name);
    if (it == w.end()) throw ShapeError("weights: missing parameter " + s.name);
    if (it->second.shape() != s.shape) {
      throw ShapeError("weights: " + s.name + " has shape " + shape_str(it->second.shape()) +
                       ", config expects " + shape_str(s.shape));
    }
  }
  if (w.size() != specs.size()) throw ShapeError("weights: unexpected extra parameters");
}

template <class T>
struct ForwardResult {
  Tensor<T> logits;                             // N x num_classes
  std::map<std::string, Tensor<T>> activations;  // post-ReLU conv outputs by layer name
};

struct ForwardOptions {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;  // required in train mode when dropout_rate > 0
  // Activation to mark as differentiable so its gradient is kept, even when
  // the weights themselves do not require gradients.
  std::optional<std::string> tap_layer;
};

template <class T>
ForwardResult<T> forward_logits(const ModelConfig& cfg, const ModelWeights<T>& w,
                                const Tensor<T>& batch, const ForwardOptions& opt = {},
                                Tape<T>* tape = nullptr) {
  cfg.validate();
  if (batch.rank() != 4 || batch.dim(1) != cfg.input_channels || batch.dim(2) != cfg.input_size ||
      batch.dim(3) != cfg.input_size) {
    throw ShapeError("forward: expected batch N x " + std::to_string(cfg.input_channels) + " x " +
                     std::to_string(cfg.input_size) + " x " + std::to_string(cfg.input_size) +
                     ", got " + shape_str(batch.shape()));
  }
  const auto param = [&](const std::string& name) -> const Tensor<T>& {
    auto it = w.find(name);
    if (it == w.end()) throw ShapeError("forward: missing parameter " + name);
    return it->second;
  };
  ForwardResult<T> r;
  auto keep = [&](const std::string& name, Tensor<T>& a) {
    if (opt.tap_layer && *opt.tap_layer == name) a.set_requires_grad(true);
    r.activations.emplace(name, a);
  };

  Tensor<T> x = cfg.input_scale == 1.0 ? batch : scale(batch, static_cast<T>(cfg.input_scale), tape);
  for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
    for (std::size_t i = 0; i < cfg.blocks[b].conv_count; ++i) {
      const auto name = "block" + std::to_string(b + 1) + "_conv" + std::to_string(i + 1);
      x = conv2d(x, param(name + ".weight"), param(name + ".bias"), {1, 1}, tape);
      x = relu(x, tape);
      keep(name, x);
    }
    x = dropout(x, cfg.dropout_rate, opt.mode, opt.rng, tape);
    x = maxpool2d(x, 2, tape);
  }
  for (std::size_t h = 0; h < cfg.head.size(); ++h) {
    const auto name = "head_" + std::to_string(h + 1);
    x = conv2d(x, param(name + ".weight"), param(name + ".bias"), {1, 0}, tape);
    if (h + 1 < cfg.head.size()) {
      x = relu(x, tape);
      keep(name, x);
      x = dropout(x, cfg.dropout_rate, opt.mode, opt.rng, tape);
    }
  }
  if (opt.tap_layer && !r.activations.contains(*opt.tap_layer)) {
    throw ConfigError("forward: unknown layer '" + *opt.tap_layer + "'");
  }
  r.logits = global_avg_pool(x, tape);
  return r;
}

struct Prediction {
  double p_normal = 0.5;
  double p_glaucoma = 0.5;
  int predicted_class = kNormal;
};

// Exact ties resolve to normal.
inline int predicted_class_from(double p_normal, double p_glaucoma) {
  return p_glaucoma > p_normal ? kGlaucoma : kNormal;
}

template <class T>
std::vector<Prediction> predictions_from_logits(const Tensor<T>& logits) {
  const Tensor<T> p = softmax(logits);
  std::vector<Prediction> out(logits.dim(0));
  const std::size_t C = logits.dim(1);
  for (std::size_t n = 0; n < out.size(); ++n) {
    out[n].p_normal = static_cast<double>(p[n * C + kNormal]);
    out[n].p_glaucoma = static_cast<double>(p[n * C + kGlaucoma]);
    out[n].predicted_class = predicted_class_from(out[n].p_normal, out[n].p_glaucoma);
  }
  return out;
}

template <class T>
std::vector<Prediction> predict_proba(const ModelConfig& cfg, const ModelWeights<T>& w,
                                      const Tensor<T>& batch) {
  return predictions_from_logits(forward_logits(cfg, w, batch).logits);
}

}  // namespace glaucad
