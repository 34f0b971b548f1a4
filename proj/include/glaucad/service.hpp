#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "glaucad/error.hpp"
#include "glaucad/gradcam.hpp"
#include "glaucad/image.hpp"
#include "glaucad/model.hpp"
#include "glaucad/preprocess.hpp"
#include "glaucad/weights_io.hpp"
#include "httplib.h"
#include "json.hpp"

// HTTP inference service.
//
//   POST /api/v1/predict   multipart/form-data, field "image" (PNG or JPEG bytes)
//   GET  /api/v1/health    {"status", "model_id", "uptime_s"}
//   GET  /api/v1/model     {"config_name", "input_size", "class_names", "weight_checksum", ...}
//
// Errors are JSON {"error": {"status", "code", "message"}}. Uploads are
// decoded in memory and never written to disk.

namespace glaucad {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path weights;
  std::optional<std::filesystem::path> model_config;  // JSON ModelConfig; default: variant named in the container
  std::size_t max_upload_bytes = 16u << 20;
  int request_timeout_s = 30;
  std::size_t max_concurrent = 8;
  std::string cors_origin = "*";
};

inline ServiceConfig service_config_from_json(const nlohmann::json& j) {
  ServiceConfig c;
  try {
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.weights = j.at("weights").get<std::string>();
    if (j.contains("model_config")) c.model_config = j.at("model_config").get<std::string>();
    c.max_upload_bytes = j.value("max_upload_bytes", c.max_upload_bytes);
    c.request_timeout_s = j.value("request_timeout_s", c.request_timeout_s);
    c.max_concurrent = j.value("max_concurrent", c.max_concurrent);
    c.cors_origin = j.value("cors_origin", c.cors_origin);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("service config: ") + e.what());
  }
  if (c.max_concurrent == 0) throw ConfigError("service config: max_concurrent must be >= 1");
  return c;
}

// An HTTP-level failure with a machine-readable code.
class ApiError : public Error {
 public:
  ApiError(int status, std::string code, const std::string& message)
      : Error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

inline nlohmann::json error_body(int status, const std::string& code, const std::string& message) {
  return {{"error", {{"status", status}, {"code", code}, {"message", message}}}};
}

inline std::string base64(const std::vector<std::uint8_t>& bytes) {
  return httplib::detail::base64_encode(std::string(bytes.begin(), bytes.end()));
}

class InferenceService {
 public:
  InferenceService(ModelConfig cfg, ModelWeights<float> weights, std::string weight_checksum,
                   ServiceConfig scfg = {})
      : cfg_(std::move(cfg)),
        weights_(std::move(weights)),
        checksum_(std::move(weight_checksum)),
        scfg_(std::move(scfg)),
        started_(std::chrono::steady_clock::now()) {
    check_weights(cfg_, weights_);
    set_requires_grad(weights_, false);
    model_id_ = cfg_.variant_name + "-" + checksum_;
  }

  // Loads the weight container named in the config; throws if it cannot.
  static std::unique_ptr<InferenceService> from_config(const ServiceConfig& scfg) {
    const auto bytes = detail::read_file(scfg.weights);
    auto decoded = decode_weights<float>(bytes);
    ModelConfig cfg;
    if (scfg.model_config) {
      cfg = nlohmann::json::parse(detail::read_file(*scfg.model_config)).get<ModelConfig>();
    } else {
      cfg = ModelConfig::named(decoded.manifest.variant);
    }
    auto loaded = load_weights<float>(scfg.weights, cfg, false);
    char hex[16];
    std::snprintf(hex, sizeof hex, "%08x", loaded.manifest.checksum);
    return std::make_unique<InferenceService>(cfg, std::move(loaded.weights), hex, scfg);
  }

  const std::string& model_id() const { return model_id_; }
  const ModelConfig& model_config() const { return cfg_; }
  const ServiceConfig& config() const { return scfg_; }

  // Body of a successful /predict response. Throws ApiError on bad input.
  nlohmann::json predict(std::span<const std::uint8_t> bytes) const {
    const auto t0 = std::chrono::steady_clock::now();
    if (bytes.size() > scfg_.max_upload_bytes) {
      throw ApiError(413, "payload_too_large", "upload exceeds " + std::to_string(scfg_.max_upload_bytes) + " bytes");
    }
    const auto fmt = sniff_format(bytes);
    if (fmt == ImageFormat::bmp || fmt == ImageFormat::other_image) {
      throw ApiError(415, "unsupported_media_type", "only PNG and JPEG images are accepted");
    }
    ImageSample sample;
    try {
      sample.pixels = decode_image(bytes);
    } catch (const DataError& e) {
      throw ApiError(400, "undecodable_image", e.what());
    }
    if (sample.pixels.empty()) throw ApiError(400, "undecodable_image", "image has zero extent");
    const auto prepared = center_crop_resize(sample, cfg_.input_size);
    const auto loc = localize(cfg_, weights_, prepared.pixels);
    nlohmann::json j;
    j["api_version"] = "v1";
    j["probability_glaucoma"] = loc.prediction.p_glaucoma;
    j["probability_normal"] = loc.prediction.p_normal;
    j["predicted_class"] = class_name(loc.prediction.predicted_class);
    j["heatmap_png"] = nullptr;
    j["overlay_png"] = nullptr;
    if (loc.gated) {
      j["heatmap_png"] = base64(encode_png(heatmap_to_image(*loc.heatmap)));
      j["overlay_png"] = base64(encode_png(*loc.overlay));
    }
    j["model_id"] = model_id_;
    j["elapsed_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return j;
  }

  nlohmann::json health() const {
    return {{"status", "ok"},
            {"model_id", model_id_},
            {"uptime_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count()}};
  }

  nlohmann::json model_info() const {
    return {{"model_id", model_id_},
            {"config_name", cfg_.variant_name},
            {"input_size", cfg_.input_size},
            {"class_names", {class_name(kNormal), class_name(kGlaucoma)}},
            {"weight_checksum", checksum_},
            {"parameter_count", parameter_count(cfg_)},
            {"gradcam_layer", cfg_.gradcam_layer()}};
  }

  // Registers routes, limits and CORS on `server`.
  void install(httplib::Server& server) {
    const auto n = scfg_.max_concurrent;
    server.new_task_queue = [n] { return new httplib::ThreadPool(n); };
    server.set_payload_max_length(scfg_.max_upload_bytes + (64u << 10));
    server.set_read_timeout(scfg_.request_timeout_s, 0);
    server.set_write_timeout(scfg_.request_timeout_s, 0);
    const std::string origin = scfg_.cors_origin;
    server.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", origin);
    });
    server.Options(R"(/api/v1/.*)", [origin](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    server.set_error_handler([origin](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      std::string code = "error";
      if (res.status == 413) code = "payload_too_large";
      else if (res.status == 404) code = "not_found";
      else if (res.status == 400) code = "bad_request";
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_content(error_body(res.status, code, httplib::status_message(res.status)).dump(), "application/json");
    });
    server.Get("/api/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(health().dump(), "application/json");
    });
    server.Get("/api/v1/model", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(model_info().dump(), "application/json");
    });
    server.Post("/api/v1/predict", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        if (!req.is_multipart_form_data()) {
          throw ApiError(415, "unsupported_media_type", "expected multipart/form-data with an 'image' field");
        }
        if (!req.has_file("image")) throw ApiError(400, "missing_image_field", "form field 'image' is required");
        const auto file = req.get_file_value("image");
        const auto* p = reinterpret_cast<const std::uint8_t*>(file.content.data());
        res.set_content(predict(std::span(p, file.content.size())).dump(), "application/json");
      } catch (const ApiError& e) {
        res.status = e.status();
        res.set_content(error_body(e.status(), e.code(), e.what()).dump(), "application/json");
      } catch (const std::exception& e) {
        const auto id = ++error_counter_;
        char ref[32];
        std::snprintf(ref, sizeof ref, "err-%06llu", static_cast<unsigned long long>(id));
        std::cerr << "predict " << ref << ": " << e.what() << '\n';
        res.status = 500;
        res.set_content(error_body(500, "internal_error", std::string("internal error ") + ref).dump(),
                        "application/json");
      }
    });
  }

 private:
  ModelConfig cfg_;
  ModelWeights<float> weights_;
  std::string checksum_;
  ServiceConfig scfg_;
  std::string model_id_;
  std::chrono::steady_clock::time_point started_;
  std::atomic<std::uint64_t> error_counter_{0};
};

}  // namespace glaucad
