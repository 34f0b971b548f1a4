#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "glaucad/error.hpp"
#include "glaucad/model.hpp"
#include "json.hpp"

// MDNW weight container
//
//   "MDNW"                      4 bytes
//   version                     u16 little-endian (currently 1)
//   manifest length             u32 little-endian
//   manifest                    UTF-8 JSON, see WeightManifest
//   payload                     concatenated tensors, f32 little-endian, row-major
//   crc32                       u32 little-endian, CRC-32 (zlib) of all preceding bytes
//
// Entry offsets are relative to the start of the payload.

namespace glaucad {

inline constexpr std::uint16_t kWeightFormatVersion = 1;

struct WeightEntry {
  std::string name;
  std::string dtype = "float32";
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct WeightManifest {
  std::uint16_t version = kWeightFormatVersion;
  std::string variant;
  std::vector<WeightEntry> entries;
  std::uint32_t checksum = 0;
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 |
         std::uint32_t{p[3]} << 24;
}

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> encode_weights(const ModelWeights<T>& weights,
                                         const std::string& variant = {}) {
  nlohmann::json manifest;
  manifest["format"] = "MDNW";
  manifest["version"] = kWeightFormatVersion;
  manifest["variant"] = variant;
  manifest["entries"] = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& [name, t] : weights) {
    const std::uint64_t offset = payload.size();
    for (T v : t.data()) detail::put_u32(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    manifest["entries"].push_back({{"name", name},
                                   {"dtype", "float32"},
                                   {"shape", t.shape()},
                                   {"offset", offset},
                                   {"length", payload.size() - offset}});
  }
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out = {'M', 'D', 'N', 'W'};
  detail::put_u16(out, kWeightFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  detail::put_u32(out, detail::crc32_of(out.data(), out.size()));
  return out;
}

template <class T>
void save_weights(const ModelWeights<T>& weights, const std::filesystem::path& path,
                  const std::string& variant = {}) {
  detail::write_file(path, encode_weights(weights, variant));
}

// Parsed, integrity-checked container contents.
template <class T>
struct DecodedWeights {
  WeightManifest manifest;
  ModelWeights<T> tensors;
};

template <class T>
DecodedWeights<T> decode_weights(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kHeader = 4 + 2 + 4;
  if (bytes.size() < kHeader + 4 || std::memcmp(bytes.data(), "MDNW", 4) != 0) {
    throw DataError("weights: not an MDNW container");
  }
  const std::size_t body = bytes.size() - 4;
  const std::uint32_t stored = detail::get_u32(bytes.data() + body);
  const std::uint32_t actual = detail::crc32_of(bytes.data(), body);
  if (stored != actual) throw DataError("weights: checksum mismatch (file corrupted)");
  const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | bytes[5] << 8);
  if (version != kWeightFormatVersion) {
    throw DataError("weights: unsupported container version " + std::to_string(version));
  }
  const std::size_t mlen = detail::get_u32(bytes.data() + 6);
  if (kHeader + mlen > body) throw DataError("weights: manifest exceeds file size");
  DecodedWeights<T> out;
  out.manifest.version = version;
  out.manifest.checksum = stored;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + kHeader, bytes.begin() + kHeader + mlen);
    out.manifest.variant = manifest.value("variant", std::string());
    for (const auto& e : manifest.at("entries")) {
      WeightEntry we;
      we.name = e.at("name").get<std::string>();
      we.dtype = e.at("dtype").get<std::string>();
      we.shape = e.at("shape").get<Shape>();
      we.offset = e.at("offset").get<std::uint64_t>();
      we.length = e.at("length").get<std::uint64_t>();
      out.manifest.entries.push_back(std::move(we));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("weights: malformed manifest: ") + e.what());
  }
  const std::uint8_t* payload = bytes.data() + kHeader + mlen;
  const std::size_t payload_size = body - kHeader - mlen;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& e : out.manifest.entries) {
    if (e.dtype != "float32") throw DataError("weights: unsupported dtype " + e.dtype);
    if (e.shape.empty() || shape_numel(e.shape) * 4 != e.length) {
      throw DataError("weights: entry " + e.name + " length does not match its shape");
    }
    if (e.offset > payload_size || e.length > payload_size - e.offset) {
      throw DataError("weights: entry " + e.name + " out of bounds");
    }
    spans.emplace_back(e.offset, e.offset + e.length);
    std::vector<T> values(shape_numel(e.shape));
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] = static_cast<T>(std::bit_cast<float>(detail::get_u32(payload + e.offset + 4 * i)));
    }
    if (!out.tensors.emplace(e.name, Tensor<T>(e.shape, std::move(values))).second) {
      throw DataError("weights: duplicate entry " + e.name);
    }
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) throw DataError("weights: overlapping entries");
  }
  return out;
}

template <class T>
struct LoadedWeights {
  ModelWeights<T> weights;
  WeightManifest manifest;
  std::vector<std::string> fresh;    // parameters left at fresh initialization (permissive)
  std::vector<std::string> ignored;  // container entries with no matching parameter (permissive)
};

// Strict mode requires an exact name/shape match with the config. Permissive
// mode copies every matching entry and initializes the rest from
// `init_seed`, which is how a feature-only checkpoint seeds a new head.
template <class T>
LoadedWeights<T> load_weights(const std::filesystem::path& path, const ModelConfig& cfg,
                              bool permissive = false, std::uint64_t init_seed = 0) {
  auto decoded = decode_weights<T>(detail::read_file(path));
  const auto specs = parameter_specs(cfg);
  LoadedWeights<T> out;
  out.manifest = std::move(decoded.manifest);
  std::set<std::string> used;
  Rng rng(init_seed);
  for (const auto& spec : specs) {
    auto it = decoded.tensors.find(spec.name);
    // Always draw so the fresh values do not depend on which entries matched.
    Tensor<T> fresh = init_parameter<T>(spec, rng);
    if (it != decoded.tensors.end() && it->second.shape() == spec.shape) {
      out.weights.emplace(spec.name, it->second);
      used.insert(spec.name);
      continue;
    }
    if (!permissive) {
      if (it == decoded.tensors.end()) throw DataError("weights: missing parameter " + spec.name);
      throw DataError("weights: shape conflict for " + spec.name + ": file " +
                      shape_str(it->second.shape()) + " vs config " + shape_str(spec.shape));
    }
    out.weights.emplace(spec.name, std::move(fresh));
    out.fresh.push_back(spec.name);
  }
  for (const auto& [name, t] : decoded.tensors) {
    if (used.contains(name)) continue;
    if (!permissive) throw DataError("weights: unexpected entry " + name);
    out.ignored.push_back(name);
  }
  return out;
}

}  // namespace glaucad
