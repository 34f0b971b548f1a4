#pragma once

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "glaucad/error.hpp"
#include "glaucad/weights_io.hpp"

namespace glaucad {

// Interleaved 8-bit image, row-major, `channels` samples per pixel (3 = RGB,
// 1 = grayscale/mask).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  bool empty() const { return width == 0 || height == 0; }
  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

enum class ImageFormat { unknown, png, jpeg, bmp, other_image };

inline ImageFormat sniff_format(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPng[] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPng, 8) == 0) return ImageFormat::png;
  if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff)
    return ImageFormat::jpeg;
  if (bytes.size() >= 2 && bytes[0] == 'B' && bytes[1] == 'M') return ImageFormat::bmp;
  const auto starts = [&](std::string_view magic, std::size_t at = 0) {
    return bytes.size() >= at + magic.size() && std::memcmp(bytes.data() + at, magic.data(), magic.size()) == 0;
  };
  if (starts("GIF8") || starts(std::string_view("II*\0", 4)) || starts(std::string_view("MM\0*", 4)) ||
      (starts("RIFF") && starts("WEBP", 8)))
    return ImageFormat::other_image;
  return ImageFormat::unknown;
}

inline Image decode_png(std::span<const std::uint8_t> bytes, std::size_t channels = 3) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw DataError(std::string("png decode: ") + img.message);
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image out(img.width, img.height, channels);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw DataError("png decode: " + msg);
  }
  return out;
}

inline std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.empty()) throw DataError("png encode: empty image");
  if (image.channels != 1 && image.channels != 3) throw DataError("png encode: 1 or 3 channels only");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(img, size, 0, image.pixels.data(), 0, nullptr)) {
    throw DataError(std::string("png encode: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw DataError(std::string("png encode: ") + img.message);
  }
  out.resize(size);
  return out;
}

namespace detail {

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace detail

inline Image decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo{};
  detail::JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = detail::jpeg_error_exit;
  Image out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError(std::string("jpeg decode: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.width = cinfo.output_width;
  out.height = cinfo.output_height;
  out.channels = 3;
  out.pixels.resize(out.width * out.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + std::size_t{cinfo.output_scanline} * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

inline std::vector<std::uint8_t> encode_jpeg(const Image& image, int quality = 92) {
  if (image.channels != 3) throw DataError("jpeg encode: RGB only");
  jpeg_compress_struct cinfo{};
  detail::JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = detail::jpeg_error_exit;
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    throw DataError(std::string("jpeg encode: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(image.width);
  cinfo.image_height = static_cast<JDIMENSION>(image.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPROW>(image.pixels.data() + std::size_t{cinfo.next_scanline} * image.width * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<std::uint8_t> out(buffer, buffer + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return out;
}

// Decodes PNG or JPEG, detected from magic bytes (not from the file name).
inline Image decode_image(std::span<const std::uint8_t> bytes) {
  switch (sniff_format(bytes)) {
    case ImageFormat::png: return decode_png(bytes);
    case ImageFormat::jpeg: return decode_jpeg(bytes);
    case ImageFormat::bmp:
    case ImageFormat::other_image: throw DataError("image format not supported (PNG or JPEG only)");
    case ImageFormat::unknown: break;
  }
  throw DataError("unrecognized image format");
}

inline Image read_image(const std::filesystem::path& path) {
  try {
    return decode_image(detail::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline Image read_mask(const std::filesystem::path& path) {
  auto bytes = detail::read_file(path);
  if (sniff_format(bytes) != ImageFormat::png) throw DataError(path.string() + ": mask must be PNG");
  Image m = decode_png(bytes, 1);
  for (auto& v : m.pixels) v = v >= 128 ? 1 : 0;
  return m;
}

// Writes a 0/1 mask as a 0/255 grayscale PNG.
inline void write_mask(const Image& mask, const std::filesystem::path& path) {
  Image g = mask;
  for (auto& v : g.pixels) v = v ? 255 : 0;
  detail::write_file(path, encode_png(g));
}

inline void write_png(const Image& image, const std::filesystem::path& path) {
  detail::write_file(path, encode_png(image));
}

// Source coordinate for destination index `d` with half-pixel centers.
inline double resample_coord(std::size_t d, double scale) {
  return (static_cast<double>(d) + 0.5) * scale - 0.5;
}

struct BilinearTap {
  std::size_t i0, i1;
  double t;  // weight of i1
};

inline BilinearTap bilinear_tap(std::size_t d, std::size_t src_extent, std::size_t dst_extent) {
  const double scale = static_cast<double>(src_extent) / static_cast<double>(dst_extent);
  double s = std::clamp(resample_coord(d, scale), 0.0, static_cast<double>(src_extent - 1));
  const auto i0 = static_cast<std::size_t>(std::floor(s));
  const std::size_t i1 = std::min(i0 + 1, src_extent - 1);
  return {i0, i1, s - static_cast<double>(i0)};
}

// Bilinear resample of the sub-rectangle (x0, y0, w, h) of `src`.
inline Image resize_bilinear(const Image& src, std::size_t x0, std::size_t y0, std::size_t w,
                             std::size_t h, std::size_t out_w, std::size_t out_h) {
  if (w == 0 || h == 0 || x0 + w > src.width || y0 + h > src.height) {
    throw DataError("resize: crop rectangle outside image");
  }
  if (w == out_w && h == out_h) {
    Image out(out_w, out_h, src.channels);
    for (std::size_t y = 0; y < h; ++y) {
      const auto* row = &src.pixels[((y0 + y) * src.width + x0) * src.channels];
      std::copy(row, row + w * src.channels, &out.pixels[y * w * src.channels]);
    }
    return out;
  }
  Image out(out_w, out_h, src.channels);
  std::vector<BilinearTap> xs(out_w);
  for (std::size_t x = 0; x < out_w; ++x) xs[x] = bilinear_tap(x, w, out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto ty = bilinear_tap(y, h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& tx = xs[x];
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double a = src.at(x0 + tx.i0, y0 + ty.i0, c), b = src.at(x0 + tx.i1, y0 + ty.i0, c);
        const double d = src.at(x0 + tx.i0, y0 + ty.i1, c), e = src.at(x0 + tx.i1, y0 + ty.i1, c);
        const double top = a + (b - a) * tx.t;
        const double bot = d + (e - d) * tx.t;
        const double v = top + (bot - top) * ty.t;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

// Nearest-neighbour resample of a sub-rectangle; keeps masks binary.
inline Image resize_nearest(const Image& src, std::size_t x0, std::size_t y0, std::size_t w,
                            std::size_t h, std::size_t out_w, std::size_t out_h) {
  if (w == 0 || h == 0 || x0 + w > src.width || y0 + h > src.height) {
    throw DataError("resize: crop rectangle outside image");
  }
  Image out(out_w, out_h, src.channels);
  const auto pick = [](std::size_t d, std::size_t src_extent, std::size_t dst_extent) {
    const auto s = static_cast<std::size_t>((static_cast<double>(d) + 0.5) *
                                            static_cast<double>(src_extent) /
                                            static_cast<double>(dst_extent));
    return std::min(s, src_extent - 1);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = y0 + pick(y, h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = x0 + pick(x, w, out_w);
      for (std::size_t c = 0; c < src.channels; ++c) out.at(x, y, c) = src.at(sx, sy, c);
    }
  }
  return out;
}

inline Image flip_horizontal(const Image& src) {
  Image out(src.width, src.height, src.channels);
  for (std::size_t y = 0; y < src.height; ++y)
    for (std::size_t x = 0; x < src.width; ++x)
      for (std::size_t c = 0; c < src.channels; ++c)
        out.at(src.width - 1 - x, y, c) = src.at(x, y, c);
  return out;
}

}  // namespace glaucad
