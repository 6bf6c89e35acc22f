#pragma once

#include <png.h>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "flip/error.hpp"

namespace flip {

// RGB image with interleaved float channels in [0, 1]. Pixel (x, y) covers
// the continuous square [x, x+1) x [y, y+1); its center is (x+0.5, y+0.5).
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int w, int h, float fill = 0.0f)
      : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

  float* at(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const float* at(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
};

// One inside/outside flag per pixel.
struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;

  BinaryMask() = default;
  BinaryMask(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0) {
    if (w < 1 || h < 1) throw Error("bad-dimensions", "mask must be at least 1x1");
  }

  bool get(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { values[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](auto v) { return v != 0; }));
  }
  bool operator==(const BinaryMask&) const = default;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw Error("io", "cannot open " + path);
  return f;
}

// Reads any PNG as 8-bit, expanding palette/gray and stripping alpha.
inline std::vector<std::uint8_t> read_png_raw(const std::string& path, int& width, int& height,
                                              int& channels) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("io", "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("io", "png_create_info_struct failed");
  }
  std::vector<std::uint8_t> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("io", "malformed PNG " + path);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * height);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = pixels.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

inline void write_png_raw(const std::string& path, const std::uint8_t* data, int width, int height,
                          int channels) {
  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("io", "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("io", "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("io", "failed writing PNG " + path);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(y) * width * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f);
}

}  // namespace detail

inline Image read_image_png(const std::string& path) {
  int w, h, c;
  auto raw = detail::read_png_raw(path, w, h, c);
  Image img(w, h);
  for (std::size_t i = 0; i < static_cast<std::size_t>(w) * h; ++i)
    for (int ch = 0; ch < 3; ++ch)
      img.rgb[i * 3 + ch] = raw[i * c + (c >= 3 ? ch : 0)] / 255.0f;
  return img;
}

inline void write_image_png(const std::string& path, const Image& img) {
  std::vector<std::uint8_t> raw(img.rgb.size());
  std::transform(img.rgb.begin(), img.rgb.end(), raw.begin(), detail::to_byte);
  detail::write_png_raw(path, raw.data(), img.width, img.height, 3);
}

// Single-channel 8-bit PNG; value >= 128 means inside.
inline BinaryMask read_mask_png(const std::string& path) {
  int w, h, c;
  auto raw = detail::read_png_raw(path, w, h, c);
  BinaryMask m(w, h);
  for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = raw[i * c] >= 128 ? 1 : 0;
  return m;
}

inline void write_mask_png(const std::string& path, const BinaryMask& mask) {
  std::vector<std::uint8_t> raw(mask.values.size());
  std::transform(mask.values.begin(), mask.values.end(), raw.begin(),
                 [](std::uint8_t v) -> std::uint8_t { return v ? 255 : 0; });
  detail::write_png_raw(path, raw.data(), mask.width, mask.height, 1);
}

}  // namespace flip
