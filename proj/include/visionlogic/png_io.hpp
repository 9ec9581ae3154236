#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "visionlogic/error.hpp"
#include "visionlogic/image.hpp"

namespace visionlogic::png {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct Raw {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

[[nodiscard]] inline Raw read_raw(const std::filesystem::path& path, bool want_gray) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) fail(ErrorKind::MissingFile, path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(ErrorKind::IoError, "png_create_read_struct failed for " + path.string());
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(ErrorKind::IoError, "png_create_info_struct failed for " + path.string());
  }
  Raw raw;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::IoError, "cannot decode PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (want_gray) {
    if (color & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  } else if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);

  raw.width = static_cast<int>(png_get_image_width(png, info));
  raw.height = static_cast<int>(png_get_image_height(png, info));
  raw.channels = static_cast<int>(png_get_channels(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  raw.pixels.assign(stride * static_cast<std::size_t>(raw.height), 0);
  rows.resize(static_cast<std::size_t>(raw.height));
  for (int y = 0; y < raw.height; ++y) rows[static_cast<std::size_t>(y)] = raw.pixels.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

inline void write_raw(const std::filesystem::path& path, int width, int height, int channels,
                      const std::vector<std::uint8_t>& pixels) {
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) fail(ErrorKind::IoError, "cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(ErrorKind::IoError, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail(ErrorKind::IoError, "png_create_info_struct failed");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::IoError, "cannot encode PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_compression_level(png, 9);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  for (int y = 0; y < height; ++y)
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(pixels.data() + stride * y);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Reads an 8-bit RGB PNG into a [0,1] image (u8 / 255).
[[nodiscard]] inline Image read_rgb(const std::filesystem::path& path) {
  const auto raw = detail::read_raw(path, false);
  Image img(3, raw.height, raw.width);
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) =
            static_cast<float>(raw.pixels[(static_cast<std::size_t>(y) * raw.width + x) * 3 + c]) / 255.0f;
  return img;
}

/// Reads a grayscale PNG mask; values >= 128 are foreground.
[[nodiscard]] inline Mask read_mask(const std::filesystem::path& path) {
  const auto raw = detail::read_raw(path, true);
  Mask m{raw.height, raw.width, std::vector<std::uint8_t>(static_cast<std::size_t>(raw.width) * raw.height)};
  for (std::size_t i = 0; i < m.fg.size(); ++i) m.fg[i] = raw.pixels[i] >= 128 ? 1 : 0;
  return m;
}

/// Returns (width, height) from the PNG header without decoding pixels.
[[nodiscard]] inline std::pair<int, int> read_size(const std::filesystem::path& path) {
  FILE* f = std::fopen(path.string().c_str(), "rb");
  if (!f) fail(ErrorKind::MissingFile, path.string());
  detail::FilePtr fp(f);
  unsigned char hdr[24];
  if (std::fread(hdr, 1, sizeof hdr, f) != sizeof hdr || png_sig_cmp(hdr, 0, 8) != 0)
    fail(ErrorKind::IoError, "not a PNG file: " + path.string());
  auto be32 = [&](int off) {
    return (static_cast<std::uint32_t>(hdr[off]) << 24) | (static_cast<std::uint32_t>(hdr[off + 1]) << 16) |
           (static_cast<std::uint32_t>(hdr[off + 2]) << 8) | static_cast<std::uint32_t>(hdr[off + 3]);
  };
  return {static_cast<int>(be32(16)), static_cast<int>(be32(20))};
}

inline void write_rgb(const std::filesystem::path& path, const Image& img) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(img.w) * img.h * 3);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c)
        px[(static_cast<std::size_t>(y) * img.w + x) * 3 + c] = to_u8(img.at(c, y, x));
  detail::write_raw(path, img.w, img.h, 3, px);
}

inline void write_mask(const std::filesystem::path& path, const Mask& m) {
  std::vector<std::uint8_t> px(m.fg.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = m.fg[i] ? 255 : 0;
  detail::write_raw(path, m.w, m.h, 1, px);
}

}  // namespace visionlogic::png
