#include "maggie/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace maggie::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw IoError(msg); }
void png_warn(png_structp, png_const_charp) {}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw IoError("not a PNG: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  Image img;
  try {
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (depth == 16) png_set_swap(png);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = png_get_channels(png, info);
    img.bit_depth = png_get_bit_depth(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<png_byte> buf(rowbytes * static_cast<std::size_t>(img.height));
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (Index y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + rowbytes * static_cast<std::size_t>(y);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    const std::size_t n = static_cast<std::size_t>(img.width * img.height * img.channels);
    img.samples.resize(n);
    if (img.bit_depth == 16) {
      for (std::size_t k = 0; k < n; ++k) {
        std::uint16_t v;
        std::memcpy(&v, buf.data() + 2 * k, 2);
        img.samples[k] = v;
      }
    } else {
      for (std::size_t k = 0; k < n; ++k) img.samples[k] = buf[k];
    }
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  require(img.channels == 1 || img.channels == 3, "write_png: 1 or 3 channels supported");
  require(img.bit_depth == 8 || img.bit_depth == 16, "write_png: bit depth must be 8 or 16");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  try {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), img.bit_depth,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (img.bit_depth == 16) png_set_swap(png);
    const std::size_t bytes = img.bit_depth == 16 ? 2 : 1;
    const std::size_t rowlen = static_cast<std::size_t>(img.width * img.channels);
    std::vector<png_byte> row(rowlen * bytes);
    for (Index y = 0; y < img.height; ++y) {
      const std::uint16_t* src = img.samples.data() + static_cast<std::size_t>(y) * rowlen;
      if (bytes == 2)
        std::memcpy(row.data(), src, rowlen * 2);
      else
        for (std::size_t k = 0; k < rowlen; ++k) row[k] = static_cast<png_byte>(src[k]);
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

TensorD read_rgb(const std::filesystem::path& path) {
  const Image img = read_png(path);
  const double maxv = img.bit_depth == 16 ? 65535.0 : 255.0;
  TensorD out({3, img.height, img.width});
  const bool gray = img.channels < 3;
  for (Index y = 0; y < img.height; ++y)
    for (Index x = 0; x < img.width; ++x)
      for (Index c = 0; c < 3; ++c) {
        const Index src = (y * img.width + x) * img.channels + (gray ? 0 : c);
        out(c, y, x) = img.samples[static_cast<std::size_t>(src)] / maxv;
      }
  return out;
}

TensorD read_gray(const std::filesystem::path& path) {
  const Image img = read_png(path);
  const double maxv = img.bit_depth == 16 ? 65535.0 : 255.0;
  TensorD out({img.height, img.width});
  for (Index k = 0; k < img.height * img.width; ++k)
    out[k] = img.samples[static_cast<std::size_t>(k * img.channels)] / maxv;
  return out;
}

std::uint16_t quantize16(double v) {
  return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
}

void write_rgb8(const std::filesystem::path& path, const double* rgb, Index h, Index w) {
  Image img{w, h, 3, 8, std::vector<std::uint16_t>(static_cast<std::size_t>(3 * h * w))};
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c)
        img.samples[static_cast<std::size_t>((y * w + x) * 3 + c)] =
            static_cast<std::uint16_t>(std::lround(std::clamp(rgb[(c * h + y) * w + x], 0.0, 1.0) * 255.0));
  write_png(path, img);
}

void write_gray16(const std::filesystem::path& path, const double* plane, Index h, Index w) {
  Image img{w, h, 1, 16, std::vector<std::uint16_t>(static_cast<std::size_t>(h * w))};
  for (Index k = 0; k < h * w; ++k) img.samples[static_cast<std::size_t>(k)] = quantize16(plane[k]);
  write_png(path, img);
}

void write_mask8(const std::filesystem::path& path, const std::uint8_t* plane, Index h, Index w) {
  Image img{w, h, 1, 8, std::vector<std::uint16_t>(static_cast<std::size_t>(h * w))};
  for (Index k = 0; k < h * w; ++k) img.samples[static_cast<std::size_t>(k)] = plane[k] ? 255 : 0;
  write_png(path, img);
}

}  // namespace maggie::io
