#pragma once

// PNG reading and writing (8/16-bit gray and RGB) via libpng.

#include "maggie/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace maggie::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Interleaved samples, row-major; 8-bit images store values 0..255.
struct Image {
  Index width = 0, height = 0, channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

/// [3, H, W] in [0, 1]; gray inputs are replicated, alpha channels dropped.
TensorD read_rgb(const std::filesystem::path& path);
/// [H, W] in [0, 1] from the first channel.
TensorD read_gray(const std::filesystem::path& path);

/// rgb: pointer to a [3, H, W] block in [0, 1].
void write_rgb8(const std::filesystem::path& path, const double* rgb, Index h, Index w);
/// Quantises [0, 1] to 0..65535.
void write_gray16(const std::filesystem::path& path, const double* plane, Index h, Index w);
/// Binary plane written as 0 / 255.
void write_mask8(const std::filesystem::path& path, const std::uint8_t* plane, Index h, Index w);

std::uint16_t quantize16(double v);

}  // namespace maggie::io
