#pragma once

// Binary morphology on row-major uint8 planes with square structuring elements.

#include "maggie/tensor.hpp"

#include <cstdint>
#include <vector>

namespace maggie::morph {

namespace detail {

// out(y, x) = op over in(y + dy, x + dx), dy, dx in [-before, after]; out-of-range samples ignored.
template <bool IsMax>
void square_filter(const std::uint8_t* in, Index h, Index w, Index before, Index after, std::uint8_t* out) {
  std::vector<std::uint8_t> tmp(static_cast<std::size_t>(h * w));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      std::uint8_t v = IsMax ? 0 : 1;
      for (Index d = -before; d <= after; ++d) {
        const Index xx = x + d;
        if (xx < 0 || xx >= w) continue;
        v = IsMax ? std::max(v, in[y * w + xx]) : std::min(v, in[y * w + xx]);
      }
      tmp[static_cast<std::size_t>(y * w + x)] = v;
    }
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      std::uint8_t v = IsMax ? 0 : 1;
      for (Index d = -before; d <= after; ++d) {
        const Index yy = y + d;
        if (yy < 0 || yy >= h) continue;
        v = IsMax ? std::max(v, tmp[static_cast<std::size_t>(yy * w + x)])
                  : std::min(v, tmp[static_cast<std::size_t>(yy * w + x)]);
      }
      out[y * w + x] = v;
    }
}

}  // namespace detail

/// Dilation with a side x side square. Even sides extend one pixel further
/// toward negative offsets (anchor at side/2).
inline void dilate(const std::uint8_t* in, Index h, Index w, Index side, std::uint8_t* out) {
  require(side >= 1, "dilation kernel side must be >= 1");
  detail::square_filter<true>(in, h, w, side / 2, (side - 1) / 2, out);
}

inline void erode(const std::uint8_t* in, Index h, Index w, Index side, std::uint8_t* out) {
  require(side >= 1, "erosion kernel side must be >= 1");
  detail::square_filter<false>(in, h, w, side / 2, (side - 1) / 2, out);
}

/// Dilation by a (2r+1)-square, r >= 0.
inline void dilate_radius(const std::uint8_t* in, Index h, Index w, Index radius, std::uint8_t* out) {
  require(radius >= 0, "dilation radius must be >= 0");
  detail::square_filter<true>(in, h, w, radius, radius, out);
}

inline std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& in, Index h, Index w, Index side) {
  std::vector<std::uint8_t> out(in.size());
  dilate(in.data(), h, w, side, out.data());
  return out;
}

inline std::vector<std::uint8_t> erode(const std::vector<std::uint8_t>& in, Index h, Index w, Index side) {
  std::vector<std::uint8_t> out(in.size());
  erode(in.data(), h, w, side, out.data());
  return out;
}

}  // namespace maggie::morph
