#pragma once

// Plane filters shared by the losses and the metrics: the 5-tap Gaussian
// Laplacian pyramid and first-order Gaussian-derivative gradients. Each
// linear operator comes with its adjoint for backpropagation.

#include "maggie/tensor.hpp"

#include <array>
#include <cmath>
#include <vector>

namespace maggie::filters {

/// Reflect-101 index into [0, n) (…, 2, 1, 0, 1, 2, …).
inline Index reflect101(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

inline Index clamp_index(Index i, Index n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

inline constexpr std::array<double, 5> kBinomial5{1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

/// Separable [1 4 6 4 1]/16 blur with reflect-101 borders.
template <typename Scalar>
std::vector<Scalar> blur5(const std::vector<Scalar>& in, Index h, Index w) {
  std::vector<Scalar> tmp(in.size()), out(in.size());
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double s = 0;
      for (Index k = 0; k < 5; ++k) s += kBinomial5[k] * static_cast<double>(in[y * w + reflect101(x + k - 2, w)]);
      tmp[y * w + x] = static_cast<Scalar>(s);
    }
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double s = 0;
      for (Index k = 0; k < 5; ++k) s += kBinomial5[k] * static_cast<double>(tmp[reflect101(y + k - 2, h) * w + x]);
      out[y * w + x] = static_cast<Scalar>(s);
    }
  return out;
}

template <typename Scalar>
std::vector<Scalar> blur5_adjoint(const std::vector<Scalar>& g, Index h, Index w) {
  std::vector<Scalar> tmp(g.size(), Scalar(0)), out(g.size(), Scalar(0));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index k = 0; k < 5; ++k)
        tmp[reflect101(y + k - 2, h) * w + x] += static_cast<Scalar>(kBinomial5[k]) * g[y * w + x];
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index k = 0; k < 5; ++k)
        out[y * w + reflect101(x + k - 2, w)] += static_cast<Scalar>(kBinomial5[k]) * tmp[y * w + x];
  return out;
}

inline Index half_up(Index n) { return (n + 1) / 2; }

template <typename Scalar>
std::vector<Scalar> take_even(const std::vector<Scalar>& in, Index h, Index w) {
  const Index h2 = half_up(h), w2 = half_up(w);
  std::vector<Scalar> out(static_cast<std::size_t>(h2 * w2));
  for (Index y = 0; y < h2; ++y)
    for (Index x = 0; x < w2; ++x) out[y * w2 + x] = in[(2 * y) * w + 2 * x];
  return out;
}

template <typename Scalar>
std::vector<Scalar> zero_insert(const std::vector<Scalar>& in, Index h2, Index w2, Index h, Index w) {
  std::vector<Scalar> out(static_cast<std::size_t>(h * w), Scalar(0));
  for (Index y = 0; y < h2; ++y)
    for (Index x = 0; x < w2; ++x) out[(2 * y) * w + 2 * x] = in[y * w2 + x];
  return out;
}

/// Pyramid downsample: blur then keep even pixels.
template <typename Scalar>
std::vector<Scalar> pyr_down(const std::vector<Scalar>& in, Index h, Index w) {
  return take_even(blur5(in, h, w), h, w);
}

template <typename Scalar>
std::vector<Scalar> pyr_down_adjoint(const std::vector<Scalar>& g, Index h, Index w) {
  return blur5_adjoint(zero_insert(g, half_up(h), half_up(w), h, w), h, w);
}

/// Pyramid upsample to h×w: zero insertion then 4× blur.
template <typename Scalar>
std::vector<Scalar> pyr_up(const std::vector<Scalar>& in, Index h, Index w) {
  auto out = blur5(zero_insert(in, half_up(h), half_up(w), h, w), h, w);
  for (auto& v : out) v *= Scalar(4);
  return out;
}

template <typename Scalar>
std::vector<Scalar> pyr_up_adjoint(const std::vector<Scalar>& g, Index h, Index w) {
  auto b = blur5_adjoint(g, h, w);
  auto out = take_even(b, h, w);
  for (auto& v : out) v *= Scalar(4);
  return out;
}

struct Level {
  Index h, w;
};

inline std::vector<Level> pyramid_levels(Index h, Index w, int levels) {
  std::vector<Level> out{{h, w}};
  for (int k = 1; k < levels; ++k) out.push_back({half_up(out.back().h), half_up(out.back().w)});
  return out;
}

/// Laplacian bands of one plane: levels−1 detail bands then the residual.
template <typename Scalar>
std::vector<std::vector<Scalar>> laplacian_pyramid(const std::vector<Scalar>& plane, Index h, Index w, int levels) {
  const auto dims = pyramid_levels(h, w, levels);
  std::vector<std::vector<Scalar>> bands;
  std::vector<Scalar> cur = plane;
  for (int k = 0; k + 1 < levels; ++k) {
    auto down = pyr_down(cur, dims[k].h, dims[k].w);
    auto up = pyr_up(down, dims[k].h, dims[k].w);
    for (std::size_t j = 0; j < cur.size(); ++j) cur[j] -= up[j];
    bands.push_back(std::move(cur));
    cur = std::move(down);
  }
  bands.push_back(std::move(cur));
  return bands;
}

/// Adjoint of laplacian_pyramid: maps per-band cotangents to the plane.
template <typename Scalar>
std::vector<Scalar> laplacian_pyramid_adjoint(const std::vector<std::vector<Scalar>>& g, Index h, Index w,
                                              int levels) {
  const auto dims = pyramid_levels(h, w, levels);
  std::vector<Scalar> acc = g[static_cast<std::size_t>(levels - 1)];
  for (int k = levels - 2; k >= 0; --k) {
    const auto& gk = g[static_cast<std::size_t>(k)];
    auto up_adj = pyr_up_adjoint(gk, dims[k].h, dims[k].w);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] -= up_adj[j];
    auto back = pyr_down_adjoint(acc, dims[k].h, dims[k].w);
    for (std::size_t j = 0; j < back.size(); ++j) back[j] += gk[j];
    acc = std::move(back);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Gaussian-derivative gradients

struct GradientKernel {
  Index half = 0;
  std::vector<double> hx;  // (2·half+1)², row-major [y][x]; hy = hxᵀ
  Index side() const { return 2 * half + 1; }
};

/// hx(y, x) = g(y) g'(x), normalised to unit L2 norm; support from the
/// 1% amplitude cut-off.
inline GradientKernel gradient_kernel(double sigma = 1.4) {
  constexpr double kPi = 3.14159265358979323846;
  const double eps = 1e-2;
  GradientKernel k;
  k.half = static_cast<Index>(std::ceil(sigma * std::sqrt(-2.0 * std::log(std::sqrt(2.0 * kPi) * sigma * eps))));
  const Index n = k.side();
  auto gauss = [&](double x) { return std::exp(-x * x / (2 * sigma * sigma)) / (sigma * std::sqrt(2 * kPi)); };
  auto dgauss = [&](double x) { return -x * gauss(x) / (sigma * sigma); };
  k.hx.resize(static_cast<std::size_t>(n * n));
  double norm = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      const double v = gauss(static_cast<double>(i - k.half)) * dgauss(static_cast<double>(j - k.half));
      k.hx[static_cast<std::size_t>(i * n + j)] = v;
      norm += v * v;
    }
  norm = std::sqrt(norm);
  for (auto& v : k.hx) v /= norm;
  return k;
}

/// True convolution with replicate borders:
/// gx(y, x) = Σ hx(i, j) · in(y + half − i, x + half − j), gy likewise with hxᵀ.
template <typename Scalar>
void gaussian_gradient(const Scalar* in, Index h, Index w, const GradientKernel& k, double* gx, double* gy) {
  const Index n = k.side();
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double sx = 0, sy = 0;
      for (Index i = 0; i < n; ++i) {
        const Index yy = clamp_index(y + k.half - i, h);
        for (Index j = 0; j < n; ++j) {
          const double v = static_cast<double>(in[yy * w + clamp_index(x + k.half - j, w)]);
          sx += k.hx[static_cast<std::size_t>(i * n + j)] * v;
          sy += k.hx[static_cast<std::size_t>(j * n + i)] * v;
        }
      }
      gx[y * w + x] = sx;
      gy[y * w + x] = sy;
    }
}

/// Adjoint of gaussian_gradient: accumulates hxᵀ-convolved cotangents.
template <typename Scalar>
void gaussian_gradient_adjoint(const double* cx, const double* cy, Index h, Index w, const GradientKernel& k,
                               Scalar* out) {
  const Index n = k.side();
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double ax = cx[y * w + x], ay = cy[y * w + x];
      if (ax == 0 && ay == 0) continue;
      for (Index i = 0; i < n; ++i) {
        const Index yy = clamp_index(y + k.half - i, h);
        for (Index j = 0; j < n; ++j) {
          const Index xx = clamp_index(x + k.half - j, w);
          out[yy * w + xx] += static_cast<Scalar>(k.hx[static_cast<std::size_t>(i * n + j)] * ax +
                                                  k.hx[static_cast<std::size_t>(j * n + i)] * ay);
        }
      }
    }
}

/// |∇| per pixel of an h×w plane.
template <typename Scalar>
std::vector<double> gradient_magnitude(const Scalar* in, Index h, Index w, const GradientKernel& k) {
  std::vector<double> gx(static_cast<std::size_t>(h * w)), gy(gx.size()), m(gx.size());
  gaussian_gradient(in, h, w, k, gx.data(), gy.data());
  for (std::size_t p = 0; p < m.size(); ++p) m[p] = std::sqrt(gx[p] * gx[p] + gy[p] * gy[p]);
  return m;
}

}  // namespace maggie::filters
