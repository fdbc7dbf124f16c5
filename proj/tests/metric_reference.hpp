#pragma once

// Brute-force metric oracles: trimap labels by direct window scan, the
// gradient metric by explicit 2-D filtering, and connectivity with
// union-find components.

#include "maggie/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace maggie::reference {

/// Label of pixel (y, x) in plane (t, i) of gt for a square window of radius r.
inline metrics::Region trimap_label(const TensorD& gt, Index t, Index i, Index y, Index x, Index r) {
  const Index h = gt.dim(2), w = gt.dim(3);
  bool unknown = false;
  for (Index yy = std::max<Index>(0, y - r); yy <= std::min<Index>(h - 1, y + r); ++yy)
    for (Index xx = std::max<Index>(0, x - r); xx <= std::min<Index>(w - 1, x + r); ++xx)
      unknown |= gt(t, i, yy, xx) > 0 && gt(t, i, yy, xx) < 1;
  if (unknown) return metrics::Region::Unknown;
  return gt(t, i, y, x) == 1 ? metrics::Region::Foreground : metrics::Region::Background;
}

/// Mean squared difference of Gaussian-derivative magnitudes over a single
/// [1, 1, h, w] pair, unscaled, with a (2·half + 1)² kernel. Edge pixels are
/// replicated.
inline double grad_metric(const TensorD& pred, const TensorD& gt, double sigma, Index half) {
  const Index h = gt.dim(2), w = gt.dim(3);
  const Index side = 2 * half + 1;
  std::vector<double> k(static_cast<std::size_t>(side * side));
  double norm = 0;
  for (Index i = 0; i < side; ++i)
    for (Index j = 0; j < side; ++j) {
      const double yi = static_cast<double>(i - half), xj = static_cast<double>(j - half);
      const double v = std::exp(-yi * yi / (2 * sigma * sigma)) * (-xj) * std::exp(-xj * xj / (2 * sigma * sigma));
      k[static_cast<std::size_t>(i * side + j)] = v;
      norm += v * v;
    }
  auto magnitude = [&](const TensorD& a, Index y, Index x) {
    double gx = 0, gy = 0;
    for (Index i = 0; i < side; ++i)
      for (Index j = 0; j < side; ++j) {
        const double v = a(0, 0, std::clamp<Index>(y + half - i, 0, h - 1), std::clamp<Index>(x + half - j, 0, w - 1));
        gx += k[static_cast<std::size_t>(i * side + j)] * v;
        gy += k[static_cast<std::size_t>(j * side + i)] * v;
      }
    return std::hypot(gx, gy) / std::sqrt(norm);
  };
  double sum = 0;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) sum += std::pow(magnitude(pred, y, x) - magnitude(gt, y, x), 2);
  return sum / static_cast<double>(h * w);
}

/// Connectivity error sum for one h×w plane. Ties between equally large
/// components go to the one whose first pixel comes first in scan order.
inline double connectivity(const double* pred, const double* gt, Index h, Index w, double step) {
  const Index n = h * w;
  std::vector<double> level(static_cast<std::size_t>(n), 1.0);
  std::vector<bool> settled(static_cast<std::size_t>(n), false);
  for (int k = 1; k <= static_cast<int>(std::round(1.0 / step)); ++k) {
    const double th = k * step;
    std::vector<Index> parent(static_cast<std::size_t>(n));
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](Index a) {
      while (parent[static_cast<std::size_t>(a)] != a) a = parent[static_cast<std::size_t>(a)];
      return a;
    };
    auto on = [&](Index j) { return pred[j] >= th && gt[j] >= th; };
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const Index j = y * w + x;
        if (!on(j)) continue;
        if (x + 1 < w && on(j + 1)) parent[static_cast<std::size_t>(find(j + 1))] = find(j);
        if (y + 1 < h && on(j + w)) parent[static_cast<std::size_t>(find(j + w))] = find(j);
      }
    std::vector<Index> size(static_cast<std::size_t>(n), 0);
    Index best = -1, best_size = 0;
    for (Index j = 0; j < n; ++j)
      if (on(j)) ++size[static_cast<std::size_t>(find(j))];
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    for (Index j = 0; j < n; ++j) {
      if (!on(j)) continue;
      const Index r = find(j);
      if (seen[static_cast<std::size_t>(r)]) continue;
      seen[static_cast<std::size_t>(r)] = true;
      if (size[static_cast<std::size_t>(r)] > best_size) {
        best = r;
        best_size = size[static_cast<std::size_t>(r)];
      }
    }
    for (Index j = 0; j < n; ++j) {
      const bool in = on(j) && find(j) == best;
      if (!in && !settled[static_cast<std::size_t>(j)]) {
        level[static_cast<std::size_t>(j)] = (k - 1) * step;
        settled[static_cast<std::size_t>(j)] = true;
      }
    }
  }
  double sum = 0;
  for (Index j = 0; j < n; ++j) {
    const double l = level[static_cast<std::size_t>(j)];
    auto phi = [&](double v) { return 1.0 - (v - l >= 0.15 ? v - l : 0.0); };
    sum += std::abs(phi(pred[j]) - phi(gt[j]));
  }
  return sum;
}

}  // namespace maggie::reference
