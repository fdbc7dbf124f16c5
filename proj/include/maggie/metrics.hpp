#pragma once

// Matting evaluation metrics. All inputs are [T, N, H, W] alpha sequences in
// double precision; every metric is computed per instance and then averaged.

#include "maggie/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace maggie::metrics {

/// Reporting multipliers applied to the raw metric values.
struct Scales {
  double mad = 1e3;
  double mse = 1e3;
  double sad = 1e-3;
  double grad = 1e3;
  double conn = 1e-3;
  double dtssd = 1e2;
  double messddt = 1e3;
};

enum class Region : std::uint8_t { Background = 0, Unknown = 1, Foreground = 2 };

/// Per-pixel trimap labels [T, N, H, W] holding Region values.
struct TrimapSet {
  Tensor<std::uint8_t> labels;
  Index count(Index t, Index i, Region r) const;
};

/// unknown = dilate({0 < gt < 1}, radius); foreground = {gt = 1} \ unknown.
TrimapSet estimate_trimap(const TensorD& gt, Index dilate_px = 15);

struct MetricValue {
  std::vector<double> per_instance;
  double mean = 0;
  std::vector<bool> empty;  // region metrics only: instance had no pixels in the region
};

MetricValue mad(const TensorD& pred, const TensorD& gt, const Scales& s = {});
MetricValue mse(const TensorD& pred, const TensorD& gt, const Scales& s = {});
MetricValue sad(const TensorD& pred, const TensorD& gt, const Scales& s = {});

/// Region-restricted variants, pooling the region's pixels across frames.
MetricValue mad(const TensorD& pred, const TensorD& gt, const TrimapSet& trimap, Region region, const Scales& s = {});
MetricValue mse(const TensorD& pred, const TensorD& gt, const TrimapSet& trimap, Region region, const Scales& s = {});

/// Σ(|∇pred| − |∇gt|)² / #pixels with Gaussian-derivative gradients.
MetricValue grad_metric(const TensorD& pred, const TensorD& gt, double sigma = 1.4, const Scales& s = {});

/// Threshold-sweep connectivity error (4-connected largest component).
MetricValue conn_metric(const TensorD& pred, const TensorD& gt, double step = 0.1, const Scales& s = {});

/// Per frame pair sqrt(mean(((p_t − p_{t−1}) − (g_t − g_{t−1}))²)), averaged over pairs.
MetricValue dtssd_metric(const TensorD& pred, const TensorD& gt, const Scales& s = {});

/// mean over pixels and pairs of (E_t − E_{t−1})², E = (p − g)². No motion compensation.
MetricValue messddt_metric(const TensorD& pred, const TensorD& gt, const Scales& s = {});

/// Single-plane connectivity error sum for h×w planes (raw, unscaled).
double connectivity_error(const double* pred, const double* gt, Index h, Index w, double step);

struct EvalOptions {
  Scales scales;
  Index trimap_dilate = 15;
  double grad_sigma = 1.4;
  double conn_step = 0.1;
};

using MetricReport = std::map<std::string, MetricValue>;

/// Full suite; temporal metrics are included when T ≥ 2.
MetricReport evaluate(const TensorD& pred, const TensorD& gt, const EvalOptions& opt = {});

nlohmann::json to_json(const MetricReport& report);
MetricReport from_json(const nlohmann::json& j);

/// Aggregates reports from several videos: per_instance concatenates, mean
/// averages all instance values.
MetricReport aggregate(const std::vector<MetricReport>& reports);

}  // namespace maggie::metrics
