#include "maggie/metrics.hpp"

#include "maggie/filters.hpp"
#include "maggie/morphology.hpp"

#include <cmath>
#include <numeric>
#include <queue>

namespace maggie::metrics {

namespace {

void check_pair(const TensorD& pred, const TensorD& gt) {
  require(pred.rank() == 4 && pred.shape() == gt.shape(),
          "metric inputs must share one [T,N,H,W] shape: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
}

MetricValue finish(std::vector<double> values) {
  MetricValue m;
  m.mean = values.empty() ? 0.0 : std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  m.per_instance = std::move(values);
  return m;
}

// Per-instance mean of f(p, g) over every pixel of every frame.
template <typename F>
MetricValue pooled_mean(const TensorD& pred, const TensorD& gt, double scale, F f) {
  check_pair(pred, gt);
  const Index frames = gt.dim(0), n = gt.dim(1), hw = gt.dim(2) * gt.dim(3);
  std::vector<double> out;
  for (Index i = 0; i < n; ++i) {
    double s = 0;
    for (Index t = 0; t < frames; ++t) {
      const double* p = pred.plane(t, i);
      const double* g = gt.plane(t, i);
      for (Index j = 0; j < hw; ++j) s += f(p[j], g[j]);
    }
    out.push_back(hw * frames != 0 ? s / static_cast<double>(hw * frames) * scale : 0.0);
  }
  return finish(std::move(out));
}

template <typename F>
MetricValue region_mean(const TensorD& pred, const TensorD& gt, const TrimapSet& tri, Region region, double scale,
                        F f) {
  check_pair(pred, gt);
  require(tri.labels.shape() == gt.shape(), "trimap shape mismatch");
  const Index frames = gt.dim(0), n = gt.dim(1), hw = gt.dim(2) * gt.dim(3);
  std::vector<double> out;
  std::vector<bool> empty;
  for (Index i = 0; i < n; ++i) {
    double s = 0;
    Index count = 0;
    for (Index t = 0; t < frames; ++t) {
      const double* p = pred.plane(t, i);
      const double* g = gt.plane(t, i);
      const std::uint8_t* l = tri.labels.plane(t, i);
      for (Index j = 0; j < hw; ++j)
        if (l[j] == static_cast<std::uint8_t>(region)) {
          s += f(p[j], g[j]);
          ++count;
        }
    }
    out.push_back(count ? s / static_cast<double>(count) * scale : 0.0);
    empty.push_back(count == 0);
  }
  auto m = finish(std::move(out));
  m.empty = std::move(empty);
  return m;
}

double abs_diff(double p, double g) { return std::abs(p - g); }
double sq_diff(double p, double g) { return (p - g) * (p - g); }

}  // namespace

Index TrimapSet::count(Index t, Index i, Region r) const {
  const Index hw = labels.dim(2) * labels.dim(3);
  const std::uint8_t* l = labels.plane(t, i);
  return std::count(l, l + hw, static_cast<std::uint8_t>(r));
}

TrimapSet estimate_trimap(const TensorD& gt, Index dilate_px) {
  require(gt.rank() == 4, "estimate_trimap: expected [T,N,H,W]");
  const Index h = gt.dim(2), w = gt.dim(3), hw = h * w;
  TrimapSet tri{Tensor<std::uint8_t>(gt.shape())};
  std::vector<std::uint8_t> soft(static_cast<std::size_t>(hw)), unknown(soft.size());
  for (Index t = 0; t < gt.dim(0); ++t)
    for (Index i = 0; i < gt.dim(1); ++i) {
      const double* g = gt.plane(t, i);
      for (Index j = 0; j < hw; ++j) soft[static_cast<std::size_t>(j)] = (g[j] > 0.0 && g[j] < 1.0) ? 1 : 0;
      morph::dilate_radius(soft.data(), h, w, dilate_px, unknown.data());
      std::uint8_t* l = tri.labels.plane(t, i);
      for (Index j = 0; j < hw; ++j) {
        if (unknown[static_cast<std::size_t>(j)])
          l[j] = static_cast<std::uint8_t>(Region::Unknown);
        else if (g[j] == 1.0)
          l[j] = static_cast<std::uint8_t>(Region::Foreground);
        else
          l[j] = static_cast<std::uint8_t>(Region::Background);
      }
    }
  return tri;
}

MetricValue mad(const TensorD& pred, const TensorD& gt, const Scales& s) {
  return pooled_mean(pred, gt, s.mad, abs_diff);
}

MetricValue mse(const TensorD& pred, const TensorD& gt, const Scales& s) {
  return pooled_mean(pred, gt, s.mse, sq_diff);
}

MetricValue mad(const TensorD& pred, const TensorD& gt, const TrimapSet& trimap, Region region, const Scales& s) {
  return region_mean(pred, gt, trimap, region, s.mad, abs_diff);
}

MetricValue mse(const TensorD& pred, const TensorD& gt, const TrimapSet& trimap, Region region, const Scales& s) {
  return region_mean(pred, gt, trimap, region, s.mse, sq_diff);
}

MetricValue sad(const TensorD& pred, const TensorD& gt, const Scales& s) {
  check_pair(pred, gt);
  const Index frames = gt.dim(0), n = gt.dim(1), hw = gt.dim(2) * gt.dim(3);
  std::vector<double> out;
  for (Index i = 0; i < n; ++i) {
    double total = 0;
    for (Index t = 0; t < frames; ++t) {
      const double* p = pred.plane(t, i);
      const double* g = gt.plane(t, i);
      double sum = 0;
      for (Index j = 0; j < hw; ++j) sum += std::abs(p[j] - g[j]);
      total += sum * s.sad;
    }
    out.push_back(frames ? total / static_cast<double>(frames) : 0.0);
  }
  return finish(std::move(out));
}

MetricValue grad_metric(const TensorD& pred, const TensorD& gt, double sigma, const Scales& s) {
  check_pair(pred, gt);
  const Index frames = gt.dim(0), n = gt.dim(1), h = gt.dim(2), w = gt.dim(3), hw = h * w;
  const auto kernel = filters::gradient_kernel(sigma);
  std::vector<double> out;
  for (Index i = 0; i < n; ++i) {
    double sum = 0;
    for (Index t = 0; t < frames; ++t) {
      auto mp = filters::gradient_magnitude(pred.plane(t, i), h, w, kernel);
      auto mg = filters::gradient_magnitude(gt.plane(t, i), h, w, kernel);
      for (Index j = 0; j < hw; ++j) sum += std::pow(mp[static_cast<std::size_t>(j)] - mg[static_cast<std::size_t>(j)], 2);
    }
    out.push_back(hw * frames != 0 ? sum / static_cast<double>(hw * frames) * s.grad : 0.0);
  }
  return finish(std::move(out));
}

namespace {

// Largest 4-connected component of a binary plane, as a 0/1 mask.
std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& mask, Index h, Index w) {
  std::vector<std::int32_t> label(mask.size(), -1);
  std::vector<std::uint8_t> best(mask.size(), 0);
  std::int32_t next = 0, best_label = -1;
  Index best_size = 0;
  std::vector<Index> stack;
  for (Index s = 0; s < h * w; ++s) {
    if (!mask[static_cast<std::size_t>(s)] || label[static_cast<std::size_t>(s)] >= 0) continue;
    Index size = 0;
    stack.assign(1, s);
    label[static_cast<std::size_t>(s)] = next;
    while (!stack.empty()) {
      const Index p = stack.back();
      stack.pop_back();
      ++size;
      const Index y = p / w, x = p % w;
      const Index nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
        const Index k = q[0] * w + q[1];
        if (mask[static_cast<std::size_t>(k)] && label[static_cast<std::size_t>(k)] < 0) {
          label[static_cast<std::size_t>(k)] = next;
          stack.push_back(k);
        }
      }
    }
    // Ties keep the first component in scan order.
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
    ++next;
  }
  for (std::size_t k = 0; k < mask.size(); ++k) best[k] = label[k] == best_label && best_label >= 0;
  return best;
}

}  // namespace

double connectivity_error(const double* pred, const double* gt, Index h, Index w, double step) {
  require(step > 0 && step <= 1, "conn step must be in (0, 1]");
  const Index hw = h * w;
  const auto steps = static_cast<Index>(std::floor(1.0 / step + 1e-9));
  std::vector<double> l_map(static_cast<std::size_t>(hw), -1.0);
  std::vector<std::uint8_t> both(static_cast<std::size_t>(hw));
  for (Index k = 1; k <= steps; ++k) {
    const double thresh = static_cast<double>(k) * step;
    for (Index j = 0; j < hw; ++j) both[static_cast<std::size_t>(j)] = pred[j] >= thresh && gt[j] >= thresh;
    const auto omega = largest_component(both, h, w);
    for (Index j = 0; j < hw; ++j)
      if (l_map[static_cast<std::size_t>(j)] == -1.0 && !omega[static_cast<std::size_t>(j)])
        l_map[static_cast<std::size_t>(j)] = static_cast<double>(k - 1) * step;
  }
  double sum = 0;
  for (Index j = 0; j < hw; ++j) {
    const double l = l_map[static_cast<std::size_t>(j)] == -1.0 ? 1.0 : l_map[static_cast<std::size_t>(j)];
    const double pd = pred[j] - l, gd = gt[j] - l;
    const double pphi = 1.0 - (pd >= 0.15 ? pd : 0.0);
    const double gphi = 1.0 - (gd >= 0.15 ? gd : 0.0);
    sum += std::abs(pphi - gphi);
  }
  return sum;
}

MetricValue conn_metric(const TensorD& pred, const TensorD& gt, double step, const Scales& s) {
  check_pair(pred, gt);
  const Index frames = gt.dim(0), n = gt.dim(1), h = gt.dim(2), w = gt.dim(3);
  std::vector<double> out;
  for (Index i = 0; i < n; ++i) {
    double total = 0;
    for (Index t = 0; t < frames; ++t) total += connectivity_error(pred.plane(t, i), gt.plane(t, i), h, w, step) * s.conn;
    out.push_back(frames ? total / static_cast<double>(frames) : 0.0);
  }
  return finish(std::move(out));
}

MetricValue dtssd_metric(const TensorD& pred, const TensorD& gt, const Scales& s) {
  check_pair(pred, gt);
  const Index frames = gt.dim(0), n = gt.dim(1), hw = gt.dim(2) * gt.dim(3);
  require(frames >= 2, "dtSSD needs at least two frames");
  std::vector<double> out;
  for (Index i = 0; i < n; ++i) {
    double total = 0;
    for (Index t = 1; t < frames; ++t) {
      const double *p0 = pred.plane(t - 1, i), *p1 = pred.plane(t, i);
      const double *g0 = gt.plane(t - 1, i), *g1 = gt.plane(t, i);
      double ss = 0;
      for (Index j = 0; j < hw; ++j) ss += std::pow((p1[j] - p0[j]) - (g1[j] - g0[j]), 2);
      total += std::sqrt(ss / static_cast<double>(hw));
    }
    out.push_back(total / static_cast<double>(frames - 1) * s.dtssd);
  }
  return finish(std::move(out));
}

MetricValue messddt_metric(const TensorD& pred, const TensorD& gt, const Scales& s) {
  check_pair(pred, gt);
  const Index frames = gt.dim(0), n = gt.dim(1), hw = gt.dim(2) * gt.dim(3);
  require(frames >= 2, "MESSDdt needs at least two frames");
  std::vector<double> out;
  for (Index i = 0; i < n; ++i) {
    double total = 0;
    for (Index t = 1; t < frames; ++t) {
      const double *p0 = pred.plane(t - 1, i), *p1 = pred.plane(t, i);
      const double *g0 = gt.plane(t - 1, i), *g1 = gt.plane(t, i);
      for (Index j = 0; j < hw; ++j) {
        const double e0 = (p0[j] - g0[j]) * (p0[j] - g0[j]);
        const double e1 = (p1[j] - g1[j]) * (p1[j] - g1[j]);
        total += (e1 - e0) * (e1 - e0);
      }
    }
    out.push_back(total / static_cast<double>((frames - 1) * hw) * s.messddt);
  }
  return finish(std::move(out));
}

MetricReport evaluate(const TensorD& pred, const TensorD& gt, const EvalOptions& opt) {
  check_pair(pred, gt);
  MetricReport r;
  r["MAD"] = mad(pred, gt, opt.scales);
  r["MSE"] = mse(pred, gt, opt.scales);
  r["SAD"] = sad(pred, gt, opt.scales);
  r["Grad"] = grad_metric(pred, gt, opt.grad_sigma, opt.scales);
  r["Conn"] = conn_metric(pred, gt, opt.conn_step, opt.scales);
  const auto tri = estimate_trimap(gt, opt.trimap_dilate);
  r["MAD_f"] = mad(pred, gt, tri, Region::Foreground, opt.scales);
  r["MAD_u"] = mad(pred, gt, tri, Region::Unknown, opt.scales);
  if (gt.dim(0) >= 2) {
    r["dtSSD"] = dtssd_metric(pred, gt, opt.scales);
    r["MESSDdt"] = messddt_metric(pred, gt, opt.scales);
  }
  return r;
}

nlohmann::json to_json(const MetricReport& report) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, v] : report) {
    nlohmann::json e{{"per_instance", v.per_instance}, {"mean", v.mean}};
    if (std::find(v.empty.begin(), v.empty.end(), true) != v.empty.end()) e["empty_region"] = v.empty;
    j[name] = std::move(e);
  }
  return j;
}

MetricReport from_json(const nlohmann::json& j) {
  MetricReport r;
  for (const auto& [name, e] : j.items()) {
    MetricValue v;
    v.per_instance = e.at("per_instance").get<std::vector<double>>();
    v.mean = e.at("mean").get<double>();
    if (e.contains("empty_region")) v.empty = e["empty_region"].get<std::vector<bool>>();
    r[name] = std::move(v);
  }
  return r;
}

MetricReport aggregate(const std::vector<MetricReport>& reports) {
  MetricReport out;
  for (const auto& r : reports)
    for (const auto& [name, v] : r) {
      auto& dst = out[name];
      dst.per_instance.insert(dst.per_instance.end(), v.per_instance.begin(), v.per_instance.end());
      if (!v.empty.empty()) {
        dst.empty.resize(dst.per_instance.size() - v.per_instance.size(), false);
        dst.empty.insert(dst.empty.end(), v.empty.begin(), v.empty.end());
      }
    }
  for (auto& [name, v] : out) {
    v.mean = v.per_instance.empty() ? 0.0
                                    : std::accumulate(v.per_instance.begin(), v.per_instance.end(), 0.0) /
                                          static_cast<double>(v.per_instance.size());
    if (!v.empty.empty()) v.empty.resize(v.per_instance.size(), false);
  }
  return out;
}

}  // namespace maggie::metrics
