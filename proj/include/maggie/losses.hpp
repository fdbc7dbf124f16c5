#pragma once

// Training objectives. Each loss is an autodiff op taking a prediction Var
// and a constant ground truth, with a hand-written adjoint.

#include "maggie/filters.hpp"
#include "maggie/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace maggie {

struct LossWeights {
  double l1 = 1.0;
  double lap = 1.0;
  double grad = 1.0;
  double att = 0.1;
  double dtssd = 1.0;
  double delta = 1.0;
  double bce = 1.0;    // binary relative entropy on the coarse matte
  double gamma = 2.0;  // W₈ boost

  void validate() const {
    for (double v : {l1, lap, grad, att, dtssd, delta, bce})
      if (!(v >= 0.0)) throw ValidationError("loss weights must be nonnegative");
  }
};

namespace detail {

template <typename Scalar>
Scalar sign(Scalar v) {
  return static_cast<Scalar>((v > Scalar(0)) - (v < Scalar(0)));
}

template <typename Scalar>
ad::Var<Scalar> scalar_node(double v, const ad::Var<Scalar>& pred, std::function<void(ad::Node<Scalar>&)> bw) {
  Tensor<Scalar> out({1});
  out[0] = static_cast<Scalar>(v);
  return ad::make_node<Scalar>(std::move(out), {pred}, std::move(bw));
}

template <typename Scalar>
std::vector<Scalar> plane_vec(const Tensor<Scalar>& t, Index plane, Index hw) {
  return std::vector<Scalar>(t.data() + plane * hw, t.data() + (plane + 1) * hw);
}

}  // namespace detail

/// mean(|pred − gt|).
template <typename Scalar>
ad::Var<Scalar> l1_loss(const ad::Var<Scalar>& pred, const Tensor<Scalar>& gt) {
  require(pred->value.size() == gt.size(), "l1_loss: size mismatch");
  const Index n = gt.size();
  if (n == 0) return detail::scalar_node<Scalar>(0.0, pred, [](ad::Node<Scalar>&) {});
  double s = 0;
  for (Index k = 0; k < n; ++k) s += std::abs(static_cast<double>(pred->value[k]) - static_cast<double>(gt[k]));
  return detail::scalar_node<Scalar>(s / static_cast<double>(n), pred, [gt, n](ad::Node<Scalar>& self) {
    if (auto* g = ad::grad_of(self, 0)) {
      const Scalar c = self.grad[0] / static_cast<Scalar>(n);
      for (Index k = 0; k < n; ++k) (*g)[k] += c * detail::sign(self.parents[0]->value[k] - gt[k]);
    }
  });
}

/// mean over pixels of gt·log(gt/p) + (1 − gt)·log((1 − gt)/(1 − p)), with p
/// clamped to [1e-6, 1 − 1e-6]. Zero at pred = gt. Its gradient through a
/// sigmoid does not vanish when the prediction saturates on the wrong side.
template <typename Scalar>
ad::Var<Scalar> relative_entropy_loss(const ad::Var<Scalar>& pred, const Tensor<Scalar>& gt) {
  require(pred->value.size() == gt.size(), "relative_entropy_loss: size mismatch");
  const Index n = gt.size();
  if (n == 0) return detail::scalar_node<Scalar>(0.0, pred, [](ad::Node<Scalar>&) {});
  static constexpr double lo = 1e-6, hi = 1.0 - 1e-6;
  auto xlogy = [](double x, double y) { return x > 0.0 ? x * std::log(x / y) : 0.0; };
  double s = 0;
  for (Index k = 0; k < n; ++k) {
    const double p = std::clamp(static_cast<double>(pred->value[k]), lo, hi), g = gt[k];
    s += xlogy(g, p) + xlogy(1.0 - g, 1.0 - p);
  }
  return detail::scalar_node<Scalar>(s / static_cast<double>(n), pred, [gt, n](ad::Node<Scalar>& self) {
    if (auto* g = ad::grad_of(self, 0)) {
      const double c = static_cast<double>(self.grad[0]) / static_cast<double>(n);
      for (Index k = 0; k < n; ++k) {
        const double v = self.parents[0]->value[k];
        if (v < lo || v > hi) {
          // Clamped region: keep the direction with the boundary slope.
          const double p = std::clamp(v, lo, hi);
          (*g)[k] += static_cast<Scalar>(c * (p - gt[k]) / (p * (1.0 - p)));
          continue;
        }
        (*g)[k] += static_cast<Scalar>(c * (v - gt[k]) / (v * (1.0 - v)));
      }
    }
  });
}

/// W₈ = γ where 0 < gt < 1 and 0 < pred < 1, else 1.
template <typename Scalar>
Tensor<Scalar> coarse_weight(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt, double gamma) {
  Tensor<Scalar> w(gt.shape(), Scalar(1));
  for (Index k = 0; k < gt.size(); ++k)
    if (gt[k] > Scalar(0) && gt[k] < Scalar(1) && pred[k] > Scalar(0) && pred[k] < Scalar(1))
      w[k] = static_cast<Scalar>(gamma);
  return w;
}

/// mean(W₈ ⊙ |pred − gt|) at scale 8.
template <typename Scalar>
ad::Var<Scalar> weighted_coarse_loss(const ad::Var<Scalar>& pred, const Tensor<Scalar>& gt, double gamma = 2.0) {
  require(pred->shape() == gt.shape(), "weighted_coarse_loss: shape mismatch");
  const Index n = gt.size();
  require(n > 0, "weighted_coarse_loss: empty input");
  auto w = coarse_weight(pred->value, gt, gamma);
  double s = 0;
  for (Index k = 0; k < n; ++k) s += static_cast<double>(w[k]) * std::abs(static_cast<double>(pred->value[k] - gt[k]));
  return detail::scalar_node<Scalar>(s / static_cast<double>(n), pred, [gt, w, n](ad::Node<Scalar>& self) {
    if (auto* g = ad::grad_of(self, 0)) {
      const Scalar c = self.grad[0] / static_cast<Scalar>(n);
      for (Index k = 0; k < n; ++k) (*g)[k] += c * w[k] * detail::sign(self.parents[0]->value[k] - gt[k]);
    }
  });
}

/// Σ_i |1 − Σ_p Aff(i, p) · [gt₈(i, p) > 0]|, averaged over frames.
/// aff: [T, N, S]; gt_a8: [T, N, h, w] with h·w = S.
template <typename Scalar>
ad::Var<Scalar> attention_loss(const ad::Var<Scalar>& aff, const Tensor<Scalar>& gt_a8) {
  require(aff->value.rank() == 3 && gt_a8.rank() == 4, "attention_loss: expected aff [T,N,S], gt [T,N,h,w]");
  const Index frames = aff->dim(0), n = aff->dim(1), s = aff->dim(2);
  require(gt_a8.dim(0) == frames && gt_a8.dim(1) == n && gt_a8.dim(2) * gt_a8.dim(3) == s,
          "attention_loss: shape mismatch");
  Tensor<Scalar> sgn({frames, n});
  double total = 0;
  for (Index t = 0; t < frames; ++t)
    for (Index i = 0; i < n; ++i) {
      const Scalar* a = aff->value.data() + (t * n + i) * s;
      const Scalar* g = gt_a8.plane(t, i);
      double dot = 0;
      for (Index p = 0; p < s; ++p)
        if (g[p] > Scalar(0)) dot += static_cast<double>(a[p]);
      total += std::abs(1.0 - dot);
      sgn(t, i) = detail::sign(static_cast<Scalar>(1.0 - dot));
    }
  return detail::scalar_node<Scalar>(total / static_cast<double>(frames), aff,
                                     [gt_a8, sgn, frames, n, s](ad::Node<Scalar>& self) {
                                       if (auto* g = ad::grad_of(self, 0)) {
                                         const Scalar c = self.grad[0] / static_cast<Scalar>(frames);
                                         for (Index t = 0; t < frames; ++t)
                                           for (Index i = 0; i < n; ++i) {
                                             Scalar* gp = g->data() + (t * n + i) * s;
                                             const Scalar* m = gt_a8.plane(t, i);
                                             for (Index p = 0; p < s; ++p)
                                               if (m[p] > Scalar(0)) gp[p] -= c * sgn(t, i);
                                           }
                                       }
                                     });
}

/// Σ_levels mean|band(pred) − band(gt)| over a 5-level Laplacian pyramid
/// (4 detail bands plus the residual), pooled over all T×N planes.
template <typename Scalar>
ad::Var<Scalar> laplacian_loss(const ad::Var<Scalar>& pred, const Tensor<Scalar>& gt, int levels = 5) {
  require(pred->shape() == gt.shape() && gt.rank() == 4, "laplacian_loss: shape mismatch");
  const Index planes = gt.dim(0) * gt.dim(1), h = gt.dim(2), w = gt.dim(3), hw = h * w;
  const auto dims = filters::pyramid_levels(h, w, levels);
  std::vector<double> count(static_cast<std::size_t>(levels));
  for (int k = 0; k < levels; ++k) count[static_cast<std::size_t>(k)] = static_cast<double>(planes * dims[k].h * dims[k].w);
  // Bands are linear, so band(pred) − band(gt) = band(pred − gt).
  auto diff_planes = [gt, planes, hw](const Tensor<Scalar>& p) {
    std::vector<std::vector<Scalar>> d(static_cast<std::size_t>(planes));
    for (Index q = 0; q < planes; ++q) {
      d[static_cast<std::size_t>(q)].resize(static_cast<std::size_t>(hw));
      for (Index j = 0; j < hw; ++j) d[static_cast<std::size_t>(q)][static_cast<std::size_t>(j)] = p[q * hw + j] - gt[q * hw + j];
    }
    return d;
  };
  double total = 0;
  for (const auto& d : diff_planes(pred->value)) {
    auto bands = filters::laplacian_pyramid(d, h, w, levels);
    for (int k = 0; k < levels; ++k)
      for (Scalar v : bands[static_cast<std::size_t>(k)])
        total += std::abs(static_cast<double>(v)) / count[static_cast<std::size_t>(k)];
  }
  return detail::scalar_node<Scalar>(total, pred, [diff_planes, count, planes, h, w, hw, levels](ad::Node<Scalar>& self) {
    auto* g = ad::grad_of(self, 0);
    if (!g) return;
    auto ds = diff_planes(self.parents[0]->value);
    for (Index q = 0; q < planes; ++q) {
      auto bands = filters::laplacian_pyramid(ds[static_cast<std::size_t>(q)], h, w, levels);
      for (int k = 0; k < levels; ++k)
        for (auto& v : bands[static_cast<std::size_t>(k)])
          v = self.grad[0] * detail::sign(v) / static_cast<Scalar>(count[static_cast<std::size_t>(k)]);
      auto back = filters::laplacian_pyramid_adjoint(bands, h, w, levels);
      for (Index j = 0; j < hw; ++j) (*g)[q * hw + j] += back[static_cast<std::size_t>(j)];
    }
  });
}

/// mean(| |∇pred| − |∇gt| |) with Gaussian-derivative gradients (σ = 1.4).
template <typename Scalar>
ad::Var<Scalar> gradient_loss(const ad::Var<Scalar>& pred, const Tensor<Scalar>& gt, double sigma = 1.4) {
  require(pred->shape() == gt.shape() && gt.rank() == 4, "gradient_loss: shape mismatch");
  const Index planes = gt.dim(0) * gt.dim(1), h = gt.dim(2), w = gt.dim(3), hw = h * w;
  const auto kernel = filters::gradient_kernel(sigma);
  std::vector<double> gt_mag(static_cast<std::size_t>(planes * hw));
  for (Index q = 0; q < planes; ++q) {
    auto m = filters::gradient_magnitude(gt.data() + q * hw, h, w, kernel);
    std::copy(m.begin(), m.end(), gt_mag.begin() + q * hw);
  }
  const double n = static_cast<double>(planes * hw);
  double total = 0;
  for (Index q = 0; q < planes; ++q) {
    auto m = filters::gradient_magnitude(pred->value.data() + q * hw, h, w, kernel);
    for (Index j = 0; j < hw; ++j) total += std::abs(m[static_cast<std::size_t>(j)] - gt_mag[static_cast<std::size_t>(q * hw + j)]);
  }
  return detail::scalar_node<Scalar>(total / n, pred, [gt_mag = std::move(gt_mag), kernel, planes, h, w, hw, n](ad::Node<Scalar>& self) {
    auto* g = ad::grad_of(self, 0);
    if (!g) return;
    const double c = static_cast<double>(self.grad[0]) / n;
    std::vector<double> gx(static_cast<std::size_t>(hw)), gy(gx.size());
    for (Index q = 0; q < planes; ++q) {
      filters::gaussian_gradient(self.parents[0]->value.data() + q * hw, h, w, kernel, gx.data(), gy.data());
      for (Index j = 0; j < hw; ++j) {
        const double m = std::sqrt(gx[static_cast<std::size_t>(j)] * gx[static_cast<std::size_t>(j)] +
                                   gy[static_cast<std::size_t>(j)] * gy[static_cast<std::size_t>(j)]);
        const double s = m > 0 ? c * detail::sign(m - gt_mag[static_cast<std::size_t>(q * hw + j)]) / m : 0.0;
        gx[static_cast<std::size_t>(j)] *= s;
        gy[static_cast<std::size_t>(j)] *= s;
      }
      filters::gaussian_gradient_adjoint(gx.data(), gy.data(), h, w, kernel, g->data() + q * hw);
    }
  });
}

/// sqrt(mean((∂ₜpred − ∂ₜgt)²)) with frame differences as ∂ₜ.
template <typename Scalar>
ad::Var<Scalar> dtssd_loss(const ad::Var<Scalar>& pred, const Tensor<Scalar>& gt) {
  require(pred->shape() == gt.shape() && gt.rank() == 4, "dtssd_loss: shape mismatch");
  const Index frames = gt.dim(0);
  require(frames >= 2, "dtssd_loss: need at least two frames");
  const Index per = gt.size() / frames;
  const double n = static_cast<double>((frames - 1) * per);
  auto residual = [gt, per](const Tensor<Scalar>& p, Index t, Index k) {
    return (static_cast<double>(p[t * per + k]) - static_cast<double>(p[(t - 1) * per + k])) -
           (static_cast<double>(gt[t * per + k]) - static_cast<double>(gt[(t - 1) * per + k]));
  };
  double ss = 0;
  for (Index t = 1; t < frames; ++t)
    for (Index k = 0; k < per; ++k) ss += std::pow(residual(pred->value, t, k), 2);
  const double loss = std::sqrt(ss / n);
  return detail::scalar_node<Scalar>(loss, pred, [residual, frames, per, n, loss](ad::Node<Scalar>& self) {
    auto* g = ad::grad_of(self, 0);
    if (!g || loss == 0.0) return;
    const double c = static_cast<double>(self.grad[0]) / (n * loss);
    for (Index t = 1; t < frames; ++t)
      for (Index k = 0; k < per; ++k) {
        const Scalar r = static_cast<Scalar>(c * residual(self.parents[0]->value, t, k));
        (*g)[t * per + k] += r;
        (*g)[(t - 1) * per + k] -= r;
      }
  });
}

/// mean(|Δ̂ − Δ^gt|) on pre-binarisation probabilities.
template <typename Scalar>
ad::Var<Scalar> delta_loss(const ad::Var<Scalar>& prob, const Tensor<std::uint8_t>& gt_delta) {
  require(prob->value.size() == gt_delta.size(), "delta_loss: shape mismatch");
  return l1_loss(prob, gt_delta.cast<Scalar>());
}

// ---------------------------------------------------------------------------

template <typename Scalar>
struct LossTerm {
  std::string name;
  double weight;
  ad::Var<Scalar> value;
};

template <typename Scalar>
struct LossTotal {
  ad::Var<Scalar> total;
  std::map<std::string, double> breakdown;  // unweighted term values
};

/// Σ weight · term. Terms with zero weight are reported but not added.
template <typename Scalar>
LossTotal<Scalar> total_loss(const std::vector<LossTerm<Scalar>>& terms) {
  for (const auto& t : terms)
    if (!(t.weight >= 0.0)) throw ValidationError("negative loss weight for " + t.name);
  LossTotal<Scalar> out;
  for (const auto& t : terms) {
    out.breakdown[t.name] += static_cast<double>(t.value->value[0]);
    if (t.weight == 0.0) continue;
    auto w = ad::scale(t.value, static_cast<Scalar>(t.weight));
    out.total = out.total ? ad::add(out.total, w) : w;
  }
  if (!out.total) out.total = ad::constant(Tensor<Scalar>({1}));
  return out;
}

}  // namespace maggie
