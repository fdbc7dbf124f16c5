#pragma once

// Convolution-family ops and parameterised layers built on the autodiff core.

#include "maggie/autodiff.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <string>

namespace maggie {

// ---------------------------------------------------------------------------
// Parameter registry

/// Named, ordered collection of learnable tensors. Order is registration
/// order, which is also the checkpoint serialisation order.
template <typename Scalar>
class ParameterSet {
 public:
  ad::Var<Scalar> add(const std::string& name, Tensor<Scalar> init) {
    require(!index_.count(name), "duplicate parameter name " + name);
    auto v = ad::parameter(std::move(init));
    index_[name] = entries_.size();
    entries_.push_back({name, v});
    return v;
  }

  struct Entry {
    std::string name;
    ad::Var<Scalar> var;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  ad::Var<Scalar> get(const std::string& name) const { return entries_.at(index_.at(name)).var; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Index numel() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.var->value.size();
    return n;
  }
  void zero_grad() {
    for (auto& e : entries_) e.var->grad = Tensor<Scalar>();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Kaiming-style fan-in scaled normal init.
template <typename Scalar>
Tensor<Scalar> kaiming(Shape shape, Index fan_in, std::mt19937_64& rng, double gain = std::sqrt(2.0)) {
  Tensor<Scalar> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, gain / std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1))));
  for (Index k = 0; k < t.size(); ++k) t[k] = static_cast<Scalar>(nd(rng));
  return t;
}

template <typename Scalar>
Tensor<Scalar> gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor<Scalar> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, stddev);
  for (Index k = 0; k < t.size(); ++k) t[k] = static_cast<Scalar>(nd(rng));
  return t;
}

namespace ad {

// ---------------------------------------------------------------------------
// Dense 2-D convolution, x [B, Cin, H, W], w [Cout, Cin, k, k], b [Cout].
// im2col is processed in column chunks to bound scratch memory.

namespace detail {

struct ConvGeom {
  Index cin, h, w, k, stride, pad, ho, wo;
};

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeom& g, Index p0, Index len, Scalar* col) {
  const Index kk = g.k * g.k;
  for (Index c = 0; c < g.cin; ++c) {
    const Scalar* xc = x + c * g.h * g.w;
    for (Index ky = 0; ky < g.k; ++ky)
      for (Index kx = 0; kx < g.k; ++kx) {
        Scalar* row = col + ((c * kk) + ky * g.k + kx) * len;
        for (Index j = 0; j < len; ++j) {
          const Index p = p0 + j;
          const Index oy = p / g.wo, ox = p % g.wo;
          const Index iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
          row[j] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? xc[iy * g.w + ix] : Scalar(0);
        }
      }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* col, const ConvGeom& g, Index p0, Index len, Scalar* dx) {
  const Index kk = g.k * g.k;
  for (Index c = 0; c < g.cin; ++c) {
    Scalar* dxc = dx + c * g.h * g.w;
    for (Index ky = 0; ky < g.k; ++ky)
      for (Index kx = 0; kx < g.k; ++kx) {
        const Scalar* row = col + ((c * kk) + ky * g.k + kx) * len;
        for (Index j = 0; j < len; ++j) {
          const Index p = p0 + j;
          const Index oy = p / g.wo, ox = p % g.wo;
          const Index iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
          if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) dxc[iy * g.w + ix] += row[j];
        }
      }
  }
}

constexpr Index kConvChunk = 4096;

}  // namespace detail

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b, Index stride = 1,
                   Index pad = -1) {
  using RowMat = typename Tensor<Scalar>::RowMatrix;
  using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  using ConstStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  require(x->value.rank() == 4 && w->value.rank() == 4, "conv2d: rank-4 input and weight required");
  require(x->dim(1) == w->dim(1), "conv2d: channel mismatch " + shape_str(x->shape()) + " vs " + shape_str(w->shape()));
  const Index k = w->dim(2);
  if (pad < 0) pad = k / 2;
  detail::ConvGeom g{x->dim(1), x->dim(2), x->dim(3), k, stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - k) / stride + 1;
  g.wo = (g.w + 2 * pad - k) / stride + 1;
  const Index batch = x->dim(0), cout = w->dim(0), kdim = g.cin * k * k, npos = g.ho * g.wo;
  Tensor<Scalar> out({batch, cout, g.ho, g.wo});
  auto wm = Eigen::Map<const RowMat>(w->value.data(), cout, kdim);
  std::vector<Scalar, memory::TrackedAllocator<Scalar>> col;
  for (Index bi = 0; bi < batch; ++bi) {
    const Scalar* xb = x->value.data() + bi * g.cin * g.h * g.w;
    Scalar* ob = out.data() + bi * cout * npos;
    for (Index p0 = 0; p0 < npos; p0 += detail::kConvChunk) {
      const Index len = std::min(detail::kConvChunk, npos - p0);
      col.resize(static_cast<std::size_t>(kdim * len));
      detail::im2col(xb, g, p0, len, col.data());
      Strided(ob + p0, cout, len, Eigen::OuterStride<>(npos)).noalias() =
          wm * Eigen::Map<const RowMat>(col.data(), kdim, len);
    }
    if (b)
      for (Index c = 0; c < cout; ++c)
        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(ob + c * npos, npos) += b->value[c];
  }
  std::vector<Var<Scalar>> parents{x, w};
  if (b) parents.push_back(b);
  return make_node<Scalar>(std::move(out), std::move(parents), [g, batch, cout, kdim, npos](Node<Scalar>& self) {
    auto* gx = grad_of(self, 0);
    auto* gw = grad_of(self, 1);
    const auto& xv = self.parents[0]->value;
    auto wm = Eigen::Map<const RowMat>(self.parents[1]->value.data(), cout, kdim);
    std::vector<Scalar, memory::TrackedAllocator<Scalar>> col, dcol;
    for (Index bi = 0; bi < batch; ++bi) {
      const Scalar* xb = xv.data() + bi * g.cin * g.h * g.w;
      const Scalar* gob = self.grad.data() + bi * cout * npos;
      for (Index p0 = 0; p0 < npos; p0 += detail::kConvChunk) {
        const Index len = std::min(detail::kConvChunk, npos - p0);
        ConstStrided go(gob + p0, cout, len, Eigen::OuterStride<>(npos));
        if (gw) {
          col.resize(static_cast<std::size_t>(kdim * len));
          detail::im2col(xb, g, p0, len, col.data());
          Eigen::Map<RowMat>(gw->data(), cout, kdim).noalias() +=
              go * Eigen::Map<const RowMat>(col.data(), kdim, len).transpose();
        }
        if (gx) {
          dcol.resize(static_cast<std::size_t>(kdim * len));
          Eigen::Map<RowMat>(dcol.data(), kdim, len).noalias() = wm.transpose() * go;
          detail::col2im_add(dcol.data(), g, p0, len, gx->data() + bi * g.cin * g.h * g.w);
        }
      }
      if (self.parents.size() > 2)
        if (auto* gb = grad_of(self, 2))
          for (Index c = 0; c < cout; ++c)
            (*gb)[c] += Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(gob + c * npos, npos).sum();
    }
  });
}

/// Per-pixel normalisation across channels of x [B, C, H, W] with affine.
template <typename Scalar>
Var<Scalar> channel_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                         Scalar eps = Scalar(1e-5)) {
  const Index batch = x->dim(0), ch = x->dim(1), hw = x->dim(2) * x->dim(3);
  Tensor<Scalar> out(x->shape());
  Tensor<Scalar> xhat(x->shape());
  Tensor<Scalar> inv_std({batch, hw});
  using RowMat = typename Tensor<Scalar>::RowMatrix;
  for (Index bi = 0; bi < batch; ++bi) {
    Eigen::Map<const RowMat> xm(x->value.data() + bi * ch * hw, ch, hw);
    Eigen::Map<RowMat> hm(xhat.data() + bi * ch * hw, ch, hw);
    Eigen::Map<RowMat> om(out.data() + bi * ch * hw, ch, hw);
    Eigen::Array<Scalar, 1, Eigen::Dynamic> mu = xm.colwise().mean().array();
    Eigen::Array<Scalar, 1, Eigen::Dynamic> var = (xm.array().rowwise() - mu).square().colwise().sum() / Scalar(ch);
    Eigen::Array<Scalar, 1, Eigen::Dynamic> is = (var + eps).rsqrt();
    hm.array() = (xm.array().rowwise() - mu).rowwise() * is;
    inv_std.mat().row(bi) = is.matrix();
    om.array() = (hm.array().colwise() * gamma->value.flat()).colwise() + beta->value.flat();
  }
  return make_node<Scalar>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), batch, ch, hw](Node<Scalar>& self) {
        for (Index bi = 0; bi < batch; ++bi) {
          Eigen::Map<const RowMat> gy(self.grad.data() + bi * ch * hw, ch, hw);
          Eigen::Map<const RowMat> hm(xhat.data() + bi * ch * hw, ch, hw);
          if (auto* g = grad_of(self, 1)) g->flat().matrix() += (gy.array() * hm.array()).rowwise().sum().matrix();
          if (auto* g = grad_of(self, 2)) g->flat().matrix() += gy.rowwise().sum();
          if (auto* g = grad_of(self, 0)) {
            Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> gx =
                gy.array().colwise() * self.parents[1]->value.flat();
            Eigen::Array<Scalar, 1, Eigen::Dynamic> m1 = gx.colwise().mean();
            Eigen::Array<Scalar, 1, Eigen::Dynamic> m2 = (gx * hm.array()).colwise().mean();
            Eigen::Map<RowMat> gm(g->data() + bi * ch * hw, ch, hw);
            gm.array() += ((gx.rowwise() - m1) - hm.array().rowwise() * m2).rowwise() *
                          inv_std.mat().row(bi).array();
          }
        }
      });
}

/// Nearest-neighbour upsampling of the last two dims by an integer factor.
template <typename Scalar>
Var<Scalar> upsample_nearest(const Var<Scalar>& x, Index factor) {
  const Index planes = x->dim(0) * x->dim(1), h = x->dim(2), w = x->dim(3);
  const Index H = h * factor, W = w * factor;
  Tensor<Scalar> out({x->dim(0), x->dim(1), H, W});
  for (Index p = 0; p < planes; ++p) {
    const Scalar* src = x->value.data() + p * h * w;
    Scalar* dst = out.data() + p * H * W;
    for (Index y = 0; y < H; ++y)
      for (Index xx = 0; xx < W; ++xx) dst[y * W + xx] = src[(y / factor) * w + xx / factor];
  }
  return make_node<Scalar>(std::move(out), {x}, [planes, h, w, H, W, factor](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0))
      for (Index p = 0; p < planes; ++p) {
        const Scalar* src = self.grad.data() + p * H * W;
        Scalar* dst = g->data() + p * h * w;
        for (Index y = 0; y < H; ++y)
          for (Index xx = 0; xx < W; ++xx) dst[(y / factor) * w + xx / factor] += src[y * W + xx];
      }
  });
}

/// Feature vectors of x [T, C, h, w] at flat plane positions (t, y*w+x) -> [P, C].
template <typename Scalar>
Var<Scalar> gather_pixels(const Var<Scalar>& x, std::vector<Index> frame, std::vector<Index> pos) {
  const Index ch = x->dim(1), hw = x->dim(2) * x->dim(3);
  const Index count = static_cast<Index>(pos.size());
  Tensor<Scalar> out({count, ch});
  for (Index p = 0; p < count; ++p) {
    const Scalar* base = x->value.data() + frame[static_cast<std::size_t>(p)] * ch * hw + pos[static_cast<std::size_t>(p)];
    Scalar* row = out.data() + p * ch;
    for (Index c = 0; c < ch; ++c) row[c] = base[c * hw];
  }
  return make_node<Scalar>(std::move(out), {x},
                           [frame = std::move(frame), pos = std::move(pos), ch, hw, count](Node<Scalar>& self) {
                             if (auto* g = grad_of(self, 0))
                               for (Index p = 0; p < count; ++p) {
                                 Scalar* base = g->data() + frame[static_cast<std::size_t>(p)] * ch * hw +
                                                pos[static_cast<std::size_t>(p)];
                                 const Scalar* row = self.grad.data() + p * ch;
                                 for (Index c = 0; c < ch; ++c) base[c * hw] += row[c];
                               }
                           });
}

/// Sparse convolution over an explicit neighbour table.
/// x [P, Cin], nbr [P*K] (row index or -1), w [Cout, K*Cin], b [Cout].
/// Output rows align with the rows of nbr (P_out = nbr.size()/K).
template <typename Scalar>
Var<Scalar> sparse_conv(const Var<Scalar>& x, std::shared_ptr<const std::vector<std::int32_t>> nbr, Index k,
                        const Var<Scalar>& w, const Var<Scalar>& b) {
  using RowMat = typename Tensor<Scalar>::RowMatrix;
  const Index cin = x->dim(1), cout = w->dim(0);
  require(w->dim(1) == k * cin, "sparse_conv: weight shape mismatch");
  const Index pout = static_cast<Index>(nbr->size()) / k;
  Tensor<Scalar> out({pout, cout});
  static constexpr Index chunk = 2048;
  std::vector<Scalar, memory::TrackedAllocator<Scalar>> col;
  auto fill_col = [&](const Tensor<Scalar>& xv, Index r0, Index len) {
    col.assign(static_cast<std::size_t>(len * k * cin), Scalar(0));
    for (Index r = 0; r < len; ++r)
      for (Index kk = 0; kk < k; ++kk) {
        const std::int32_t src = (*nbr)[static_cast<std::size_t>((r0 + r) * k + kk)];
        if (src >= 0) std::copy_n(xv.data() + src * cin, cin, col.data() + (r * k + kk) * cin);
      }
  };
  auto wm = Eigen::Map<const RowMat>(w->value.data(), cout, k * cin);
  for (Index r0 = 0; r0 < pout; r0 += chunk) {
    const Index len = std::min(chunk, pout - r0);
    fill_col(x->value, r0, len);
    Eigen::Map<RowMat>(out.data() + r0 * cout, len, cout).noalias() =
        Eigen::Map<const RowMat>(col.data(), len, k * cin) * wm.transpose();
  }
  if (b) out.mat().rowwise() += b->value.flat().matrix().transpose();
  std::vector<Var<Scalar>> parents{x, w};
  if (b) parents.push_back(b);
  return make_node<Scalar>(std::move(out), std::move(parents), [nbr, k, cin, cout, pout](Node<Scalar>& self) {
    auto* gx = grad_of(self, 0);
    auto* gw = grad_of(self, 1);
    auto wm = Eigen::Map<const RowMat>(self.parents[1]->value.data(), cout, k * cin);
    std::vector<Scalar, memory::TrackedAllocator<Scalar>> col, dcol;
    for (Index r0 = 0; r0 < pout; r0 += chunk) {
      const Index len = std::min(chunk, pout - r0);
      Eigen::Map<const RowMat> go(self.grad.data() + r0 * cout, len, cout);
      if (gw) {
        col.assign(static_cast<std::size_t>(len * k * cin), Scalar(0));
        for (Index r = 0; r < len; ++r)
          for (Index kk = 0; kk < k; ++kk) {
            const std::int32_t src = (*nbr)[static_cast<std::size_t>((r0 + r) * k + kk)];
            if (src >= 0)
              std::copy_n(self.parents[0]->value.data() + src * cin, cin, col.data() + (r * k + kk) * cin);
          }
        Eigen::Map<RowMat>(gw->data(), cout, k * cin).noalias() +=
            go.transpose() * Eigen::Map<const RowMat>(col.data(), len, k * cin);
      }
      if (gx) {
        dcol.resize(static_cast<std::size_t>(len * k * cin));
        Eigen::Map<RowMat>(dcol.data(), len, k * cin).noalias() = go * wm;
        for (Index r = 0; r < len; ++r)
          for (Index kk = 0; kk < k; ++kk) {
            const std::int32_t src = (*nbr)[static_cast<std::size_t>((r0 + r) * k + kk)];
            if (src >= 0) {
              Scalar* dst = gx->data() + src * cin;
              const Scalar* s = dcol.data() + (r * k + kk) * cin;
              for (Index c = 0; c < cin; ++c) dst[c] += s[c];
            }
          }
      }
    }
    if (self.parents.size() > 2)
      if (auto* gb = grad_of(self, 2)) gb->flat().matrix() += self.grad.mat().colwise().sum().transpose();
  });
}

/// Transposed (inverse) sparse convolution with kernel 2, stride 2: every
/// child row c receives W[offset(c)] · x[parent(c)] + b.
/// w [4, Cout, Cin], b [Cout].
template <typename Scalar>
Var<Scalar> sparse_upconv(const Var<Scalar>& x, std::shared_ptr<const std::vector<std::int32_t>> parent,
                          std::shared_ptr<const std::vector<std::uint8_t>> offset, const Var<Scalar>& w,
                          const Var<Scalar>& b) {
  using RowMat = typename Tensor<Scalar>::RowMatrix;
  const Index cin = x->dim(1), cout = w->dim(1);
  require(w->dim(0) == 4 && w->dim(2) == cin, "sparse_upconv: weight shape mismatch");
  const Index nchild = static_cast<Index>(parent->size());
  Tensor<Scalar> out({nchild, cout});
  std::array<std::vector<Index>, 4> groups;
  for (Index c = 0; c < nchild; ++c) groups[(*offset)[static_cast<std::size_t>(c)]].push_back(c);
  for (int o = 0; o < 4; ++o) {
    const auto& grp = groups[static_cast<std::size_t>(o)];
    if (grp.empty()) continue;
    const Index n = static_cast<Index>(grp.size());
    RowMat xs(n, cin);
    for (Index r = 0; r < n; ++r) xs.row(r) = x->value.mat().row((*parent)[static_cast<std::size_t>(grp[static_cast<std::size_t>(r)])]);
    RowMat ys = xs * Eigen::Map<const RowMat>(w->value.data() + o * cout * cin, cout, cin).transpose();
    for (Index r = 0; r < n; ++r) out.mat().row(grp[static_cast<std::size_t>(r)]) = ys.row(r);
  }
  if (b) out.mat().rowwise() += b->value.flat().matrix().transpose();
  std::vector<Var<Scalar>> parents{x, w};
  if (b) parents.push_back(b);
  return make_node<Scalar>(std::move(out), std::move(parents),
                           [parent, groups = std::move(groups), cin, cout](Node<Scalar>& self) {
                             auto* gx = grad_of(self, 0);
                             auto* gw = grad_of(self, 1);
                             for (int o = 0; o < 4; ++o) {
                               const auto& grp = groups[static_cast<std::size_t>(o)];
                               if (grp.empty()) continue;
                               const Index n = static_cast<Index>(grp.size());
                               RowMat go(n, cout);
                               for (Index r = 0; r < n; ++r) go.row(r) = self.grad.mat().row(grp[static_cast<std::size_t>(r)]);
                               Eigen::Map<const RowMat> wo(self.parents[1]->value.data() + o * cout * cin, cout, cin);
                               if (gw) {
                                 RowMat xs(n, cin);
                                 for (Index r = 0; r < n; ++r)
                                   xs.row(r) = self.parents[0]->value.mat().row(
                                       (*parent)[static_cast<std::size_t>(grp[static_cast<std::size_t>(r)])]);
                                 Eigen::Map<RowMat>(gw->data() + o * cout * cin, cout, cin).noalias() += go.transpose() * xs;
                               }
                               if (gx) {
                                 RowMat dx = go * wo;
                                 for (Index r = 0; r < n; ++r)
                                   gx->mat().row((*parent)[static_cast<std::size_t>(grp[static_cast<std::size_t>(r)])]) += dx.row(r);
                               }
                             }
                             if (self.parents.size() > 2)
                               if (auto* gb = grad_of(self, 2))
                                 gb->flat().matrix() += self.grad.mat().colwise().sum().transpose();
                           });
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Layers

template <typename Scalar>
struct Linear {
  ad::Var<Scalar> weight, bias;

  Linear() = default;
  Linear(ParameterSet<Scalar>& params, const std::string& name, Index in, Index out, std::mt19937_64& rng,
         double gain = 1.0) {
    weight = params.add(name + ".weight", kaiming<Scalar>({out, in}, in, rng, gain));
    bias = params.add(name + ".bias", Tensor<Scalar>({out}));
  }
  ad::Var<Scalar> operator()(const ad::Var<Scalar>& x) const { return ad::linear(x, weight, bias); }
};

template <typename Scalar>
struct Conv2d {
  ad::Var<Scalar> weight, bias;
  Index stride = 1;

  Conv2d() = default;
  Conv2d(ParameterSet<Scalar>& params, const std::string& name, Index in, Index out, Index kernel,
         std::mt19937_64& rng, Index stride_ = 1, double gain = std::sqrt(2.0))
      : stride(stride_) {
    weight = params.add(name + ".weight", kaiming<Scalar>({out, in, kernel, kernel}, in * kernel * kernel, rng, gain));
    bias = params.add(name + ".bias", Tensor<Scalar>({out}));
  }
  ad::Var<Scalar> operator()(const ad::Var<Scalar>& x) const { return ad::conv2d(x, weight, bias, stride); }
};

template <typename Scalar>
struct Norm {
  ad::Var<Scalar> gamma, beta;

  Norm() = default;
  Norm(ParameterSet<Scalar>& params, const std::string& name, Index ch) {
    gamma = params.add(name + ".gamma", Tensor<Scalar>({ch}, Scalar(1)));
    beta = params.add(name + ".beta", Tensor<Scalar>({ch}));
  }
  ad::Var<Scalar> rows(const ad::Var<Scalar>& x) const { return ad::layer_norm_rows(x, gamma, beta); }
  ad::Var<Scalar> channels(const ad::Var<Scalar>& x) const { return ad::channel_norm(x, gamma, beta); }
};

/// Sparse 3×3 convolution weights, w [Cout, 9*Cin].
template <typename Scalar>
struct SparseConv3 {
  ad::Var<Scalar> weight, bias;

  SparseConv3() = default;
  SparseConv3(ParameterSet<Scalar>& params, const std::string& name, Index in, Index out, std::mt19937_64& rng,
              double gain = std::sqrt(2.0)) {
    weight = params.add(name + ".weight", kaiming<Scalar>({out, 9 * in}, 9 * in, rng, gain));
    bias = params.add(name + ".bias", Tensor<Scalar>({out}));
  }
};

/// Inverse sparse convolution weights, w [4, Cout, Cin].
template <typename Scalar>
struct SparseUpConv {
  ad::Var<Scalar> weight, bias;

  SparseUpConv() = default;
  SparseUpConv(ParameterSet<Scalar>& params, const std::string& name, Index in, Index out, std::mt19937_64& rng) {
    weight = params.add(name + ".weight", kaiming<Scalar>({4, out, in}, in, rng, 1.0));
    bias = params.add(name + ".bias", Tensor<Scalar>({out}));
  }
};

}  // namespace maggie
