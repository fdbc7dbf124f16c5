#pragma once

// Sparse coarse-to-fine refinement: uncertainty extraction, dense-to-sparse
// instance features, instance guidance gating, detail aggregation, sparse
// matte heads and the progressive refinement fusion.

#include "maggie/morphology.hpp"
#include "maggie/nn.hpp"

#include <compare>
#include <cstdint>
#include <memory>

namespace maggie {

struct SparseIndex {
  std::int32_t t = 0, i = 0, y = 0, x = 0;
  auto operator<=>(const SparseIndex&) const = default;
};

/// [T, N, h, w] extent of a sparse coordinate grid.
struct GridDims {
  Index frames = 0, instances = 0, height = 0, width = 0;
  bool operator==(const GridDims&) const = default;
  Index planes() const { return frames * instances; }
  Index numel() const { return frames * instances * height * width; }
  bool contains(const SparseIndex& s) const {
    return s.t >= 0 && s.t < frames && s.i >= 0 && s.i < instances && s.y >= 0 && s.y < height && s.x >= 0 &&
           s.x < width;
  }
  Index flat(const SparseIndex& s) const { return ((s.t * instances + s.i) * height + s.y) * width + s.x; }
};

/// Locations (x, y, t, i) at scale 8 whose coarse alpha is neither
/// confidently 0 nor 1.
struct UncertaintySet {
  std::vector<SparseIndex> indices;
  GridDims dims;
  Index size() const { return static_cast<Index>(indices.size()); }
};

template <typename Scalar>
UncertaintySet extract_uncertainty(const Tensor<Scalar>& a8, double eps) {
  require(a8.rank() == 4, "extract_uncertainty: a8 must be [T, N, h, w]");
  UncertaintySet u;
  u.dims = {a8.dim(0), a8.dim(1), a8.dim(2), a8.dim(3)};
  for (Index t = 0; t < a8.dim(0); ++t)
    for (Index i = 0; i < a8.dim(1); ++i)
      for (Index y = 0; y < a8.dim(2); ++y)
        for (Index x = 0; x < a8.dim(3); ++x) {
          const double v = static_cast<double>(a8(t, i, y, x));
          if (v >= eps && v <= 1.0 - eps)
            u.indices.push_back({static_cast<std::int32_t>(t), static_cast<std::int32_t>(i),
                                 static_cast<std::int32_t>(y), static_cast<std::int32_t>(x)});
        }
  return u;
}

/// Coordinate set at one scale plus the index tables sparse ops need.
/// Tables are built once per forward pass and shared by the ops using them.
class SparseLayout {
 public:
  SparseLayout(std::vector<SparseIndex> coords, GridDims dims, int scale)
      : coords_(std::move(coords)), dims_(dims), scale_(scale) {
    for (const auto& c : coords_)
      if (!dims_.contains(c)) throw ValidationError("sparse coordinate out of bounds");
    build_neighbours();
  }

  /// 2× finer layout: every entry spawns its 2×2 children, in parent order.
  static std::shared_ptr<const SparseLayout> upsampled(const SparseLayout& parent) {
    std::vector<SparseIndex> kids;
    kids.reserve(parent.coords_.size() * 4);
    auto par = std::make_shared<std::vector<std::int32_t>>();
    auto off = std::make_shared<std::vector<std::uint8_t>>();
    par->reserve(parent.coords_.size() * 4);
    off->reserve(parent.coords_.size() * 4);
    for (std::size_t p = 0; p < parent.coords_.size(); ++p) {
      const auto& c = parent.coords_[p];
      for (std::uint8_t o = 0; o < 4; ++o) {
        kids.push_back({c.t, c.i, c.y * 2 + (o >> 1), c.x * 2 + (o & 1)});
        par->push_back(static_cast<std::int32_t>(p));
        off->push_back(o);
      }
    }
    GridDims d = parent.dims_;
    d.height *= 2;
    d.width *= 2;
    auto child = std::make_shared<SparseLayout>(std::move(kids), d, parent.scale_ / 2);
    child->parent_ = std::move(par);
    child->offset_ = std::move(off);
    return child;
  }

  const std::vector<SparseIndex>& coords() const { return coords_; }
  const GridDims& dims() const { return dims_; }
  int scale() const { return scale_; }
  Index size() const { return static_cast<Index>(coords_.size()); }

  /// [P*9] row index of each 3×3 neighbour in the same (t, i) plane, or -1.
  /// Kernel slot k = (dy + 1) * 3 + (dx + 1).
  std::shared_ptr<const std::vector<std::int32_t>> neighbours() const { return nbr_; }
  std::shared_ptr<const std::vector<std::int32_t>> parent() const { return parent_; }
  std::shared_ptr<const std::vector<std::uint8_t>> offset() const { return offset_; }

  std::vector<Index> frame_index() const {
    std::vector<Index> f(coords_.size());
    for (std::size_t p = 0; p < coords_.size(); ++p) f[p] = coords_[p].t;
    return f;
  }
  std::vector<Index> pixel_index() const {
    std::vector<Index> f(coords_.size());
    for (std::size_t p = 0; p < coords_.size(); ++p) f[p] = coords_[p].y * dims_.width + coords_[p].x;
    return f;
  }
  std::vector<Index> flat_index() const {
    std::vector<Index> f(coords_.size());
    for (std::size_t p = 0; p < coords_.size(); ++p) f[p] = dims_.flat(coords_[p]);
    return f;
  }

 private:
  void build_neighbours() {
    auto nbr = std::make_shared<std::vector<std::int32_t>>(coords_.size() * 9, -1);
    std::vector<std::vector<std::int32_t>> by_plane(static_cast<std::size_t>(dims_.planes()));
    for (std::size_t p = 0; p < coords_.size(); ++p)
      by_plane[static_cast<std::size_t>(coords_[p].t * dims_.instances + coords_[p].i)].push_back(
          static_cast<std::int32_t>(p));
    std::vector<std::int32_t> grid;
    for (const auto& rows : by_plane) {
      if (rows.empty()) continue;
      grid.assign(static_cast<std::size_t>(dims_.height * dims_.width), -1);
      for (auto r : rows) {
        const auto& c = coords_[static_cast<std::size_t>(r)];
        auto& slot = grid[static_cast<std::size_t>(c.y * dims_.width + c.x)];
        if (slot >= 0) throw ValidationError("duplicate sparse coordinate");
        slot = r;
      }
      for (auto r : rows) {
        const auto& c = coords_[static_cast<std::size_t>(r)];
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const Index yy = c.y + dy, xx = c.x + dx;
            if (yy < 0 || yy >= dims_.height || xx < 0 || xx >= dims_.width) continue;
            (*nbr)[static_cast<std::size_t>(r) * 9 + static_cast<std::size_t>((dy + 1) * 3 + dx + 1)] =
                grid[static_cast<std::size_t>(yy * dims_.width + xx)];
          }
      }
    }
    nbr_ = std::move(nbr);
  }

  std::vector<SparseIndex> coords_;
  GridDims dims_;
  int scale_;
  std::shared_ptr<const std::vector<std::int32_t>> nbr_, parent_;
  std::shared_ptr<const std::vector<std::uint8_t>> offset_;
};

/// Per-entry features at the coordinates of a layout: values [P, C].
template <typename Scalar>
struct SparseFeatureMap {
  std::shared_ptr<const SparseLayout> layout;
  ad::Var<Scalar> values;

  int scale() const { return layout->scale(); }
  Index size() const { return layout->size(); }
  const std::vector<SparseIndex>& coords() const { return layout->coords(); }
};

// ---------------------------------------------------------------------------
// Parameter bundles

template <typename Scalar>
struct PointwiseMLP {
  Linear<Scalar> fc1, fc2;
  PointwiseMLP() = default;
  PointwiseMLP(ParameterSet<Scalar>& params, const std::string& name, Index in, Index hidden, Index out,
               std::mt19937_64& rng)
      : fc1(params, name + ".fc1", in, hidden, rng, std::sqrt(2.0)), fc2(params, name + ".fc2", hidden, out, rng) {}
  ad::Var<Scalar> operator()(const ad::Var<Scalar>& x) const { return fc2(ad::relu(fc1(x))); }
};

template <typename Scalar>
struct InstanceGuidanceParams {
  SparseUpConv<Scalar> up;
  SparseConv3<Scalar> gate1, gate2;
  InstanceGuidanceParams() = default;
  InstanceGuidanceParams(ParameterSet<Scalar>& params, const std::string& name, Index coarse_ch, Index fine_ch,
                         std::mt19937_64& rng)
      : up(params, name + ".up", coarse_ch, fine_ch, rng),
        gate1(params, name + ".gate1", 2 * fine_ch, fine_ch, rng),
        gate2(params, name + ".gate2", fine_ch, fine_ch, rng, 1.0) {}
};

template <typename Scalar>
struct DetailAggregationParams {
  SparseUpConv<Scalar> up;
  SparseConv3<Scalar> conv;
  DetailAggregationParams() = default;
  DetailAggregationParams(ParameterSet<Scalar>& params, const std::string& name, Index in_ch, Index dense_ch,
                          Index out_ch, std::mt19937_64& rng)
      : up(params, name + ".up", in_ch, out_ch, rng), conv(params, name + ".conv", out_ch + dense_ch, out_ch, rng) {}
};

template <typename Scalar>
struct SparseMatteHeadParams {
  SparseConv3<Scalar> conv1, conv2;
  Norm<Scalar> norm;
  SparseMatteHeadParams() = default;
  SparseMatteHeadParams(ParameterSet<Scalar>& params, const std::string& name, Index in_ch, std::mt19937_64& rng)
      : conv1(params, name + ".conv1", in_ch, std::max<Index>(in_ch / 2, 1), rng),
        conv2(params, name + ".conv2", std::max<Index>(in_ch / 2, 1), 1, rng, 1.0),
        norm(params, name + ".norm", std::max<Index>(in_ch / 2, 1)) {}
};

// ---------------------------------------------------------------------------
// Operations

/// X8(x, y, t, i) = MLP(F̄8(x, y, t) ⊙ T_i), evaluated only on U.
/// enriched: [T, C, h, w]; tokens: [T, N, C].
template <typename Scalar>
SparseFeatureMap<Scalar> dense_to_sparse(const ad::Var<Scalar>& enriched, const ad::Var<Scalar>& tokens,
                                         const UncertaintySet& u, const PointwiseMLP<Scalar>& mlp) {
  const GridDims dims{enriched->dim(0), tokens->dim(1), enriched->dim(2), enriched->dim(3)};
  require(tokens->dim(0) == dims.frames && tokens->dim(2) == enriched->dim(1), "dense_to_sparse: token shape mismatch");
  for (const auto& c : u.indices)
    if (!dims.contains(c)) throw ValidationError("dense_to_sparse: uncertainty index out of bounds");
  auto layout = std::make_shared<const SparseLayout>(u.indices, dims, 8);
  const Index ch = enriched->dim(1);
  std::vector<Index> tok_rows(u.indices.size());
  for (std::size_t p = 0; p < u.indices.size(); ++p) tok_rows[p] = u.indices[p].t * dims.instances + u.indices[p].i;
  auto feats = ad::gather_pixels(enriched, layout->frame_index(), layout->pixel_index());
  auto toks = ad::gather_rows(ad::reshape(tokens, {dims.frames * dims.instances, ch}), std::move(tok_rows));
  return {layout, mlp(ad::mul(feats, toks))};
}

/// X4(p) = G({X'4(p); F4(p)}) ⊙ F4(p), with X'4 the inverse sparse
/// convolution of X8 onto its 2×2 children.
template <typename Scalar>
SparseFeatureMap<Scalar> instance_guidance(const SparseFeatureMap<Scalar>& x8, const ad::Var<Scalar>& f4,
                                           const InstanceGuidanceParams<Scalar>& ig) {
  auto layout = SparseLayout::upsampled(*x8.layout);
  require(f4->dim(2) == layout->dims().height && f4->dim(3) == layout->dims().width,
          "instance_guidance: fine features do not match the 2x grid");
  auto up = ad::sparse_upconv(x8.values, layout->parent(), layout->offset(), ig.up.weight, ig.up.bias);
  auto fine = ad::gather_pixels(f4, layout->frame_index(), layout->pixel_index());
  auto hidden = ad::leaky_relu(
      ad::sparse_conv(ad::concat<Scalar>({up, fine}, 1), layout->neighbours(), 9, ig.gate1.weight, ig.gate1.bias));
  auto gate = ad::sigmoid(ad::sparse_conv(hidden, layout->neighbours(), 9, ig.gate2.weight, ig.gate2.bias));
  return {layout, ad::mul(gate, fine)};
}

/// Upscales sparse features 2×, merges dense features gathered at the new
/// coordinates and applies a submanifold 3×3 convolution.
template <typename Scalar>
SparseFeatureMap<Scalar> detail_aggregate(const SparseFeatureMap<Scalar>& x, const ad::Var<Scalar>& dense,
                                          const DetailAggregationParams<Scalar>& agg) {
  require(dense->value.rank() == 4 && dense->dim(2) == 2 * x.layout->dims().height &&
              dense->dim(3) == 2 * x.layout->dims().width,
          "detail_aggregate: dense features are not at half the sparse scale");
  auto layout = SparseLayout::upsampled(*x.layout);
  auto up = ad::sparse_upconv(x.values, layout->parent(), layout->offset(), agg.up.weight, agg.up.bias);
  auto fine = ad::gather_pixels(dense, layout->frame_index(), layout->pixel_index());
  auto out = ad::leaky_relu(
      ad::sparse_conv(ad::concat<Scalar>({up, fine}, 1), layout->neighbours(), 9, agg.conv.weight, agg.conv.bias));
  return {layout, out};
}

template <typename Scalar>
struct SparseMatte {
  std::shared_ptr<const SparseLayout> layout;
  ad::Var<Scalar> probs;  // [P, 1]
  ad::Var<Scalar> dense;  // [T, N, h, w], zero off the support
};

template <typename Scalar>
SparseMatte<Scalar> sparse_matte_head(const SparseFeatureMap<Scalar>& x, const SparseMatteHeadParams<Scalar>& head) {
  const auto& nbr = x.layout->neighbours();
  auto h = ad::sparse_conv(x.values, nbr, 9, head.conv1.weight, head.conv1.bias);
  h = ad::leaky_relu(head.norm.rows(h));
  auto probs = ad::sigmoid(ad::sparse_conv(h, nbr, 9, head.conv2.weight, head.conv2.bias));
  const auto& d = x.layout->dims();
  auto dense = ad::scatter_dense(probs, x.layout->flat_index(), {d.frames, d.instances, d.height, d.width});
  return {x.layout, probs, dense};
}

// ---------------------------------------------------------------------------
// Progressive refinement

struct RefineConfig {
  Index kernel4 = 30;
  Index kernel1 = 15;
  double eps = 1.0 / 255.0;
};

/// Binary [T, N, h*f, w*f] mask of U's cells expanded by `factor`.
inline Tensor<std::uint8_t> upscale_uncertainty(const UncertaintySet& u, Index factor) {
  const auto& d = u.dims;
  Tensor<std::uint8_t> out({d.frames, d.instances, d.height * factor, d.width * factor});
  for (const auto& c : u.indices)
    for (Index dy = 0; dy < factor; ++dy)
      for (Index dx = 0; dx < factor; ++dx) out(c.t, c.i, c.y * factor + dy, c.x * factor + dx) = 1;
  return out;
}

template <typename Scalar>
struct RefineResult {
  Tensor<Scalar> alpha;
  std::vector<std::uint8_t> choice;  // 0: a8, 1: a4, 2: a1 per element
  Tensor<std::uint8_t> r4, r1;
};

namespace detail {

// Refines one H×W plane in place. `src(k, j)` reads input k at pixel j.
template <typename Scalar, typename Source>
void refine_plane(Index h, Index w, const std::uint8_t* u, const RefineConfig& cfg, Source&& src, Scalar* alpha,
                  std::uint8_t* choice, std::uint8_t* r4, std::uint8_t* r1) {
  const Index hw = h * w;
  std::vector<std::uint8_t> unc(static_cast<std::size_t>(hw)), dil(static_cast<std::size_t>(hw));
  auto uncertain = [&](Scalar v) {
    const double d = static_cast<double>(v);
    return d >= cfg.eps && d <= 1.0 - cfg.eps;
  };
  for (Index j = 0; j < hw; ++j) {
    alpha[j] = src(0, j);
    choice[j] = 0;
  }
  const Index kernels[2] = {cfg.kernel4, cfg.kernel1};
  std::uint8_t* masks[2] = {r4, r1};
  for (int step = 0; step < 2; ++step) {
    for (Index j = 0; j < hw; ++j) unc[static_cast<std::size_t>(j)] = uncertain(alpha[j]) ? 1 : 0;
    morph::dilate(unc.data(), h, w, kernels[step], dil.data());
    for (Index j = 0; j < hw; ++j) {
      const std::uint8_t r = dil[static_cast<std::size_t>(j)] && u[j];
      if (masks[step]) masks[step][j] = r;
      if (r) {
        alpha[j] = src(step + 1, j);
        choice[j] = static_cast<std::uint8_t>(step + 1);
      }
    }
  }
}

}  // namespace detail

/// A ← A8; R4 = D(A) ∧ U; A ← A(1−R4) + R4·A4; R1 = D(A) ∧ U; A ← A(1−R1) + R1·A1.
/// All inputs at full resolution [T, N, H, W]; `u` is U expanded to full resolution.
template <typename Scalar>
RefineResult<Scalar> progressive_refine(const Tensor<Scalar>& a8, const Tensor<Scalar>& a4, const Tensor<Scalar>& a1,
                                        const Tensor<std::uint8_t>& u, const RefineConfig& cfg = {}) {
  require(a8.shape() == a4.shape() && a8.shape() == a1.shape() && a8.shape() == u.shape() && a8.rank() == 4,
          "progressive_refine: all inputs must share one [T,N,H,W] shape");
  RefineResult<Scalar> r{Tensor<Scalar>(a8.shape()), std::vector<std::uint8_t>(static_cast<std::size_t>(a8.size())),
                         Tensor<std::uint8_t>(a8.shape()), Tensor<std::uint8_t>(a8.shape())};
  const Index h = a8.dim(2), w = a8.dim(3), hw = h * w;
  for (Index t = 0; t < a8.dim(0); ++t)
    for (Index i = 0; i < a8.dim(1); ++i) {
      const Index base = (t * a8.dim(1) + i) * hw;
      const Scalar* srcs[3] = {a8.data() + base, a4.data() + base, a1.data() + base};
      detail::refine_plane<Scalar>(
          h, w, u.data() + base, cfg, [&](int k, Index j) { return srcs[k][j]; }, r.alpha.data() + base,
          r.choice.data() + base, r.r4.data() + base, r.r1.data() + base);
    }
  return r;
}

/// Differentiable form: gradients flow to whichever input was selected.
template <typename Scalar>
ad::Var<Scalar> progressive_refine(const ad::Var<Scalar>& a8, const ad::Var<Scalar>& a4, const ad::Var<Scalar>& a1,
                                   const Tensor<std::uint8_t>& u, const RefineConfig& cfg = {}) {
  auto r = progressive_refine(a8->value, a4->value, a1->value, u, cfg);
  return ad::select_sources<Scalar>({a8, a4, a1}, std::move(r.choice));
}

}  // namespace maggie
