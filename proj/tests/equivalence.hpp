#pragma once

// Randomised sparse-versus-dense comparisons shared by the unit tests and
// the acceptance binary. Each returns the largest absolute deviation.

#include "check.hpp"
#include "reference.hpp"

namespace maggie::equivalence {

struct SparseCase {
  Index frames, instances, h8, w8;
  Index c8 = 6, c4 = 5, c2 = 4, c1 = 3;
  ParameterSet<double> params;
  PointwiseMLP<double> mlp;
  InstanceGuidanceParams<double> ig;
  DetailAggregationParams<double> agg;
  SparseMatteHeadParams<double> head;
  UncertaintySet u;
  std::mt19937_64 rng;

  explicit SparseCase(std::uint64_t seed) : rng(seed) {
    std::uniform_int_distribution<Index> small(1, 3), side(1, 4);
    frames = small(rng) == 3 ? 2 : 1;
    instances = small(rng);
    h8 = side(rng);
    w8 = side(rng);
    mlp = PointwiseMLP<double>(params, "mlp", c8, c8, c8, rng);
    ig = InstanceGuidanceParams<double>(params, "ig", c8, c4, rng);
    agg = DetailAggregationParams<double>(params, "agg", c4, c2, c2, rng);
    head = SparseMatteHeadParams<double>(params, "head", c2, rng);
    // Non-trivial biases so they take part in the comparison.
    for (const auto& e : params.entries())
      if (e.name.ends_with(".bias") || e.name.ends_with(".beta")) e.var->value = test::normal(e.var->shape(), rng, 0.3);
    auto a8 = test::uniform({frames, instances, h8, w8}, rng);
    std::bernoulli_distribution certain(0.4);
    for (Index k = 0; k < a8.size(); ++k)
      if (certain(rng)) a8[k] = a8[k] < 0.5 ? 0.0 : 1.0;
    u = extract_uncertainty(a8, 1.0 / 255.0);
  }

  GridDims dims8() const { return {frames, instances, h8, w8}; }
  /// Random features on U's coordinates lifted by `ups` 2× upsamplings.
  SparseFeatureMap<double> random_map(int ups, Index channels) {
    auto layout = std::make_shared<const SparseLayout>(u.indices, dims8(), 8);
    for (int k = 0; k < ups; ++k) layout = SparseLayout::upsampled(*layout);
    return {layout, ad::constant(test::normal({layout->size(), channels}, rng))};
  }
};

inline double dense_to_sparse(std::uint64_t seed) {
  SparseCase c(seed);
  const auto enriched = test::normal({c.frames, c.c8, c.h8, c.w8}, c.rng);
  const auto tokens = test::normal({c.frames, c.instances, c.c8}, c.rng);
  auto x8 = maggie::dense_to_sparse(ad::constant(enriched), ad::constant(tokens), c.u, c.mlp);
  auto ref = reference::dense_to_sparse(enriched, tokens, c.u, c.mlp);
  return reference::compare(ref, c.dims8(), x8.coords(), x8.values->value);
}

inline double instance_guidance(std::uint64_t seed) {
  SparseCase c(seed);
  auto x8 = c.random_map(0, c.c8);
  const auto f4 = test::normal({c.frames, c.c4, 2 * c.h8, 2 * c.w8}, c.rng);
  auto x4 = maggie::instance_guidance(x8, ad::constant(f4), c.ig);
  auto ref = reference::instance_guidance(reference::from_sparse(c.dims8(), x8.coords(), x8.values->value), f4,
                                          c.instances, c.ig);
  return reference::compare(ref, x4.layout->dims(), x4.coords(), x4.values->value);
}

inline double detail_aggregate(std::uint64_t seed) {
  SparseCase c(seed);
  auto x4 = c.random_map(1, c.c4);
  const auto f2 = test::normal({c.frames, c.c2, 4 * c.h8, 4 * c.w8}, c.rng);
  auto x2 = maggie::detail_aggregate(x4, ad::constant(f2), c.agg);
  auto ref = reference::detail_aggregate(reference::from_sparse(x4.layout->dims(), x4.coords(), x4.values->value), f2,
                                         c.instances, c.agg);
  return reference::compare(ref, x2.layout->dims(), x2.coords(), x2.values->value);
}

inline double sparse_matte_head(std::uint64_t seed) {
  SparseCase c(seed);
  auto x2 = c.random_map(2, c.c2);
  auto out = maggie::sparse_matte_head(x2, c.head);
  auto ref = reference::sparse_matte_head(reference::from_sparse(x2.layout->dims(), x2.coords(), x2.values->value), c.head);
  double err = reference::compare(ref, x2.layout->dims(), x2.coords(), out.probs->value);
  // Zero off the support.
  const auto on = reference::active_grid(x2.layout->dims(), x2.coords(), 1).active;
  for (Index k = 0; k < out.dense->value.size(); ++k)
    if (!on[static_cast<std::size_t>(k)]) err = std::max(err, std::abs(out.dense->value[k]));
  return err;
}

/// Random PRM case (≤16×16, T ≤ 3, N ≤ 3, kernels 3/3) against the
/// step-by-step chain.
inline double progressive_refine(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> small(1, 3), side(1, 2);
  const Index frames = small(rng), n = small(rng), h8 = side(rng), w8 = side(rng);
  const Index h = 8 * h8, w = 8 * w8;
  auto coarse = test::uniform({frames, n, h8, w8}, rng);
  std::bernoulli_distribution certain(0.5);
  for (Index k = 0; k < coarse.size(); ++k)
    if (certain(rng)) coarse[k] = coarse[k] < 0.5 ? 0.0 : 1.0;
  const auto u = extract_uncertainty(coarse, 1.0 / 255.0);
  const auto u_full = upscale_uncertainty(u, 8);
  auto a8 = ad::upsample_nearest(ad::constant(coarse), 8)->value;
  auto a4 = test::uniform({frames, n, h, w}, rng);
  auto a1 = test::uniform({frames, n, h, w}, rng);
  std::bernoulli_distribution saturate(0.3);
  for (Index k = 0; k < a4.size(); ++k) {
    if (saturate(rng)) a4[k] = std::round(a4[k]);
    if (saturate(rng)) a1[k] = std::round(a1[k]);
  }
  RefineConfig cfg{3, 3, 1.0 / 255.0};
  auto got = maggie::progressive_refine(a8, a4, a1, u_full, cfg).alpha;
  double err = 0;
  const Index hw = h * w;
  for (Index t = 0; t < frames; ++t)
    for (Index i = 0; i < n; ++i) {
      auto plane = [&](const TensorD& x) { return std::vector<double>(x.plane(t, i), x.plane(t, i) + hw); };
      std::vector<std::uint8_t> up(u_full.plane(t, i), u_full.plane(t, i) + hw);
      auto ref = reference::progressive_refine(plane(a8), plane(a4), plane(a1), up, h, w, 3, 3, cfg.eps);
      for (Index j = 0; j < hw; ++j) err = std::max(err, std::abs(ref[static_cast<std::size_t>(j)] - got.plane(t, i)[j]));
    }
  return err;
}

/// Random (A, Δ) sequence against the per-pixel recursions. Returns the
/// number of mismatching elements.
inline Index fusion(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> len(1, 6), small(1, 3), side(1, 4);
  const Index frames = len(rng), n = small(rng), h = side(rng), w = side(rng), hw = h * w;
  // Few distinct values so equal A^f and A^b values occur.
  auto a = test::uniform({frames, n, h, w}, rng);
  for (Index k = 0; k < a.size(); ++k) a[k] = std::floor(a[k] * 3) / 2;
  const auto delta = test::bits({std::max<Index>(frames - 1, 0), 1, h, w}, rng, 0.4);
  Tensor<std::uint8_t> d = frames >= 2 ? delta : Tensor<std::uint8_t>({0, 1, h, w});
  auto got = fuse_mattes(a, d);
  Index bad = 0;
  for (Index i = 0; i < n; ++i)
    for (Index p = 0; p < hw; ++p) {
      std::vector<double> seq(static_cast<std::size_t>(frames));
      std::vector<int> dl(static_cast<std::size_t>(frames), 0);
      for (Index t = 0; t < frames; ++t) seq[static_cast<std::size_t>(t)] = a.plane(t, i)[p];
      for (Index t = 1; t < frames; ++t) dl[static_cast<std::size_t>(t)] = d[(t - 1) * hw + p];
      auto ref = reference::fuse_pixel(seq, dl);
      for (Index t = 0; t < frames; ++t)
        if (ref[static_cast<std::size_t>(t)] != got.plane(t, i)[p]) ++bad;
    }
  return bad;
}

}  // namespace maggie::equivalence
