#pragma once

// Full network: guidance embedding → encoder → (temporal aggregation) →
// instance matte decoder → sparse refinement → progressive refinement →
// (forward/backward fusion), plus the composite training objective.

#include "maggie/decoder.hpp"
#include "maggie/encoder.hpp"
#include "maggie/guidance.hpp"
#include "maggie/losses.hpp"
#include "maggie/sparse.hpp"
#include "maggie/temporal.hpp"

#include <algorithm>
#include <cstdint>
#include <optional>

namespace maggie {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  Index embed_slots = 10;
  Index embed_channels = 3;
  RefineConfig refine;
  bool temporal_gru = true;
  bool temporal_fusion = true;

  Index c1() const { return encoder.channels[0]; }
  Index c2() const { return encoder.channels[1]; }
  Index c4() const { return encoder.channels[2]; }
  Index c8() const { return encoder.channels[3]; }
};

struct SparsityStats {
  double uncertain = 0;  // |U| / (T·N·h₈·w₈), equal at every sparse scale
  double refined4 = 0;   // fraction of full-resolution values with R₄ = 1
  double refined1 = 0;   // fraction with R₁ = 1
  Index entries8 = 0;
};

template <typename Scalar>
struct ModelOutput {
  CoarseMatteBundle<Scalar> coarse;
  UncertaintySet uncertainty;
  SparseMatte<Scalar> a4;  // emitted at scale 2
  SparseMatte<Scalar> a1;  // full resolution
  ad::Var<Scalar> refined;  // PRM output [T, N, H, W]
  ad::Var<Scalar> alpha;    // final output (fused when temporal fusion applies)
  std::optional<DeltaPrediction<Scalar>> delta;
  SparsityStats sparsity;
};

template <typename Scalar>
class MaggieModel {
 public:
  MaggieModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    require(cfg.decoder.channels == cfg.c8(), "decoder width must equal the scale-8 encoder width");
    require(cfg.encoder.in_channels == 3 + cfg.embed_channels, "encoder input must be 3 + embedding channels");
    std::mt19937_64 rng(seed);
    embedding_ = EmbeddingTable<Scalar>(params_, rng, cfg.embed_slots, cfg.embed_channels);
    encoder_ = Encoder<Scalar>(params_, cfg.encoder, rng);
    gru_ = ConvGRU<Scalar>(params_, "temporal.gru", cfg.c8(), rng);
    decoder_ = InstanceMatteDecoder<Scalar>(params_, cfg.decoder, rng);
    to_sparse_ = PointwiseMLP<Scalar>(params_, "sparse.to_sparse", cfg.c8(), cfg.c8(), cfg.c8(), rng);
    guidance_ = InstanceGuidanceParams<Scalar>(params_, "sparse.guidance", cfg.c8(), cfg.c4(), rng);
    agg2_ = DetailAggregationParams<Scalar>(params_, "sparse.agg2", cfg.c4(), cfg.c2(), cfg.c2(), rng);
    head4_ = SparseMatteHeadParams<Scalar>(params_, "sparse.head4", cfg.c2(), rng);
    agg1_ = DetailAggregationParams<Scalar>(params_, "sparse.agg1", cfg.c2(), cfg.c1(), cfg.c1(), rng);
    head1_ = SparseMatteHeadParams<Scalar>(params_, "sparse.head1", cfg.c1(), rng);
    delta_ = DeltaNet<Scalar>(params_, "temporal.delta", cfg.c8(), rng);
  }

  MaggieModel(const MaggieModel&) = delete;
  MaggieModel& operator=(const MaggieModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }
  const InstanceMatteDecoder<Scalar>& decoder() const { return decoder_; }

  /// frames: [T, 3, H, W] in [0, 1]; masks: [T, N, H, W].
  ModelOutput<Scalar> forward(const Tensor<Scalar>& frames, const InstanceMaskSet& masks) const {
    require(frames.rank() == 4 && frames.dim(1) == 3, "frames must be [T, 3, H, W]");
    require(masks.frames() == frames.dim(0) && masks.height() == frames.dim(2) && masks.width() == frames.dim(3),
            "masks do not match frames: " + shape_str(masks.tensor().shape()) + " vs " + shape_str(frames.shape()));
    if (masks.instances() == 0) throw ValidationError("at least one instance mask is required");
    const Index T = frames.dim(0), H = frames.dim(2);

    auto input = build_input(ad::constant(frames), embed_masks(masks, embedding_.table));
    auto pyr = encoder_(input);
    auto f8 = cfg_.temporal_gru ? temporal_windowed(pyr.f8, gru_) : pyr.f8;

    ModelOutput<Scalar> out;
    out.coarse = decoder_(f8, masks.downscaled_max(8));
    out.uncertainty = extract_uncertainty(out.coarse.a8->value, cfg_.refine.eps);

    auto x8 = dense_to_sparse(out.coarse.enriched, out.coarse.tokens, out.uncertainty, to_sparse_);
    auto x4 = instance_guidance(x8, pyr.f4, guidance_);
    auto x2 = detail_aggregate(x4, pyr.f2, agg2_);
    out.a4 = sparse_matte_head(x2, head4_);
    auto x1 = detail_aggregate(x2, pyr.f1, agg1_);
    out.a1 = sparse_matte_head(x1, head1_);

    auto a8_full = ad::upsample_nearest(out.coarse.a8, 8);
    auto a4_full = ad::upsample_nearest(out.a4.dense, 2);
    auto u_full = upscale_uncertainty(out.uncertainty, 8);
    auto prm = progressive_refine(a8_full->value, a4_full->value, out.a1.dense->value, u_full, cfg_.refine);
    out.refined = ad::select_sources<Scalar>({a8_full, a4_full, out.a1.dense}, std::move(prm.choice));

    const double total = static_cast<double>(out.refined->value.size());
    out.sparsity.entries8 = out.uncertainty.size();
    out.sparsity.uncertain = static_cast<double>(out.uncertainty.size()) / static_cast<double>(out.coarse.a8->value.size());
    out.sparsity.refined4 = static_cast<double>(std::count(prm.r4.data(), prm.r4.data() + prm.r4.size(), 1)) / total;
    out.sparsity.refined1 = static_cast<double>(std::count(prm.r1.data(), prm.r1.data() + prm.r1.size(), 1)) / total;

    out.alpha = out.refined;
    if (cfg_.temporal_fusion && T >= 2) {
      out.delta = predict_delta(out.coarse.enriched, delta_, H / out.coarse.enriched->dim(2));
      out.alpha = fuse_mattes(out.refined, out.delta->binary);
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  ParameterSet<Scalar> params_;
  EmbeddingTable<Scalar> embedding_;
  Encoder<Scalar> encoder_;
  ConvGRU<Scalar> gru_;
  InstanceMatteDecoder<Scalar> decoder_;
  PointwiseMLP<Scalar> to_sparse_;
  InstanceGuidanceParams<Scalar> guidance_;
  DetailAggregationParams<Scalar> agg2_, agg1_;
  SparseMatteHeadParams<Scalar> head4_, head1_;
  DeltaNet<Scalar> delta_;
};

/// Box-average downscale of [T, N, H, W] by an integer factor.
template <typename Scalar>
Tensor<Scalar> downscale_mean(const Tensor<Scalar>& a, Index factor) {
  require(a.dim(2) % factor == 0 && a.dim(3) % factor == 0, "downscale_mean: size not divisible");
  const Index h = a.dim(2) / factor, w = a.dim(3) / factor;
  Tensor<Scalar> out({a.dim(0), a.dim(1), h, w});
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (Index t = 0; t < a.dim(0); ++t)
    for (Index i = 0; i < a.dim(1); ++i)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          double s = 0;
          for (Index dy = 0; dy < factor; ++dy)
            for (Index dx = 0; dx < factor; ++dx) s += static_cast<double>(a(t, i, y * factor + dy, x * factor + dx));
          out(t, i, y, x) = static_cast<Scalar>(s * inv);
        }
  return out;
}

/// Ground-truth values of `gt` (at the sparse matte's grid) at its coordinates.
template <typename Scalar>
Tensor<Scalar> gather_targets(const SparseMatte<Scalar>& m, const Tensor<Scalar>& gt) {
  require(gt.dim(2) == m.layout->dims().height && gt.dim(3) == m.layout->dims().width,
          "gather_targets: grid mismatch");
  const auto idx = m.layout->flat_index();
  Tensor<Scalar> out({static_cast<Index>(idx.size()), 1});
  for (std::size_t p = 0; p < idx.size(); ++p) out[static_cast<Index>(p)] = gt[idx[p]];
  return out;
}

/// Composite objective across all predicted scales. gt: [T, N, H, W].
template <typename Scalar>
LossTotal<Scalar> training_loss(const ModelOutput<Scalar>& out, const Tensor<Scalar>& gt, const LossWeights& w) {
  w.validate();
  require(out.alpha->shape() == gt.shape(), "training_loss: ground truth shape mismatch");
  const Tensor<Scalar> gt8 = downscale_mean(gt, 8);
  const Tensor<Scalar> gt2 = downscale_mean(gt, 2);
  const Tensor<Scalar> t4 = gather_targets(out.a4, gt2), t1 = gather_targets(out.a1, gt);
  std::vector<LossTerm<Scalar>> terms{
      {"l1_coarse", w.l1, weighted_coarse_loss(out.coarse.a8, gt8, w.gamma)},
      {"bce_coarse", w.bce, relative_entropy_loss(out.coarse.a8, gt8)},
      {"attention", w.att, attention_loss(out.coarse.aff, gt8)},
      {"l1_sparse4", w.l1, l1_loss(out.a4.probs, t4)},
      {"bce_sparse4", w.bce, relative_entropy_loss(out.a4.probs, t4)},
      {"l1_sparse1", w.l1, l1_loss(out.a1.probs, t1)},
      {"bce_sparse1", w.bce, relative_entropy_loss(out.a1.probs, t1)},
      {"l1_final", w.l1, l1_loss(out.alpha, gt)},
      {"laplacian", w.lap, laplacian_loss(out.alpha, gt)},
      {"gradient", w.grad, gradient_loss(out.alpha, gt)},
  };
  if (gt.dim(0) >= 2) {
    terms.push_back({"dtssd", w.dtssd, dtssd_loss(out.alpha, gt)});
    if (out.delta) terms.push_back({"delta", w.delta, delta_loss(out.delta->prob, delta_ground_truth(gt))});
  }
  return total_loss(terms);
}

}  // namespace maggie
