#pragma once

// Temporal consistency: bidirectional Conv-GRU feature aggregation, temporal
// sparsity prediction and forward/backward matte fusion.

#include "maggie/nn.hpp"

#include <cstdint>

namespace maggie {

/// Conv-GRU cell shared by the forward and backward passes.
///   z, r = σ(conv([x, h])),  h̃ = tanh(conv([x, r ⊙ h])),  h' = (1 − z) h + z h̃
template <typename Scalar>
struct ConvGRU {
  Conv2d<Scalar> gates, candidate;
  Index channels = 0;

  ConvGRU() = default;
  ConvGRU(ParameterSet<Scalar>& params, const std::string& name, Index ch, std::mt19937_64& rng)
      : gates(params, name + ".gates", 2 * ch, 2 * ch, 3, rng, 1, 1.0),
        candidate(params, name + ".candidate", 2 * ch, ch, 3, rng, 1, 1.0),
        channels(ch) {}

  /// x, h: [B, C, h, w].
  ad::Var<Scalar> step(const ad::Var<Scalar>& x, const ad::Var<Scalar>& h) const {
    auto zr = ad::sigmoid(gates(ad::concat<Scalar>({x, h}, 1)));
    auto z = ad::slice(zr, 1, 0, channels);
    auto r = ad::slice(zr, 1, channels, channels);
    auto cand = ad::tanh(candidate(ad::concat<Scalar>({x, ad::mul(r, h)}, 1)));
    return ad::add(h, ad::mul(z, ad::sub(cand, h)));
  }
};

template <typename Scalar>
struct TemporalOutput {
  ad::Var<Scalar> features;  // [T, C, h, w]
  ad::Var<Scalar> carry;     // [1, C, h, w]
};

template <typename Scalar>
ad::Var<Scalar> zero_state(const ad::Var<Scalar>& seq) {
  return ad::constant(Tensor<Scalar>({1, seq->dim(1), seq->dim(2), seq->dim(3)}));
}

/// Processes f8_seq [T, C, h, w] as one window: forward from `carry`
/// (zero if null), backward from zero, output = mean of both directions.
/// The returned carry is the forward state after frame T − 1 − overlap, i.e.
/// the state preceding the first frame shared with the next window.
template <typename Scalar>
TemporalOutput<Scalar> temporal_aggregate(const ad::Var<Scalar>& f8_seq, ad::Var<Scalar> carry,
                                          const ConvGRU<Scalar>& gru, Index overlap = 0) {
  require(f8_seq->value.rank() == 4 && f8_seq->dim(0) >= 1, "temporal_aggregate: need [T>=1, C, h, w]");
  require(overlap >= 0, "temporal_aggregate: overlap must be >= 0");
  const Index frames = f8_seq->dim(0);
  if (!carry) carry = zero_state(f8_seq);
  std::vector<ad::Var<Scalar>> fwd(static_cast<std::size_t>(frames)), bwd(static_cast<std::size_t>(frames));
  ad::Var<Scalar> h = carry, next_carry = carry;
  for (Index t = 0; t < frames; ++t) {
    h = gru.step(ad::slice(f8_seq, 0, t, 1), h);
    fwd[static_cast<std::size_t>(t)] = h;
    if (t == frames - 1 - overlap) next_carry = h;
  }
  h = zero_state(f8_seq);
  for (Index t = frames - 1; t >= 0; --t) {
    h = gru.step(ad::slice(f8_seq, 0, t, 1), h);
    bwd[static_cast<std::size_t>(t)] = h;
  }
  std::vector<ad::Var<Scalar>> out;
  for (Index t = 0; t < frames; ++t)
    out.push_back(ad::scale(ad::add(fwd[static_cast<std::size_t>(t)], bwd[static_cast<std::size_t>(t)]), Scalar(0.5)));
  return {ad::concat(out, 0), next_carry};
}

/// Sliding windows {t−1, t, t+1}: frame t's output averages the forward state
/// (carried across windows) with a backward pass started at the window end.
template <typename Scalar>
ad::Var<Scalar> temporal_windowed(const ad::Var<Scalar>& f8_seq, const ConvGRU<Scalar>& gru) {
  const Index frames = f8_seq->dim(0);
  auto zero = zero_state(f8_seq);
  std::vector<ad::Var<Scalar>> xs, out;
  for (Index t = 0; t < frames; ++t) xs.push_back(ad::slice(f8_seq, 0, t, 1));
  ad::Var<Scalar> h = zero;
  for (Index t = 0; t < frames; ++t) {
    h = gru.step(xs[static_cast<std::size_t>(t)], h);
    ad::Var<Scalar> b = zero;
    if (t + 1 < frames) b = gru.step(xs[static_cast<std::size_t>(t + 1)], b);
    b = gru.step(xs[static_cast<std::size_t>(t)], b);
    out.push_back(ad::scale(ad::add(h, b), Scalar(0.5)));
  }
  return ad::concat(out, 0);
}

// ---------------------------------------------------------------------------
// Temporal sparsity

template <typename Scalar>
struct DeltaNet {
  Conv2d<Scalar> conv1, conv2, conv3;
  Norm<Scalar> norm1, norm2;

  DeltaNet() = default;
  DeltaNet(ParameterSet<Scalar>& params, const std::string& name, Index ch, std::mt19937_64& rng) {
    const Index mid = std::max<Index>(ch / 2, 1);
    conv1 = Conv2d<Scalar>(params, name + ".conv1", 2 * ch, mid, 3, rng);
    norm1 = Norm<Scalar>(params, name + ".norm1", mid);
    conv2 = Conv2d<Scalar>(params, name + ".conv2", mid, mid, 3, rng);
    norm2 = Norm<Scalar>(params, name + ".norm2", mid);
    conv3 = Conv2d<Scalar>(params, name + ".conv3", mid, 1, 3, rng, 1, 1.0);
  }
};

template <typename Scalar>
struct DeltaPrediction {
  ad::Var<Scalar> prob;        // [T−1, 1, H, W] in (0, 1)
  Tensor<std::uint8_t> binary;  // [T−1, 1, H, W]
};

template <typename Scalar>
Tensor<std::uint8_t> binarize_delta(const Tensor<Scalar>& prob) {
  Tensor<std::uint8_t> out(prob.shape());
  for (Index k = 0; k < prob.size(); ++k) out[k] = prob[k] >= Scalar(0.5) ? 1 : 0;
  return out;
}

/// Δ for consecutive pairs of enriched [T, C, h, w]; entry t−1 compares
/// frames t−1 and t. Probabilities are upsampled by `factor` to full size.
template <typename Scalar>
DeltaPrediction<Scalar> predict_delta(const ad::Var<Scalar>& enriched, const DeltaNet<Scalar>& net, Index factor = 8) {
  const Index frames = enriched->dim(0);
  require(frames >= 2, "predict_delta: need at least two frames");
  auto prev = ad::slice(enriched, 0, 0, frames - 1);
  auto cur = ad::slice(enriched, 0, 1, frames - 1);
  auto x = ad::concat<Scalar>({prev, cur}, 1);
  x = ad::relu(net.norm1.channels(net.conv1(x)));
  x = ad::relu(net.norm2.channels(net.conv2(x)));
  auto prob = ad::upsample_nearest(ad::sigmoid(net.conv3(x)), factor);
  auto bin = binarize_delta(prob->value);
  return {prob, std::move(bin)};
}

/// Single-pair form: enriched_prev, enriched_cur [C, h, w] -> binary [H, W].
template <typename Scalar>
Tensor<std::uint8_t> predict_delta_pair(const Tensor<Scalar>& prev, const Tensor<Scalar>& cur,
                                        const DeltaNet<Scalar>& net, Index factor = 8) {
  require(prev.shape() == cur.shape() && prev.rank() == 3, "predict_delta: mismatched [C,h,w] inputs");
  ad::NoGradGuard ng;
  Shape s{1, prev.dim(0), prev.dim(1), prev.dim(2)};
  auto seq = ad::concat<Scalar>({ad::constant(prev.reshaped(s)), ad::constant(cur.reshaped(s))}, 0);
  auto d = predict_delta(seq, net, factor);
  return d.binary.reshaped({d.binary.dim(2), d.binary.dim(3)});
}

// ---------------------------------------------------------------------------
// Forward/backward fusion

struct FusionResult {
  std::vector<std::uint8_t> source_frame;  // frame index each output element is read from
};

/// Source frame per element of a [T, N, H, W] sequence given Δ [T−1, 1, H, W].
///   A^f(t) = Δ(t) ? A(t) : A^f(t−1),   A^f(0) = A(0)
///   A^b(t) = Δ(t+1) ? A(t) : A^b(t+1), A^b(T−1) = A(T−1)
///   A^temp = A where A^f ≠ A^b, else A^f
template <typename Scalar>
std::vector<std::uint8_t> fusion_sources(const Tensor<Scalar>& a, const Tensor<std::uint8_t>& delta) {
  require(a.rank() == 4, "fuse_mattes: alpha must be [T, N, H, W]");
  const Index frames = a.dim(0), n = a.dim(1), hw = a.dim(2) * a.dim(3);
  require(frames <= 256, "fuse_mattes: at most 256 frames");
  require(frames < 2 || (delta.rank() == 4 && delta.dim(0) == frames - 1 && delta.dim(2) == a.dim(2) &&
                         delta.dim(3) == a.dim(3)),
          "fuse_mattes: delta must be [T-1, 1, H, W]");
  std::vector<std::uint8_t> src(static_cast<std::size_t>(a.size()));
  std::vector<std::uint8_t> f(static_cast<std::size_t>(frames)), b(static_cast<std::size_t>(frames));
  for (Index i = 0; i < n; ++i)
    for (Index p = 0; p < hw; ++p) {
      auto d = [&](Index t) { return delta[(t - 1) * hw + p] != 0; };  // Δ(t), 1 ≤ t ≤ T−1
      f[0] = 0;
      for (Index t = 1; t < frames; ++t)
        f[static_cast<std::size_t>(t)] = d(t) ? static_cast<std::uint8_t>(t) : f[static_cast<std::size_t>(t - 1)];
      b[static_cast<std::size_t>(frames - 1)] = static_cast<std::uint8_t>(frames - 1);
      for (Index t = frames - 2; t >= 0; --t)
        b[static_cast<std::size_t>(t)] = d(t + 1) ? static_cast<std::uint8_t>(t) : b[static_cast<std::size_t>(t + 1)];
      for (Index t = 0; t < frames; ++t) {
        const auto ft = f[static_cast<std::size_t>(t)], bt = b[static_cast<std::size_t>(t)];
        const Index base = i * hw + p;
        const bool differ = a[ft * n * hw + base] != a[bt * n * hw + base];
        src[static_cast<std::size_t>(t * n * hw + base)] = differ ? static_cast<std::uint8_t>(t) : ft;
      }
    }
  return src;
}

template <typename Scalar>
Tensor<Scalar> fuse_mattes(const Tensor<Scalar>& a, const Tensor<std::uint8_t>& delta) {
  auto src = fusion_sources(a, delta);
  const Index per = a.size() / std::max<Index>(a.dim(0), 1);
  Tensor<Scalar> out(a.shape());
  for (Index k = 0; k < a.size(); ++k) out[k] = a[src[static_cast<std::size_t>(k)] * per + k % per];
  return out;
}

template <typename Scalar>
ad::Var<Scalar> fuse_mattes(const ad::Var<Scalar>& a, const Tensor<std::uint8_t>& delta) {
  return ad::select_frames(a, fusion_sources(a->value, delta));
}

/// Δ^gt(t) = max_i (|A(t−1, i) − A(t, i)| > β), returned as [T−1, 1, H, W].
template <typename Scalar>
Tensor<std::uint8_t> delta_ground_truth(const Tensor<Scalar>& gt, double beta = 0.001) {
  require(gt.rank() == 4, "delta_ground_truth: expected [T, N, H, W]");
  require(gt.dim(0) >= 2, "delta_ground_truth: need at least two frames");
  const Index frames = gt.dim(0), n = gt.dim(1), hw = gt.dim(2) * gt.dim(3);
  Tensor<std::uint8_t> out({frames - 1, 1, gt.dim(2), gt.dim(3)});
  for (Index t = 1; t < frames; ++t)
    for (Index i = 0; i < n; ++i) {
      const Scalar* a = gt.plane(t - 1, i);
      const Scalar* b = gt.plane(t, i);
      std::uint8_t* o = out.data() + (t - 1) * hw;
      for (Index p = 0; p < hw; ++p)
        if (std::abs(static_cast<double>(a[p]) - static_cast<double>(b[p])) > beta) o[p] = 1;
    }
  return out;
}

}  // namespace maggie
