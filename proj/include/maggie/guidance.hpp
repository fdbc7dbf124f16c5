#pragma once

// Instance guidance: binary masks -> learnable identity embedding channels.

#include "maggie/nn.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace maggie {

/// Binary per-instance guidance masks, [T, N, H, W], at most one instance
/// active per pixel. All-zero pixels are background.
class InstanceMaskSet {
 public:
  InstanceMaskSet() = default;
  explicit InstanceMaskSet(Tensor<std::uint8_t> data) : data_(std::move(data)) { validate(); }

  /// Builds from real-valued data; every value must be exactly 0 or 1.
  template <typename Scalar>
  static InstanceMaskSet from_real(const Tensor<Scalar>& t) {
    Tensor<std::uint8_t> d(t.shape());
    for (Index k = 0; k < t.size(); ++k) {
      if (t[k] != Scalar(0) && t[k] != Scalar(1)) throw ValidationError("mask values must be binary");
      d[k] = t[k] != Scalar(0) ? 1 : 0;
    }
    return InstanceMaskSet(std::move(d));
  }

  const Tensor<std::uint8_t>& tensor() const { return data_; }
  Index frames() const { return data_.dim(0); }
  Index instances() const { return data_.dim(1); }
  Index height() const { return data_.dim(2); }
  Index width() const { return data_.dim(3); }

  template <typename Scalar>
  Tensor<Scalar> as() const {
    return data_.cast<Scalar>();
  }

  /// Channel i of the result is channel perm[i] of this set.
  InstanceMaskSet permuted(const std::vector<Index>& perm) const {
    require(static_cast<Index>(perm.size()) == instances(), "permutation size mismatch");
    Tensor<std::uint8_t> out(data_.shape());
    const Index hw = height() * width();
    for (Index t = 0; t < frames(); ++t)
      for (Index i = 0; i < instances(); ++i)
        std::copy_n(data_.plane(t, perm[static_cast<std::size_t>(i)]), hw, out.plane(t, i));
    return InstanceMaskSet(std::move(out));
  }

  /// Max-pool downscale: a coarse cell belongs to instance i if any covered
  /// pixel does. The result may violate one-hot where instances meet, so the
  /// raw tensor is returned rather than a validated set.
  Tensor<std::uint8_t> downscaled_max(Index factor) const {
    require(height() % factor == 0 && width() % factor == 0, "mask size not divisible by scale");
    const Index h = height() / factor, w = width() / factor;
    Tensor<std::uint8_t> out({frames(), instances(), h, w});
    for (Index t = 0; t < frames(); ++t)
      for (Index i = 0; i < instances(); ++i)
        for (Index y = 0; y < height(); ++y)
          for (Index x = 0; x < width(); ++x)
            if (data_(t, i, y, x)) out(t, i, y / factor, x / factor) = 1;
    return out;
  }

 private:
  void validate() const {
    require(data_.rank() == 4, "InstanceMaskSet must be rank 4 [T,N,H,W]");
    const Index hw = data_.dim(2) * data_.dim(3);
    for (Index t = 0; t < data_.dim(0); ++t)
      for (Index p = 0; p < hw; ++p) {
        int active = 0;
        for (Index i = 0; i < data_.dim(1); ++i) {
          const std::uint8_t v = data_.plane(t, i)[p];
          if (v > 1) throw ValidationError("mask values must be binary");
          active += v;
        }
        if (active > 1) throw ValidationError("masks are not at-most-one-hot at a pixel");
      }
  }

  Tensor<std::uint8_t> data_;
};

/// Learnable identity embeddings, one row per instance slot.
template <typename Scalar>
struct EmbeddingTable {
  static constexpr Index kDefaultSlots = 10;
  static constexpr Index kDefaultChannels = 3;

  ad::Var<Scalar> table;  // [N_max, C_e]

  EmbeddingTable() = default;
  EmbeddingTable(ParameterSet<Scalar>& params, std::mt19937_64& rng, Index slots = kDefaultSlots,
                 Index channels = kDefaultChannels) {
    table = params.add("guidance.embedding", gaussian<Scalar>({slots, channels}, 0.02, rng));
  }
  Index slots() const { return table->dim(0); }
  Index channels() const { return table->dim(1); }
};

/// E(t, :, p) = sum_i M(t, i, p) D(i, :), returned as [T, C_e, H, W].
template <typename Scalar>
ad::Var<Scalar> embed_masks(const InstanceMaskSet& masks, const ad::Var<Scalar>& table) {
  const Index n = masks.instances();
  if (n > table->dim(0))
    throw ValidationError("instance count " + std::to_string(n) + " exceeds embedding capacity " +
                          std::to_string(table->dim(0)));
  const Index frames = masks.frames(), hw = masks.height() * masks.width(), ce = table->dim(1);
  if (n == 0) return ad::constant(Tensor<Scalar>({frames, ce, masks.height(), masks.width()}));
  auto rows_t = ad::transpose(ad::slice(table, 0, 0, n));  // [C_e, N]
  std::vector<ad::Var<Scalar>> per_frame;
  for (Index t = 0; t < frames; ++t) {
    Tensor<Scalar> m({n, hw});
    for (Index i = 0; i < n; ++i)
      for (Index p = 0; p < hw; ++p) m(i, p) = static_cast<Scalar>(masks.tensor().plane(t, i)[p]);
    per_frame.push_back(ad::reshape(ad::matmul(rows_t, ad::constant(std::move(m))), {1, ce, masks.height(), masks.width()}));
  }
  return ad::concat(per_frame, 0);
}

/// Channel concatenation of image [T,3,H,W] and embedding [T,C_e,H,W].
template <typename Scalar>
ad::Var<Scalar> build_input(const ad::Var<Scalar>& frames, const ad::Var<Scalar>& embedding) {
  require(frames->value.rank() == 4 && embedding->value.rank() == 4, "build_input: rank-4 tensors required");
  require(frames->dim(1) == 3, "build_input: image must have 3 channels");
  require(frames->dim(0) == embedding->dim(0) && frames->dim(2) == embedding->dim(2) &&
              frames->dim(3) == embedding->dim(3),
          "build_input: frame/embedding shape mismatch " + shape_str(frames->shape()) + " vs " +
              shape_str(embedding->shape()));
  return ad::concat<Scalar>({frames, embedding}, 1);
}

}  // namespace maggie
