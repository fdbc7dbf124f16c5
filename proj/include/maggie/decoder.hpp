#pragma once

// Instance Matte Decoder: instance tokens attend to coarse image features
// (and vice versa) and the coarse matte is the sigmoid of token·feature.

#include "maggie/nn.hpp"

#include <cmath>
#include <cstdint>

namespace maggie {

namespace ad {

/// logits + M ⊙ (col · 1ᵀ); logits, M: [L, S], col: [L, 1].
template <typename Scalar>
Var<Scalar> add_mask_term(const Var<Scalar>& logits, const Var<Scalar>& col, const Tensor<Scalar>& mask) {
  require(logits->shape() == mask.shape() && col->dim(0) == logits->dim(0), "add_mask_term: shape mismatch");
  Tensor<Scalar> out = logits->value;
  out.mat().array() += mask.mat().array().colwise() * col->value.flat();
  return make_node<Scalar>(std::move(out), {logits, col}, [mask](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->flat() += self.grad.flat();
    if (auto* g = grad_of(self, 1))
      g->flat() += (self.grad.mat().array() * mask.mat().array()).rowwise().sum();
  });
}

/// x + m · eᵀ; x: [S, C], m: [S] constant, e: [1, C].
template <typename Scalar>
Var<Scalar> add_outer(const Var<Scalar>& x, const Tensor<Scalar>& m, const Var<Scalar>& e) {
  require(m.size() == x->dim(0) && e->value.size() == x->dim(1), "add_outer: shape mismatch");
  Tensor<Scalar> out = x->value;
  out.mat().noalias() += m.flat().matrix() * e->value.flat().matrix().transpose();
  return make_node<Scalar>(std::move(out), {x, e}, [m](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->flat() += self.grad.flat();
    if (auto* g = grad_of(self, 1)) g->flat().matrix() += self.grad.mat().transpose() * m.flat().matrix();
  });
}

}  // namespace ad

/// softmax(Q Kᵀ / sqrt(C)) V for Q [L, C], K [S, C], V [S, C].
template <typename Scalar>
ad::Var<Scalar> scaled_dot_attention(const ad::Var<Scalar>& q, const ad::Var<Scalar>& k, const ad::Var<Scalar>& v) {
  require(q->value.rank() == 2 && k->value.rank() == 2 && v->value.rank() == 2, "attention: rank-2 inputs required");
  require(q->dim(1) == k->dim(1), "attention: query/key width mismatch");
  require(k->dim(0) == v->dim(0), "attention: key/value count mismatch");
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q->dim(1)));
  return ad::matmul(ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), scale)), v);
}

struct DecoderConfig {
  Index channels = 128;
  Index rounds = 2;
  Index heads = 1;
  // Guidance masks enter as a per-instance key embedding (and a foreground
  // embedding on feature queries). Off = masks only seed the tokens.
  bool mask_key_embedding = true;
};

template <typename Scalar>
struct CoarseMatteBundle {
  ad::Var<Scalar> a8;        // [T, N, h, w] in (0, 1)
  ad::Var<Scalar> enriched;  // [T, C, h, w]
  ad::Var<Scalar> tokens;    // [T, N, C] (after the output projection)
  ad::Var<Scalar> aff;       // [T, N, h*w], rows sum to 1
};

template <typename Scalar>
class InstanceMatteDecoder {
 public:
  InstanceMatteDecoder() = default;
  InstanceMatteDecoder(ParameterSet<Scalar>& params, const DecoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    require(cfg.channels % cfg.heads == 0, "decoder: channels must be divisible by heads");
    const Index c = cfg.channels;
    token_in_ = Linear<Scalar>(params, "decoder.token_in", c, c, rng);
    // Unit-scale bias: a token pooled from an empty mask still has spread
    // across channels, so its row normalisation stays well conditioned.
    token_in_.bias->value = gaussian<Scalar>({c}, 1.0, rng);
    mask_embed_ = params.add("decoder.mask_embed", gaussian<Scalar>({1, c}, 0.02, rng));
    for (Index r = 0; r < cfg.rounds; ++r) {
      const std::string p = "decoder.round" + std::to_string(r);
      Round rd;
      rd.self_attn = Block(params, p + ".self_attn", c, rng);
      rd.token_to_feature = Block(params, p + ".t2f", c, rng);
      rd.feature_to_token = Block(params, p + ".f2t", c, rng);
      rd.mlp1 = Linear<Scalar>(params, p + ".mlp1", c, c, rng, std::sqrt(2.0));
      rd.mlp2 = Linear<Scalar>(params, p + ".mlp2", c, c, rng);
      rd.norm_sa = Norm<Scalar>(params, p + ".norm_sa", c);
      rd.norm_ca = Norm<Scalar>(params, p + ".norm_ca", c);
      rd.norm_mlp = Norm<Scalar>(params, p + ".norm_mlp", c);
      rd.norm_feat = Norm<Scalar>(params, p + ".norm_feat", c);
      rounds_.push_back(std::move(rd));
    }
    token_out_ = Linear<Scalar>(params, "decoder.token_out", c, c, rng, 1.0);
  }

  const DecoderConfig& config() const { return cfg_; }
  const Linear<Scalar>& token_out() const { return token_out_; }

  /// f8: [T, C, h, w]; masks8: [T, N, h, w] binary (max-pooled guidance).
  CoarseMatteBundle<Scalar> operator()(const ad::Var<Scalar>& f8, const Tensor<std::uint8_t>& masks8) const {
    require(masks8.rank() == 4 && masks8.dim(1) > 0, "decoder: at least one instance is required");
    require(f8->dim(1) == cfg_.channels, "decoder: feature width mismatch");
    require(masks8.dim(0) == f8->dim(0) && masks8.dim(2) == f8->dim(2) && masks8.dim(3) == f8->dim(3),
            "decoder: mask grid does not match coarse features");
    const Index frames = f8->dim(0), n = masks8.dim(1), c = cfg_.channels, h = f8->dim(2), w = f8->dim(3);
    const Index s = h * w;
    std::vector<ad::Var<Scalar>> a8s, feats, toks, affs;
    for (Index t = 0; t < frames; ++t) {
      Tensor<Scalar> m({n, s}), pool({n, s}), fg({s});
      for (Index i = 0; i < n; ++i) {
        Index count = 0;
        for (Index p = 0; p < s; ++p) {
          m(i, p) = masks8.plane(t, i)[p];
          count += masks8.plane(t, i)[p];
          fg[p] = std::max(fg[p], m(i, p));
        }
        for (Index p = 0; p < s; ++p) pool(i, p) = count ? m(i, p) / static_cast<Scalar>(count) : Scalar(0);
      }
      auto feat = ad::transpose(ad::reshape(ad::slice(f8, 0, t, 1), {c, s}));  // [S, C]
      auto tokens = token_in_(ad::matmul(ad::constant(std::move(pool)), feat));
      ad::Var<Scalar> aff;
      for (const auto& rd : rounds_) {
        tokens = rd.norm_sa.rows(ad::add(tokens, attend(rd.self_attn, tokens, tokens, tokens, nullptr).out));
        auto ca = attend(rd.token_to_feature, tokens, feat, feat, cfg_.mask_key_embedding ? &m : nullptr);
        aff = ca.probs;
        tokens = rd.norm_ca.rows(ad::add(tokens, ca.out));
        tokens = rd.norm_mlp.rows(ad::add(tokens, rd.mlp2(ad::relu(rd.mlp1(tokens)))));
        auto fq = cfg_.mask_key_embedding ? ad::add_outer(feat, fg, mask_embed_) : feat;
        feat = rd.norm_feat.rows(ad::add(feat, attend(rd.feature_to_token, fq, tokens, tokens, nullptr).out));
      }
      auto out_tokens = token_out_(tokens);                                        // [N, C]
      // Scaled like attention logits so the sigmoid does not saturate early.
      auto logits = ad::scale(ad::matmul_nt(out_tokens, feat), Scalar(1) / std::sqrt(static_cast<Scalar>(c)));
      a8s.push_back(ad::reshape(ad::sigmoid(logits), {1, n, h, w}));
      feats.push_back(ad::reshape(ad::transpose(feat), {1, c, h, w}));
      toks.push_back(ad::reshape(out_tokens, {1, n, c}));
      affs.push_back(ad::reshape(aff, {1, n, s}));
    }
    return {ad::concat(a8s, 0), ad::concat(feats, 0), ad::concat(toks, 0), ad::concat(affs, 0)};
  }

 private:
  struct Block {
    Linear<Scalar> q, k, v, o;
    Block() = default;
    Block(ParameterSet<Scalar>& params, const std::string& name, Index c, std::mt19937_64& rng)
        : q(params, name + ".q", c, c, rng),
          k(params, name + ".k", c, c, rng),
          v(params, name + ".v", c, c, rng),
          o(params, name + ".o", c, c, rng) {}
  };
  struct Round {
    Block self_attn, token_to_feature, feature_to_token;
    Linear<Scalar> mlp1, mlp2;
    Norm<Scalar> norm_sa, norm_ca, norm_mlp, norm_feat;
  };
  struct Attended {
    ad::Var<Scalar> out, probs;
  };

  // Multi-head attention. When key_mask is given, query row i sees keys
  // shifted by key_mask(i, p) · mask_embed (projected by the key layer).
  Attended attend(const Block& blk, const ad::Var<Scalar>& q_in, const ad::Var<Scalar>& k_in,
                  const ad::Var<Scalar>& v_in, const Tensor<Scalar>* key_mask) const {
    auto q = blk.q(q_in), k = blk.k(k_in), v = blk.v(v_in);
    ad::Var<Scalar> km;
    if (key_mask) km = ad::linear(mask_embed_, blk.k.weight, ad::Var<Scalar>());
    const Index heads = cfg_.heads, d = cfg_.channels / heads;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
    std::vector<ad::Var<Scalar>> outs;
    ad::Var<Scalar> probs;
    for (Index hd = 0; hd < heads; ++hd) {
      auto qh = heads == 1 ? q : ad::slice(q, 1, hd * d, d);
      auto kh = heads == 1 ? k : ad::slice(k, 1, hd * d, d);
      auto vh = heads == 1 ? v : ad::slice(v, 1, hd * d, d);
      auto logits = ad::matmul_nt(qh, kh);
      if (key_mask) {
        auto kmh = heads == 1 ? km : ad::slice(km, 1, hd * d, d);
        logits = ad::add_mask_term(logits, ad::matmul_nt(qh, kmh), *key_mask);
      }
      auto p = ad::softmax_rows(ad::scale(logits, scale));
      outs.push_back(ad::matmul(p, vh));
      probs = probs ? ad::add(probs, p) : p;
    }
    if (heads > 1) probs = ad::scale(probs, Scalar(1) / static_cast<Scalar>(heads));
    return {blk.o(heads == 1 ? outs[0] : ad::concat(outs, 1)), probs};
  }

  DecoderConfig cfg_;
  Linear<Scalar> token_in_, token_out_;
  ad::Var<Scalar> mask_embed_;
  std::vector<Round> rounds_;
};

template <typename Scalar>
CoarseMatteBundle<Scalar> decode_coarse(const ad::Var<Scalar>& f8, const Tensor<std::uint8_t>& masks8,
                                        const InstanceMatteDecoder<Scalar>& decoder) {
  return decoder(f8, masks8);
}

}  // namespace maggie
