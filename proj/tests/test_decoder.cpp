#include "check.hpp"

#include "maggie/decoder.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>

using namespace maggie;

namespace {

struct Fixture {
  ParameterSet<double> params;
  InstanceMatteDecoder<double> dec;
  explicit Fixture(Index channels = 8, std::uint64_t seed = 21) {
    std::mt19937_64 rng(seed);
    DecoderConfig cfg;
    cfg.channels = channels;
    dec = InstanceMatteDecoder<double>(params, cfg, rng);
  }
};

Tensor<std::uint8_t> blob_masks(Index t, Index n, Index h, Index w, std::mt19937_64& rng) {
  Tensor<std::uint8_t> m({t, n, h, w});
  std::uniform_int_distribution<Index> py(0, h - 1), px(0, w - 1);
  for (Index f = 0; f < t; ++f)
    for (Index i = 0; i < n; ++i) {
      const Index cy = py(rng), cx = px(rng);
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
          if (std::abs(y - cy) <= 1 && std::abs(x - cx) <= 1) m(f, i, y, x) = 1;
    }
  return m;
}

Tensor<std::uint8_t> permute_planes(const Tensor<std::uint8_t>& m, const std::vector<Index>& perm) {
  Tensor<std::uint8_t> out(m.shape());
  const Index hw = m.dim(2) * m.dim(3);
  for (Index t = 0; t < m.dim(0); ++t)
    for (Index i = 0; i < m.dim(1); ++i) std::copy_n(m.plane(t, perm[static_cast<std::size_t>(i)]), hw, out.plane(t, i));
  return out;
}

}  // namespace

TEST_CASE("attention with one key returns that value for every query") {
  std::mt19937_64 rng(1);
  auto q = ad::constant(test::normal({3, 4}, rng)), k = ad::constant(test::normal({1, 4}, rng));
  const auto v = test::normal({1, 4}, rng);
  auto out = scaled_dot_attention(q, k, ad::constant(v))->value;
  for (Index i = 0; i < 3; ++i)
    for (Index c = 0; c < 4; ++c) CHECK(out(i, c) == doctest::Approx(v(0, c)).epsilon(1e-12));
}

TEST_CASE("identical keys average the values") {
  std::mt19937_64 rng(2);
  TensorD k({3, 4});
  const auto row = test::normal({4}, rng);
  for (Index s = 0; s < 3; ++s)
    for (Index c = 0; c < 4; ++c) k(s, c) = row[c];
  const auto v = test::normal({3, 4}, rng);
  auto out = scaled_dot_attention(ad::constant(test::normal({2, 4}, rng)), ad::constant(k), ad::constant(v))->value;
  for (Index c = 0; c < 4; ++c) {
    const double mean = (v(0, c) + v(1, c) + v(2, c)) / 3;
    CHECK(out(0, c) == doctest::Approx(mean).epsilon(1e-12));
    CHECK(out(1, c) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("attention matches the explicit formula with 1/sqrt(C) scaling") {
  std::mt19937_64 rng(3);
  const auto q = test::normal({2, 4}, rng), k = test::normal({2, 4}, rng), v = test::normal({2, 4}, rng);
  auto out = scaled_dot_attention(ad::constant(q), ad::constant(k), ad::constant(v))->value;
  for (Index i = 0; i < 2; ++i) {
    double logit[2], z = 0;
    for (Index s = 0; s < 2; ++s) {
      logit[s] = 0;
      for (Index c = 0; c < 4; ++c) logit[s] += q(i, c) * k(s, c);
      logit[s] = std::exp(0.5 * logit[s]);
      z += logit[s];
    }
    for (Index c = 0; c < 4; ++c)
      CHECK(out(i, c) == doctest::Approx((logit[0] * v(0, c) + logit[1] * v(1, c)) / z).epsilon(1e-12));
  }
  CHECK_THROWS_AS(scaled_dot_attention(ad::constant(q), ad::constant(TensorD({2, 3})), ad::constant(v)),
                  ValidationError);
  CHECK_THROWS_AS(scaled_dot_attention(ad::constant(q), ad::constant(k), ad::constant(TensorD({3, 4}))),
                  ValidationError);
}

TEST_CASE("a token with zero output projection gives a 0.5 plane") {
  Fixture fx;
  fx.params.get("decoder.token_out.weight")->value.fill(0.0);
  fx.params.get("decoder.token_out.bias")->value.fill(0.0);
  std::mt19937_64 rng(4);
  auto out = fx.dec(ad::constant(test::normal({1, 8, 4, 4}, rng)), blob_masks(1, 2, 4, 4, rng));
  for (Index k = 0; k < out.a8->value.size(); ++k) CHECK(out.a8->value[k] == 0.5);
}

TEST_CASE("bundle shapes, sigmoid range and affinity normalisation") {
  Fixture fx;
  std::mt19937_64 rng(5);
  auto out = fx.dec(ad::constant(test::normal({2, 8, 4, 4}, rng)), blob_masks(2, 3, 4, 4, rng));
  CHECK(out.a8->shape() == Shape{2, 3, 4, 4});
  CHECK(out.enriched->shape() == Shape{2, 8, 4, 4});
  CHECK(out.tokens->shape() == Shape{2, 3, 8});
  CHECK(out.aff->shape() == Shape{2, 3, 16});
  for (Index k = 0; k < out.a8->value.size(); ++k) {
    CHECK(out.a8->value[k] > 0.0);
    CHECK(out.a8->value[k] < 1.0);
  }
  for (Index r = 0; r < 6; ++r) {
    double s = 0;
    for (Index p = 0; p < 16; ++p) {
      CHECK(out.aff->value[r * 16 + p] >= 0.0);
      s += out.aff->value[r * 16 + p];
    }
    CHECK(std::abs(s - 1.0) <= 1e-5);
  }
}

TEST_CASE("zero instances and mismatched grids are rejected") {
  Fixture fx;
  std::mt19937_64 rng(6);
  auto f8 = ad::constant(test::normal({1, 8, 4, 4}, rng));
  CHECK_THROWS_AS(fx.dec(f8, Tensor<std::uint8_t>({1, 0, 4, 4})), ValidationError);
  CHECK_THROWS_AS(fx.dec(f8, Tensor<std::uint8_t>({1, 1, 2, 4})), ValidationError);
}

TEST_CASE("decoder is equivariant under instance permutation") {
  for (int c = 0; c < 20; ++c) {
    Fixture fx(8, 100 + static_cast<std::uint64_t>(c));
    std::mt19937_64 rng(static_cast<std::uint64_t>(c));
    const Index n = 2 + c % 3;
    auto f8 = ad::constant(test::normal({2, 8, 4, 4}, rng));
    const auto m = blob_masks(2, n, 4, 4, rng);
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto a = fx.dec(f8, m), b = fx.dec(f8, permute_planes(m, perm));
    double err = test::max_abs_diff(a.enriched->value, b.enriched->value);
    for (Index t = 0; t < 2; ++t)
      for (Index i = 0; i < n; ++i) {
        const Index j = perm[static_cast<std::size_t>(i)];
        for (Index p = 0; p < 16; ++p) {
          err = std::max(err, std::abs(b.a8->value[(t * n + i) * 16 + p] - a.a8->value[(t * n + j) * 16 + p]));
          err = std::max(err, std::abs(b.aff->value[(t * n + i) * 16 + p] - a.aff->value[(t * n + j) * 16 + p]));
        }
        for (Index ch = 0; ch < 8; ++ch)
          err = std::max(err, std::abs(b.tokens->value[(t * n + i) * 8 + ch] - a.tokens->value[(t * n + j) * 8 + ch]));
      }
    CHECK(err <= 1e-5);
  }
}

TEST_CASE("coarse matte gradients match finite differences") {
  Fixture fx(8, 7);
  std::mt19937_64 rng(7);
  auto f8 = ad::parameter(test::normal({1, 8, 8, 8}, rng));
  const auto m = blob_masks(1, 2, 8, 8, rng);
  const auto w = test::normal({1, 2, 8, 8}, rng);
  std::vector<ad::Var<double>> vars{f8};
  for (const auto& e : fx.params.entries()) vars.push_back(e.var);
  auto f = [&] { return test::probe(fx.dec(f8, m).a8, w); };
  CHECK(test::grad_check(f, vars) < 1e-3);
}
