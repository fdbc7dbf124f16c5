#include "check.hpp"

#include "maggie/losses.hpp"

#include <doctest.h>

using namespace maggie;

namespace {

double value(const ad::Var<double>& v) { return v->value[0]; }

/// Laplacian bands by direct 2-D convolution with the outer-product kernel.
std::vector<std::vector<double>> pyramid_oracle(std::vector<double> cur, Index h, Index w, int levels) {
  const double b[5] = {1, 4, 6, 4, 1};
  auto reflect = [](Index i, Index n) {
    if (n == 1) return Index{0};
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  auto blur = [&](const std::vector<double>& in, Index hh, Index ww) {
    std::vector<double> out(in.size());
    for (Index y = 0; y < hh; ++y)
      for (Index x = 0; x < ww; ++x) {
        double s = 0;
        for (Index i = 0; i < 5; ++i)
          for (Index j = 0; j < 5; ++j) s += b[i] * b[j] / 256.0 * in[reflect(y + i - 2, hh) * ww + reflect(x + j - 2, ww)];
        out[static_cast<std::size_t>(y * ww + x)] = s;
      }
    return out;
  };
  std::vector<std::vector<double>> bands;
  for (int k = 0; k + 1 < levels; ++k) {
    const Index h2 = (h + 1) / 2, w2 = (w + 1) / 2;
    auto blurred = blur(cur, h, w);
    std::vector<double> down(static_cast<std::size_t>(h2 * w2)), sparse(cur.size(), 0.0);
    for (Index y = 0; y < h2; ++y)
      for (Index x = 0; x < w2; ++x) {
        down[static_cast<std::size_t>(y * w2 + x)] = blurred[static_cast<std::size_t>(2 * y * w + 2 * x)];
        sparse[static_cast<std::size_t>(2 * y * w + 2 * x)] = 4 * down[static_cast<std::size_t>(y * w2 + x)];
      }
    auto up = blur(sparse, h, w);
    for (std::size_t j = 0; j < cur.size(); ++j) cur[j] -= up[j];
    bands.push_back(cur);
    cur = down;
    h = h2;
    w = w2;
  }
  bands.push_back(cur);
  return bands;
}

}  // namespace

TEST_CASE("attention loss examples") {
  SUBCASE("uniform affinity over a quarter support") {
    TensorD aff({1, 1, 64}, 1.0 / 64);
    TensorD gt({1, 1, 8, 8});
    for (Index p = 0; p < 16; ++p) gt[p * 4] = 0.3;
    CHECK(value(attention_loss(ad::constant(aff), gt)) == doctest::Approx(0.75).epsilon(1e-12));
  }
  SUBCASE("mass inside the support and an empty support") {
    TensorD aff({1, 2, 4});
    aff[0] = 0.5;
    aff[1] = 0.5;
    aff[4 + 2] = 1.0;
    TensorD gt({1, 2, 2, 2});
    gt[0] = gt[1] = 1.0;  // instance 0 covers its mass, instance 1 has no support
    CHECK(value(attention_loss(ad::constant(aff), gt)) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("frames are averaged") {
    TensorD aff({2, 1, 4}, 0.25);
    TensorD gt({2, 1, 2, 2});
    gt[0] = 1.0;             // frame 0: 1 − 0.25
    for (Index p = 4; p < 8; ++p) gt[p] = 1.0;  // frame 1: 0
    CHECK(value(attention_loss(ad::constant(aff), gt)) == doctest::Approx(0.375).epsilon(1e-12));
  }
  CHECK_THROWS_AS(attention_loss(ad::constant(TensorD({1, 1, 5})), TensorD({1, 1, 2, 2})), ValidationError);
}

TEST_CASE("uncertainty weight follows the open-interval rule") {
  TensorD pred({1, 1, 1, 3}), gt({1, 1, 1, 3});
  pred[0] = gt[0] = 0.5;
  pred[1] = 1.0;
  gt[1] = 0.5;
  pred[2] = 0.3;
  gt[2] = 0.0;
  auto w = coarse_weight(pred, gt, 2.0);
  CHECK(w[0] == 2.0);
  CHECK(w[1] == 1.0);
  CHECK(w[2] == 1.0);
  // 3 pixels: |0|·2 + |0.5|·1 + |0.3|·1
  CHECK(value(weighted_coarse_loss(ad::constant(pred), gt, 2.0)) == doctest::Approx(0.8 / 3).epsilon(1e-12));
}

TEST_CASE("binary mattes and unit gamma reduce to plain L1") {
  std::mt19937_64 rng(1);
  const auto pb = test::bits({2, 2, 4, 4}, rng).cast<double>(), gb = test::bits({2, 2, 4, 4}, rng).cast<double>();
  CHECK(value(weighted_coarse_loss(ad::constant(pb), gb, 2.0)) == value(l1_loss(ad::constant(pb), gb)));
  const auto p = test::uniform({2, 2, 4, 4}, rng), g = test::uniform({2, 2, 4, 4}, rng);
  CHECK(value(weighted_coarse_loss(ad::constant(p), g, 1.0)) == value(l1_loss(ad::constant(p), g)));
}

TEST_CASE("relative entropy is zero at the target and log 2 at a coin flip") {
  std::mt19937_64 rng(2);
  const auto g = test::uniform({1, 1, 4, 4}, rng);
  CHECK(std::abs(value(relative_entropy_loss(ad::constant(g), g))) <= 1e-12);
  CHECK(value(relative_entropy_loss(ad::constant(TensorD({1}, 0.5)), TensorD({1}, 1.0))) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(value(relative_entropy_loss(ad::constant(test::uniform({1, 1, 4, 4}, rng)), g)) > 0.0);
  // Saturated predictions keep a finite, correctly signed gradient.
  auto p = ad::parameter(TensorD({1}, 0.0));
  ad::backward(relative_entropy_loss(p, TensorD({1}, 1.0)));
  CHECK(std::isfinite(p->grad[0]));
  CHECK(p->grad[0] < 0.0);
}

TEST_CASE("laplacian loss") {
  std::mt19937_64 rng(3);
  const auto gt = test::uniform({1, 2, 16, 16}, rng);
  CHECK(value(laplacian_loss(ad::constant(gt), gt)) == 0.0);
  SUBCASE("a constant offset only moves the residual band") {
    std::vector<double> flat(256, 0.3);
    auto bands = filters::laplacian_pyramid(flat, 16, 16, 5);
    for (int k = 0; k < 4; ++k)
      for (double v : bands[static_cast<std::size_t>(k)]) CHECK(std::abs(v) <= 1e-15);
    for (double v : bands[4]) CHECK(v == doctest::Approx(0.3).epsilon(1e-12));
    TensorD shifted(gt.shape());
    for (Index k = 0; k < gt.size(); ++k) shifted[k] = gt[k] + 0.3;
    CHECK(value(laplacian_loss(ad::constant(shifted), gt)) == doctest::Approx(0.3).epsilon(1e-12));
  }
  SUBCASE("matches the direct pyramid construction") {
    for (auto [h, w] : {std::pair<Index, Index>{16, 16}, {13, 10}}) {
      const auto p = test::uniform({1, 1, h, w}, rng), g = test::uniform({1, 1, h, w}, rng);
      std::vector<double> d(static_cast<std::size_t>(h * w));
      for (Index k = 0; k < h * w; ++k) d[static_cast<std::size_t>(k)] = p[k] - g[k];
      auto lib = filters::laplacian_pyramid(d, h, w, 5);
      auto ref = pyramid_oracle(d, h, w, 5);
      double expected = 0;
      for (int k = 0; k < 5; ++k) {
        REQUIRE(lib[static_cast<std::size_t>(k)].size() == ref[static_cast<std::size_t>(k)].size());
        double s = 0;
        for (std::size_t j = 0; j < ref[static_cast<std::size_t>(k)].size(); ++j) {
          CHECK(std::abs(lib[static_cast<std::size_t>(k)][j] - ref[static_cast<std::size_t>(k)][j]) <= 1e-12);
          s += std::abs(ref[static_cast<std::size_t>(k)][j]);
        }
        expected += s / static_cast<double>(ref[static_cast<std::size_t>(k)].size());
      }
      CHECK(value(laplacian_loss(ad::constant(p), g)) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("gradient loss") {
  std::mt19937_64 rng(4);
  const auto gt = test::uniform({1, 1, 8, 8}, rng);
  CHECK(value(gradient_loss(ad::constant(gt), gt)) == 0.0);
  TensorD shifted(gt.shape());
  for (Index k = 0; k < gt.size(); ++k) shifted[k] = gt[k] + 0.25;
  CHECK(value(gradient_loss(ad::constant(shifted), gt)) <= 1e-12);

  SUBCASE("a 3x3 ramp against a flat matte") {
    TensorD ramp({1, 1, 3, 3});
    for (Index y = 0; y < 3; ++y)
      for (Index x = 0; x < 3; ++x) ramp(0, 0, y, x) = 0.5 * static_cast<double>(x);
    // Sampled g(y)·g'(x) at σ = 1.4, unit L2 norm, replicate borders.
    const double s = 1.4;
    const Index half = 4;
    double k[9][9], norm = 0;
    for (Index i = 0; i < 9; ++i)
      for (Index j = 0; j < 9; ++j) {
        const double yi = static_cast<double>(i - half), xj = static_cast<double>(j - half);
        k[i][j] = std::exp(-yi * yi / (2 * s * s)) * (-xj) * std::exp(-xj * xj / (2 * s * s));
        norm += k[i][j] * k[i][j];
      }
    double expected = 0;
    for (Index y = 0; y < 3; ++y)
      for (Index x = 0; x < 3; ++x) {
        double gx = 0, gy = 0;
        for (Index i = 0; i < 9; ++i)
          for (Index j = 0; j < 9; ++j) {
            const Index yy = std::clamp<Index>(y + half - i, 0, 2), xx = std::clamp<Index>(x + half - j, 0, 2);
            gx += k[i][j] * ramp(0, 0, yy, xx);
            gy += k[j][i] * ramp(0, 0, yy, xx);
          }
        expected += std::hypot(gx, gy) / std::sqrt(norm);
      }
    expected /= 9;
    CHECK(filters::gradient_kernel(1.4).half == half);
    CHECK(value(gradient_loss(ad::constant(ramp), TensorD({1, 1, 3, 3}))) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("dtSSD loss") {
  TensorD pred({2, 1, 1, 2}), gt({2, 1, 1, 2});
  pred[2] = 0.3;
  pred[3] = 0.1;
  gt[2] = 0.1;
  gt[3] = 0.1;
  // Residuals 0.2 and 0 over two pixels.
  CHECK(value(dtssd_loss(ad::constant(pred), gt)) == doctest::Approx(std::sqrt(0.02)).epsilon(1e-12));
  CHECK(value(dtssd_loss(ad::constant(gt), gt)) == 0.0);
  CHECK(value(dtssd_loss(ad::constant(TensorD({3, 1, 2, 2}, 0.2)), TensorD({3, 1, 2, 2}, 0.7))) == 0.0);
  CHECK_THROWS_AS(dtssd_loss(ad::constant(TensorD({1, 1, 2, 2})), TensorD({1, 1, 2, 2})), ValidationError);
}

TEST_CASE("delta loss is the mean absolute difference") {
  CHECK(value(delta_loss(ad::constant(TensorD({1, 1, 2, 2}, 0.5)), Tensor<std::uint8_t>({1, 1, 2, 2}, 1))) == 0.5);
  std::mt19937_64 rng(5);
  const auto gt = test::bits({2, 1, 3, 3}, rng);
  CHECK(value(delta_loss(ad::constant(gt.cast<double>()), gt)) == 0.0);
  const auto p = test::uniform({2, 1, 3, 3}, rng);
  double m = 0;
  for (Index k = 0; k < p.size(); ++k) m += std::abs(p[k] - gt[k]);
  CHECK(value(delta_loss(ad::constant(p), gt)) == doctest::Approx(m / 18).epsilon(1e-12));
}

TEST_CASE("total loss combines weighted terms") {
  auto a = ad::constant(TensorD({1}, 0.7)), b = ad::constant(TensorD({1}, 2.0));
  auto zero = total_loss<double>({{"a", 0.0, a}, {"b", 0.0, b}});
  CHECK(value(zero.total) == 0.0);
  CHECK(zero.breakdown.at("b") == 2.0);
  CHECK(value(total_loss<double>({{"a", 1.0, a}, {"b", 0.0, b}}).total) == 0.7);
  CHECK(value(total_loss<double>({{"a", 0.5, a}, {"b", 3.0, b}}).total) == doctest::Approx(6.35).epsilon(1e-15));
  CHECK_THROWS_AS(total_loss<double>({{"a", -1.0, a}}), ValidationError);
  LossWeights w;
  w.att = -0.1;
  CHECK_THROWS_AS(w.validate(), ValidationError);
}

TEST_CASE("every loss term has finite-difference gradients") {
  std::mt19937_64 rng(6);
  const Shape s{2, 2, 8, 8};
  auto pred = ad::parameter(test::uniform(s, rng, 0.05, 0.95));
  const auto gt = test::uniform(s, rng);
  std::vector<ad::Var<double>> v{pred};
  CHECK(test::grad_check([&] { return l1_loss(pred, gt); }, v) < 1e-3);
  CHECK(test::grad_check([&] { return relative_entropy_loss(pred, gt); }, v) < 1e-3);
  CHECK(test::grad_check([&] { return weighted_coarse_loss(pred, gt, 2.0); }, v) < 1e-3);
  CHECK(test::grad_check([&] { return laplacian_loss(pred, gt); }, v) < 1e-3);
  CHECK(test::grad_check([&] { return gradient_loss(pred, gt); }, v) < 1e-3);
  CHECK(test::grad_check([&] { return dtssd_loss(pred, gt); }, v) < 1e-3);
  const auto d = test::bits({2, 2, 8, 8}, rng);
  CHECK(test::grad_check([&] { return delta_loss(pred, d); }, v) < 1e-3);
  auto aff = ad::parameter(test::uniform({2, 2, 64}, rng, 0.0, 0.02));
  const auto gt8 = test::bits(s, rng, 0.4).cast<double>();
  CHECK(test::grad_check([&] { return attention_loss(aff, gt8); }, {aff}) < 1e-3);
  auto combined = [&] {
    return total_loss<double>({{"l1", 1.0, l1_loss(pred, gt)},
                               {"lap", 0.5, laplacian_loss(pred, gt)},
                               {"grad", 2.0, gradient_loss(pred, gt)}})
        .total;
  };
  CHECK(test::grad_check(combined, v) < 1e-3);
}
