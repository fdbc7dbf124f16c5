#include "check.hpp"

#include "maggie/encoder.hpp"

#include <doctest.h>

using namespace maggie;

namespace {

struct Fixture {
  ParameterSet<double> params;
  Encoder<double> enc;
  Fixture() {
    std::mt19937_64 rng(11);
    enc = Encoder<double>(params, EncoderConfig{}, rng);
  }
};

}  // namespace

TEST_CASE("pyramid maps have the configured scales and widths") {
  Fixture fx;
  std::mt19937_64 rng(1);
  auto pyr = extract_pyramid(ad::constant(test::uniform({1, 6, 64, 64}, rng)), fx.enc);
  CHECK(pyr.f1->shape() == Shape{1, 32, 64, 64});
  CHECK(pyr.f2->shape() == Shape{1, 32, 32, 32});
  CHECK(pyr.f4->shape() == Shape{1, 64, 16, 16});
  CHECK(pyr.f8->shape() == Shape{1, 128, 8, 8});
  CHECK(&pyr.at(8) == &pyr.f8);
  CHECK_THROWS_AS(pyr.at(3), ValidationError);
}

TEST_CASE("encoder is deterministic") {
  Fixture fx;
  std::mt19937_64 rng(2);
  const auto x = test::uniform({1, 6, 16, 16}, rng);
  auto a = fx.enc(ad::constant(x)), b = fx.enc(ad::constant(x));
  CHECK(test::max_abs_diff(a.f1->value, b.f1->value) == 0.0);
  CHECK(test::max_abs_diff(a.f8->value, b.f8->value) == 0.0);
}

TEST_CASE("encoder has no temporal mixing") {
  Fixture fx;
  std::mt19937_64 rng(3);
  const auto x = test::uniform({3, 6, 16, 16}, rng);
  auto batch = fx.enc(ad::constant(x));
  for (Index t = 0; t < 3; ++t) {
    TensorD one({1, 6, 16, 16});
    std::copy_n(x.data() + t * one.size(), one.size(), one.data());
    auto single = fx.enc(ad::constant(one));
    for (int s : {1, 2, 4, 8}) {
      const auto& full = batch.at(s)->value;
      const auto& part = single.at(s)->value;
      const Index per = part.size();
      double m = 0;
      for (Index k = 0; k < per; ++k) m = std::max(m, std::abs(full[t * per + k] - part[k]));
      CHECK(m <= 1e-12);
    }
  }
}

TEST_CASE("shuffling frames permutes the outputs") {
  Fixture fx;
  std::mt19937_64 rng(4);
  const auto x = test::uniform({2, 6, 8, 8}, rng);
  TensorD swapped(x.shape());
  const Index per = x.size() / 2;
  std::copy_n(x.data(), per, swapped.data() + per);
  std::copy_n(x.data() + per, per, swapped.data());
  auto a = fx.enc(ad::constant(x)).f8->value, b = fx.enc(ad::constant(swapped)).f8->value;
  const Index o = a.size() / 2;
  for (Index k = 0; k < o; ++k) {
    CHECK(std::abs(a[k] - b[o + k]) <= 1e-12);
    CHECK(std::abs(a[o + k] - b[k]) <= 1e-12);
  }
}

TEST_CASE("outputs are finite for inputs in [0, 1]") {
  Fixture fx;
  std::mt19937_64 rng(5);
  auto pyr = fx.enc(ad::constant(test::uniform({1, 6, 32, 32}, rng)));
  for (int s : {1, 2, 4, 8})
    for (Index k = 0; k < pyr.at(s)->value.size(); ++k) REQUIRE(std::isfinite(pyr.at(s)->value[k]));
}

TEST_CASE("indivisible sizes and wrong channel counts are rejected") {
  Fixture fx;
  CHECK_THROWS_AS(fx.enc(ad::constant(TensorD({1, 6, 12, 16}))), ValidationError);
  CHECK_THROWS_AS(fx.enc(ad::constant(TensorD({1, 5, 16, 16}))), ValidationError);
}
