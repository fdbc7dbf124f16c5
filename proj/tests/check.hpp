#pragma once

// Shared helpers for the unit tests: random tensors and finite-difference
// gradient checks.

#include "maggie/autodiff.hpp"
#include "maggie/tensor.hpp"

#include <cmath>
#include <functional>
#include <random>

namespace maggie::test {

inline TensorD uniform(Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (Index k = 0; k < t.size(); ++k) t[k] = d(rng);
  return t;
}

inline TensorD normal(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  TensorD t(std::move(shape));
  std::normal_distribution<double> d(0.0, sd);
  for (Index k = 0; k < t.size(); ++k) t[k] = d(rng);
  return t;
}

inline Tensor<std::uint8_t> bits(Shape shape, std::mt19937_64& rng, double p = 0.5) {
  Tensor<std::uint8_t> t(std::move(shape));
  std::bernoulli_distribution d(p);
  for (Index k = 0; k < t.size(); ++k) t[k] = d(rng) ? 1 : 0;
  return t;
}

template <typename A, typename B>
double max_abs_diff(const Tensor<A>& a, const Tensor<B>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (Index k = 0; k < a.size(); ++k)
    m = std::max(m, std::abs(static_cast<double>(a[k]) - static_cast<double>(b[k])));
  return m;
}

/// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) for the gradient of a
/// scalar function with respect to `vars`, by central differences.
inline double grad_check(const std::function<ad::Var<double>()>& f, const std::vector<ad::Var<double>>& vars,
                         double h = 1e-6) {
  for (const auto& v : vars) v->grad = TensorD();
  ad::backward(f());
  double diff = 0, na = 0, nn = 0;
  for (const auto& v : vars) {
    const TensorD analytic = v->grad.empty() ? TensorD(v->shape()) : v->grad;
    for (Index k = 0; k < v->value.size(); ++k) {
      const double x0 = v->value[k];
      v->value[k] = x0 + h;
      const double up = f()->value[0];
      v->value[k] = x0 - h;
      const double dn = f()->value[0];
      v->value[k] = x0;
      const double num = (up - dn) / (2 * h);
      diff += (analytic[k] - num) * (analytic[k] - num);
      na += analytic[k] * analytic[k];
      nn += num * num;
    }
  }
  const double denom = std::sqrt(std::max(na, nn));
  return denom > 0 ? std::sqrt(diff) / denom : std::sqrt(diff);
}

/// Σ w ⊙ y with fixed random weights w, turning a tensor output into a
/// scalar whose gradient probes every output element.
inline ad::Var<double> probe(const ad::Var<double>& y, const TensorD& w) {
  return ad::sum(ad::mul(y, ad::constant(w)));
}

}  // namespace maggie::test
