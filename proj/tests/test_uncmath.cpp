// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "udst/uncmath.hpp"

using namespace udst;

namespace {

// Independent Monte-Carlo oracle: sample Dirichlet via normalized Gammas.
double mc_expected_entropy(const DirichletParams& d, std::size_t n_samples,
                           std::uint64_t seed, double* std_err = nullptr) {
  std::mt19937_64 rng(seed);
  double sum = 0.0, sum_sq = 0.0;
  std::vector<double> pi(d.size());
  for (std::size_t s = 0; s < n_samples; ++s) {
    double total = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k) {
      std::gamma_distribution<double> gamma(d.alphas[k], 1.0);
      pi[k] = gamma(rng);
      total += pi[k];
    }
    double h = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k) {
      const double p = pi[k] / total;
      if (p > 1e-300) h -= p * std::log(p);
    }
    sum += h;
    sum_sq += h * h;
  }
  const double mean = sum / static_cast<double>(n_samples);
  if (std_err) {
    const double var =
        (sum_sq / static_cast<double>(n_samples)) - mean * mean;
    *std_err = std::sqrt(std::max(var, 0.0) / static_cast<double>(n_samples));
  }
  return mean;
}

}  // namespace

TEST_CASE("entropy basics") {
  CHECK(entropy(Categorical({0.25, 0.25, 0.25, 0.25})) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(entropy(Categorical({1.0, 0.0, 0.0})) == doctest::Approx(0.0));
  // Frozen from the direct summation oracle -sum p ln p.
  CHECK(entropy(Categorical({0.7, 0.3})) ==
        doctest::Approx(0.6108643020548935).epsilon(1e-9));
}

TEST_CASE("entropy bounded by ln K, max at uniform") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng() % 6;
    std::vector<double> p(k);
    double sum = 0.0;
    for (double& v : p) {
      v = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
      sum += v;
    }
    for (double& v : p) v /= sum;
    const double h = entropy(Categorical(p));
    CHECK(h >= 0.0);
    CHECK(h <= std::log(static_cast<double>(k)) + 1e-12);
  }
}

TEST_CASE("kl_categorical") {
  CHECK(kl_categorical(Categorical({0.5, 0.5}), Categorical({0.5, 0.5})) ==
        doctest::Approx(0.0));
  CHECK(kl_categorical(Categorical({1.0, 0.0}), Categorical({0.5, 0.5})) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS(kl_categorical(Categorical({0.5, 0.5}), Categorical({1.0, 0.0})));
}

TEST_CASE("kl_categorical nonnegative, zero iff equal") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng() % 5;
    auto sample = [&] {
      std::vector<double> p(k);
      double sum = 0.0;
      for (double& v : p) {
        v = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
        sum += v;
      }
      for (double& v : p) v /= sum;
      return Categorical(p);
    };
    Categorical p = sample(), q = sample();
    CHECK(kl_categorical(p, q) >= 0.0);
    CHECK(kl_categorical(p, p) == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("dirichlet_mean") {
  Categorical m = dirichlet_mean(DirichletParams({1.0, 1.0}));
  CHECK(m[0] == doctest::Approx(0.5));
  m = dirichlet_mean(DirichletParams({2.0, 6.0}));
  CHECK(m[0] == doctest::Approx(0.25));
  CHECK(m[1] == doctest::Approx(0.75));
  // alpha = e^z reproduces softmax(z).
  m = dirichlet_mean(
      DirichletParams({std::exp(0.0), std::exp(1.0), std::exp(2.0)}));
  CHECK(m[0] == doctest::Approx(0.09003057).epsilon(1e-6));
  CHECK(m[1] == doctest::Approx(0.24472847).epsilon(1e-6));
  CHECK(m[2] == doctest::Approx(0.66524096).epsilon(1e-6));
}

TEST_CASE("digamma reference values") {
  constexpr double kEulerGamma = 0.5772156649015329;
  CHECK(digamma(1.0) == doctest::Approx(-kEulerGamma).epsilon(1e-10));
  CHECK(digamma(2.0) == doctest::Approx(1.0 - kEulerGamma).epsilon(1e-10));
  CHECK(digamma(0.5) ==
        doctest::Approx(-kEulerGamma - 2.0 * std::log(2.0)).epsilon(1e-10));
  CHECK_THROWS(digamma(0.0));
  CHECK_THROWS(digamma(-1.5));
}

TEST_CASE("digamma recurrence property") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const double x = std::uniform_real_distribution<double>(1e-3, 100.0)(rng);
    CHECK(digamma(x + 1.0) - digamma(x) == doctest::Approx(1.0 / x).epsilon(1e-9));
  }
}

TEST_CASE("trigamma recurrence and reference") {
  CHECK(trigamma(1.0) ==
        doctest::Approx(1.6449340668482264).epsilon(1e-10));  // pi^2/6
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const double x = std::uniform_real_distribution<double>(0.01, 50.0)(rng);
    CHECK(trigamma(x) - trigamma(x + 1.0) ==
          doctest::Approx(1.0 / (x * x)).epsilon(1e-8));
  }
}

TEST_CASE("log_gamma agrees with std::lgamma") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 300; ++trial) {
    const double x = std::uniform_real_distribution<double>(0.01, 200.0)(rng);
    CHECK(log_gamma(x) == doctest::Approx(std::lgamma(x)).epsilon(1e-11));
  }
}

TEST_CASE("dirichlet_expected_entropy closed form") {
  // psi(3) - psi(2) = 1/2 exactly.
  CHECK(dirichlet_expected_entropy(DirichletParams({1.0, 1.0})) ==
        doctest::Approx(0.5).epsilon(1e-10));
  CHECK(dirichlet_expected_entropy(DirichletParams({1000.0, 1000.0})) ==
        doctest::Approx(0.69290).epsilon(1e-4));
  CHECK(dirichlet_expected_entropy(DirichletParams({1000.0, 1000.0})) <
        std::log(2.0));
  CHECK(dirichlet_expected_entropy(DirichletParams({5.0})) ==
        doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("dirichlet_expected_entropy vs Monte Carlo") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = 2 + rng() % 4;
    std::vector<double> alpha(k);
    for (double& a : alpha)
      a = std::uniform_real_distribution<double>(0.1, 50.0)(rng);
    DirichletParams d(alpha);
    double std_err = 0.0;
    const double mc = mc_expected_entropy(d, 100000, 1000 + trial, &std_err);
    CHECK(std::abs(dirichlet_expected_entropy(d) - mc) <=
          3.0 * std_err + 1e-6);
  }
}

TEST_CASE("dirichlet_decompose") {
  auto u = dirichlet_decompose(DirichletParams({1.0, 1.0}));
  CHECK(u.total == doctest::Approx(std::log(2.0)).epsilon(1e-10));
  CHECK(u.data == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(u.knowledge == doctest::Approx(std::log(2.0) - 0.5).epsilon(1e-10));

  u = dirichlet_decompose(DirichletParams({1e6, 1e6}));
  CHECK(std::abs(u.knowledge) < 1e-3);

  u = dirichlet_decompose(DirichletParams({0.01, 0.01}));
  CHECK(u.knowledge > 0.9 * u.total);  // near-total knowledge uncertainty

  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 2 + rng() % 5;
    std::vector<double> alpha(k);
    for (double& a : alpha)
      a = std::uniform_real_distribution<double>(0.05, 30.0)(rng);
    u = dirichlet_decompose(DirichletParams(alpha));
    CHECK(u.total == doctest::Approx(u.data + u.knowledge).epsilon(1e-12));
    CHECK(u.knowledge >= -1e-12);
  }
}

TEST_CASE("kl_dirichlet") {
  CHECK(kl_dirichlet(DirichletParams({1.0, 1.0}), DirichletParams({1.0, 1.0})) ==
        doctest::Approx(0.0));
  CHECK(kl_dirichlet(DirichletParams({1.0, 1.0, 1.0}),
                     DirichletParams({1.0, 1.0, 1.0})) == doctest::Approx(0.0));
  // Hand value: ln G(4) + 2 (psi(2) - psi(4)) = ln 6 - 5/3 = 0.1250928,
  // cross-checked against a Monte-Carlo importance estimate (tol 1e-2).
  CHECK(kl_dirichlet(DirichletParams({2.0, 2.0}), DirichletParams({1.0, 1.0})) ==
        doctest::Approx(std::log(6.0) - 5.0 / 3.0).epsilon(1e-9));
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(3), b(3);
    for (int k = 0; k < 3; ++k) {
      a[k] = std::uniform_real_distribution<double>(0.2, 20.0)(rng);
      b[k] = std::uniform_real_distribution<double>(0.2, 20.0)(rng);
    }
    CHECK(kl_dirichlet(DirichletParams(a), DirichletParams(b)) >= 0.0);
  }
}

TEST_CASE("validation errors") {
  CHECK_THROWS(Categorical::checked({0.5, 0.6}));
  CHECK_THROWS(Categorical::checked({}));
  CHECK_THROWS(Categorical::checked({1.5, -0.5}));
  CHECK_THROWS(DirichletParams::checked({1.0, 0.0}));
  CHECK_THROWS(DirichletParams::checked({}));
}
