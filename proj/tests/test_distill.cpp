// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "udst/distill.hpp"

using namespace udst;

namespace {
Categorical random_categorical(std::mt19937_64& rng, std::size_t k) {
  std::vector<double> p(k);
  double sum = 0.0;
  for (double& v : p) {
    v = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return Categorical(p);
}
}  // namespace

TEST_CASE("smooth_labels") {
  auto t = smooth_labels(0, 2, 0.0);
  CHECK(t.probs[0] == doctest::Approx(1.0));
  CHECK(t.probs[1] == doctest::Approx(0.0));

  t = smooth_labels(1, 4, 0.05);
  CHECK(t.probs[0] == doctest::Approx(0.0125));
  CHECK(t.probs[1] == doctest::Approx(0.9625));
  CHECK(t.probs[2] == doctest::Approx(0.0125));
  CHECK(t.probs[3] == doctest::Approx(0.0125));

  CHECK_THROWS(smooth_labels(0, 2, 1.0));
  CHECK_THROWS(smooth_labels(2, 2, 0.1));
}

TEST_CASE("smooth_labels preserves argmax for eps < (K-1)/K") {
  for (std::size_t k = 2; k <= 6; ++k) {
    const double eps = (static_cast<double>(k - 1) / k) - 1e-6;
    for (std::size_t c = 0; c < k; ++c)
      CHECK(smooth_labels(c, k, eps).probs.argmax() == c);
  }
}

TEST_CASE("label_smoothing_loss") {
  auto target = smooth_labels(0, 2, 0.1);
  CHECK(label_smoothing_loss(target.probs, target) == doctest::Approx(0.0));
  // Frozen from the kl_categorical oracle:
  // KL[[0.95,0.05] || [0.5,0.5]] = ln 2 - H([0.95,0.05]) = 0.494632.
  CHECK(label_smoothing_loss(Categorical({0.5, 0.5}), target) ==
        doctest::Approx(0.4946320).epsilon(1e-6));
  CHECK(label_smoothing_loss(Categorical({0.95, 0.05}), target) ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("end_loss") {
  Categorical posterior({0.7, 0.3});
  CHECK(end_loss(posterior, posterior, 1.0) == doctest::Approx(0.0));
  CHECK(end_loss(posterior, posterior, 2.5) == doctest::Approx(0.0));
  // Frozen from the kl_categorical oracle.
  CHECK(end_loss(Categorical({0.5, 0.5}), posterior, 1.0) ==
        doctest::Approx(0.0822828).epsilon(1e-5));
  // T -> infinity flattens both sides.
  CHECK(end_loss(Categorical({0.9, 0.1}), posterior, 1e6) ==
        doctest::Approx(0.0).epsilon(1e-6));
  CHECK(end_loss(Categorical({0.5, 0.5}), posterior, 1.0) >= 0.0);
}

TEST_CASE("annealed_temperature schedule") {
  CHECK(annealed_temperature(2.5, 0.0, 0.1) == doctest::Approx(2.5));
  CHECK(annealed_temperature(2.5, 0.05, 0.1) == doctest::Approx(1.75));
  CHECK(annealed_temperature(2.5, 0.1, 0.1) == doctest::Approx(1.0));
  CHECK(annealed_temperature(2.5, 0.9, 0.1) == doctest::Approx(1.0));
}

TEST_CASE("proxy_dirichlet_target hand example") {
  EnsemblePrediction e;
  e.members = {Categorical({0.8, 0.2}), Categorical({0.6, 0.4})};
  auto proxy = proxy_dirichlet_target(e, 0.0);
  CHECK(proxy.pi_hat[0] == doctest::Approx(0.7));
  CHECK(proxy.pi_hat[1] == doctest::Approx(0.3));
  // Hand/spreadsheet oracle of the three formulas.
  CHECK(proxy.beta_tilde0 == doctest::Approx(20.0928).epsilon(1e-3));
  CHECK(proxy.beta.alphas[0] == doctest::Approx(15.065).epsilon(1e-3));
  CHECK(proxy.beta.alphas[1] == doctest::Approx(7.028).epsilon(1e-3));
}

TEST_CASE("proxy_dirichlet_target identical members guard") {
  EnsemblePrediction e;
  e.members = {Categorical({0.9, 0.1}), Categorical({0.9, 0.1})};
  auto proxy = proxy_dirichlet_target(e, 1e-4);
  CHECK(std::isfinite(proxy.beta_tilde0));
  CHECK(proxy.beta_tilde0 > 1e6);  // finite but very large
  for (double b : proxy.beta.alphas) CHECK(b >= 1.0);
}

TEST_CASE("proxy_dirichlet_target properties") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    EnsemblePrediction e;
    const std::size_t m = 2 + rng() % 8;
    const std::size_t k = 2 + rng() % 5;
    for (std::size_t i = 0; i < m; ++i)
      e.members.push_back(random_categorical(rng, k));
    auto proxy = proxy_dirichlet_target(e, 1e-4);
    CHECK(proxy.beta_tilde0 > 0.0);
    for (double b : proxy.beta.alphas) CHECK(b >= 1.0);
    CHECK(proxy.beta.alphas[proxy.pi_hat.argmax()] ==
          doctest::Approx(*std::max_element(proxy.beta.alphas.begin(),
                                            proxy.beta.alphas.end())));
    // Precision denominator equals (1/M) sum_m KL(pi_hat || pi^(m)) >= 0.
    double mean_kl = 0.0;
    for (const Categorical& member : e.members) {
      std::vector<double> sm(k);
      for (std::size_t j = 0; j < k; ++j)
        sm[j] = (1.0 - 1e-4 * static_cast<double>(k)) * member[j] + 1e-4;
      mean_kl += kl_categorical(proxy.pi_hat, Categorical(sm)) /
                 static_cast<double>(m);
    }
    const double denom =
        static_cast<double>(k - 1) / (2.0 * proxy.beta_tilde0);
    CHECK(denom == doctest::Approx(mean_kl).epsilon(1e-6));
  }
}

TEST_CASE("end2_loss gradient matches finite differences") {
  std::mt19937_64 rng(37);
  EnsemblePrediction e;
  e.members = {Categorical({0.7, 0.2, 0.1}), Categorical({0.5, 0.3, 0.2}),
               Categorical({0.6, 0.3, 0.1})};
  auto proxy = proxy_dirichlet_target(e, 1e-4);

  ParamStore ps;
  ps.add("logits", init_uniform({3}, 1, 5));
  auto loss_fn = [&](const ParamStore& p) {
    Tape t;
    return t.value(end2_loss(t, t.param(p, "logits"), proxy)).data[0];
  };
  Tape t;
  Grads grads = t.backward(end2_loss(t, t.param(ps, "logits"), proxy));
  auto report = finite_diff_check(loss_fn, ps, grads, 1e-4);
  CHECK(report.pass);
}

TEST_CASE("end2_loss two-term tension") {
  // K=2, pi_hat=[0.5,0.5], beta_0=2: over alpha=(a,a) the expectation term
  // decreases as a grows while the KL term grows.
  ProxyDirichletTarget proxy;
  proxy.pi_hat = Categorical({0.5, 0.5});
  proxy.beta = DirichletParams({1.0, 1.0});
  proxy.beta_tilde0 = 0.0;

  auto expectation_term = [&](double a) {
    DirichletParams d({a, a});
    return -(0.5 * (digamma(a) - digamma(2 * a)) +
             0.5 * (digamma(a) - digamma(2 * a)));
  };
  auto kl_term = [&](double a) {
    return kl_dirichlet(DirichletParams({a, a}), DirichletParams({1.0, 1.0}));
  };
  double prev_exp = expectation_term(1.0), prev_kl = kl_term(1.0);
  for (double a : {2.0, 4.0, 8.0, 16.0}) {
    CHECK(expectation_term(a) < prev_exp);
    CHECK(kl_term(a) > prev_kl);
    prev_exp = expectation_term(a);
    prev_kl = kl_term(a);
  }
  // And the full loss reflects both.
  const double l_small = end2_loss_value({0.0, 0.0}, proxy);
  CHECK(std::isfinite(l_small));
}

TEST_CASE("end2_loss optimization recovers the proxy argmax") {
  EnsemblePrediction e;
  e.members = {Categorical({0.9, 0.06, 0.04}), Categorical({0.85, 0.1, 0.05})};
  auto proxy = proxy_dirichlet_target(e, 1e-4);

  ParamStore ps;
  ps.add("logits", init_uniform({3}, 1, 11));
  for (int iter = 0; iter < 400; ++iter) {
    Tape t;
    Grads grads = t.backward(end2_loss(t, t.param(ps, "logits"), proxy));
    adam_step(ps, grads, 0.05);
  }
  std::vector<double> alpha;
  for (double z : ps.at("logits").data) alpha.push_back(std::exp(z));
  CHECK(dirichlet_mean(DirichletParams(alpha)).argmax() ==
        proxy.pi_hat.argmax());
}

TEST_CASE("end2_loss translation consistency in logits") {
  EnsemblePrediction e;
  e.members = {Categorical({0.6, 0.4}), Categorical({0.4, 0.6})};
  auto proxy = proxy_dirichlet_target(e, 1e-4);
  const std::vector<double> z{0.3, -0.2};
  const std::vector<double> z_shift{1.3, 0.8};
  // Shifting logits scales alpha by e; recompute both terms analytically.
  auto analytic = [&](const std::vector<double>& logits) {
    std::vector<double> alpha{std::exp(logits[0]), std::exp(logits[1])};
    const double a0 = alpha[0] + alpha[1];
    double expected = 0.0;
    for (int k = 0; k < 2; ++k)
      expected -= proxy.pi_hat[k] * (digamma(alpha[k]) - digamma(a0));
    const double kl =
        kl_dirichlet(DirichletParams(alpha), DirichletParams({1.0, 1.0}));
    return expected + kl / proxy.beta.alpha0;
  };
  CHECK(end2_loss_value(z, proxy) == doctest::Approx(analytic(z)).epsilon(1e-10));
  CHECK(end2_loss_value(z_shift, proxy) ==
        doctest::Approx(analytic(z_shift)).epsilon(1e-10));
}

TEST_CASE("end_loss_on_logits matches end_loss at T") {
  Categorical posterior({0.7, 0.3});
  Tape t;
  Tensor logits_v = Tensor::vec(2);
  logits_v.data = {0.2, -0.4};
  Tape::Var logits = t.input(std::move(logits_v));
  const double loss =
      t.value(end_loss_on_logits(t, logits, posterior, 2.0)).data[0];
  // Reference through the categorical route: student = softmax(logits).
  std::vector<double> p{std::exp(0.2), std::exp(-0.4)};
  const double z = p[0] + p[1];
  Categorical student({p[0] / z, p[1] / z});
  CHECK(loss == doctest::Approx(end_loss(student, posterior, 2.0)).epsilon(1e-9));
}
