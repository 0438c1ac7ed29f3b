// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#include "udst/uncmath.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace udst {

Categorical::Categorical(std::vector<double> p) : probs(std::move(p)) {}

std::size_t Categorical::argmax() const {
  std::size_t best = 0;
  for (std::size_t k = 1; k < probs.size(); ++k)
    if (probs[k] > probs[best]) best = k;
  return best;
}

double Categorical::max_prob() const { return probs[argmax()]; }

Categorical Categorical::checked(std::vector<double> p) {
  if (p.empty()) throw std::invalid_argument("Categorical: K must be >= 1");
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0 + 1e-12))
      throw std::invalid_argument("Categorical: entry outside [0,1]: " +
                                  std::to_string(v));
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("Categorical: entries sum to " +
                                std::to_string(sum));
  return Categorical(std::move(p));
}

DirichletParams::DirichletParams(std::vector<double> a)
    : alphas(std::move(a)) {
  alpha0 = 0.0;
  for (double v : alphas) alpha0 += v;
}

DirichletParams DirichletParams::checked(std::vector<double> a) {
  if (a.empty()) throw std::invalid_argument("DirichletParams: K must be >= 1");
  for (double v : a)
    if (!(v > 0.0))
      throw std::invalid_argument("DirichletParams: alpha must be > 0, got " +
                                  std::to_string(v));
  return DirichletParams(std::move(a));
}

// Recurrence up to x >= 6, then the asymptotic expansion
// psi(x) ~ ln x - 1/(2x) - sum B_2n / (2n x^2n).
double digamma(double x) {
  if (!(x > 0.0))
    throw std::domain_error("digamma: x must be > 0, got " +
                            std::to_string(x));
  double result = 0.0;
  while (x < 6.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv;
  // Bernoulli-number coefficients B_2n / 2n for n = 1..7.
  result -= inv2 * (1.0 / 12.0 -
             inv2 * (1.0 / 120.0 -
             inv2 * (1.0 / 252.0 -
             inv2 * (1.0 / 240.0 -
             inv2 * (1.0 / 132.0 -
             inv2 * (691.0 / 32760.0 -
             inv2 * (1.0 / 12.0)))))));
  return result;
}

// psi'(x) = psi'(x+1) + 1/x^2; asymptotic 1/x + 1/(2x^2) + sum B_2n/x^(2n+1).
double trigamma(double x) {
  if (!(x > 0.0))
    throw std::domain_error("trigamma: x must be > 0, got " +
                            std::to_string(x));
  double result = 0.0;
  while (x < 6.0) {
    result += 1.0 / (x * x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  result += inv + 0.5 * inv2 +
            inv * inv2 * (1.0 / 6.0 -
                   inv2 * (1.0 / 30.0 -
                   inv2 * (1.0 / 42.0 -
                   inv2 * (1.0 / 30.0))));
  return result;
}

// Same scheme as digamma: shift to x >= 8, then the Stirling series
// ln Gamma(x) ~ (x-1/2) ln x - x + ln(2 pi)/2 + sum B_2n/(2n(2n-1) x^(2n-1)).
double log_gamma(double x) {
  if (!(x > 0.0))
    throw std::domain_error("log_gamma: x must be > 0, got " +
                            std::to_string(x));
  double shift = 0.0;
  while (x < 8.0) {
    shift -= std::log(x);
    x += 1.0;
  }
  constexpr double kHalfLog2Pi = 0.9189385332046727;
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  double series = inv * (1.0 / 12.0 -
                  inv2 * (1.0 / 360.0 -
                  inv2 * (1.0 / 1260.0 -
                  inv2 * (1.0 / 1680.0 -
                  inv2 * (1.0 / 1188.0)))));
  return shift + (x - 0.5) * std::log(x) - x + kHalfLog2Pi + series;
}

double entropy(const Categorical& p) {
  double h = 0.0;
  for (double v : p.probs)
    if (v > kProbFloor) h -= v * std::log(v);
  return h < 0.0 ? 0.0 : h;
}

double kl_categorical(const Categorical& p, const Categorical& q) {
  if (p.size() != q.size())
    throw std::invalid_argument("kl_categorical: dimension mismatch");
  double kl = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] <= kProbFloor) continue;
    if (q[k] <= kProbFloor)
      throw std::invalid_argument(
          "kl_categorical: support mismatch at class " + std::to_string(k));
    kl += p[k] * std::log(p[k] / q[k]);
  }
  return kl < 0.0 ? 0.0 : kl;
}

Categorical dirichlet_mean(const DirichletParams& d) {
  std::vector<double> p(d.size());
  for (std::size_t k = 0; k < d.size(); ++k) p[k] = d.alphas[k] / d.alpha0;
  return Categorical(std::move(p));
}

double dirichlet_expected_entropy(const DirichletParams& d) {
  double h = digamma(d.alpha0 + 1.0);
  for (double a : d.alphas) h -= (a / d.alpha0) * digamma(a + 1.0);
  return h < 0.0 ? 0.0 : h;
}

UncertaintyDecomposition dirichlet_decompose(const DirichletParams& d) {
  UncertaintyDecomposition u;
  u.total = entropy(dirichlet_mean(d));
  u.data = dirichlet_expected_entropy(d);
  u.knowledge = u.total - u.data;
  return u;
}

double kl_dirichlet(const DirichletParams& a, const DirichletParams& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("kl_dirichlet: dimension mismatch");
  double kl = log_gamma(a.alpha0) - log_gamma(b.alpha0);
  const double psi_a0 = digamma(a.alpha0);
  for (std::size_t k = 0; k < a.size(); ++k) {
    kl -= log_gamma(a.alphas[k]) - log_gamma(b.alphas[k]);
    kl += (a.alphas[k] - b.alphas[k]) * (digamma(a.alphas[k]) - psi_a0);
  }
  return kl < 0.0 ? 0.0 : kl;
}

}  // namespace udst
