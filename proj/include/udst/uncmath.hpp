// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef UDST_UNCMATH_HPP
#define UDST_UNCMATH_HPP

#include <cstddef>
#include <vector>

// Probability and uncertainty primitives shared by every other module.
// All entropies, divergences and uncertainty measures are in nats.

namespace udst {

// Floor applied to probabilities inside entropy/KL to guard log(0).
inline constexpr double kProbFloor = 1e-12;

/// A discrete probability distribution over K outcomes.
struct Categorical {
  std::vector<double> probs;

  Categorical() = default;
  explicit Categorical(std::vector<double> p);

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t k) const { return probs[k]; }

  /// Index of the largest probability (first on ties).
  std::size_t argmax() const;
  double max_prob() const;

  /// Throws std::invalid_argument if entries are outside [0,1] or do not
  /// sum to 1 within 1e-9, or if K = 0.
  static Categorical checked(std::vector<double> p);
};

/// Concentration parameters of a Dirichlet distribution.
struct DirichletParams {
  std::vector<double> alphas;
  double alpha0 = 0.0;

  DirichletParams() = default;
  explicit DirichletParams(std::vector<double> a);

  std::size_t size() const { return alphas.size(); }

  /// Throws std::invalid_argument unless every alpha_k > 0.
  static DirichletParams checked(std::vector<double> a);
};

/// Total = data + knowledge, all in nats.
struct UncertaintyDecomposition {
  double total = 0.0;
  double data = 0.0;
  double knowledge = 0.0;
};

/// psi(x) for x > 0, accurate to 1e-10. Throws std::domain_error for x <= 0.
double digamma(double x);

/// psi'(x) for x > 0.
double trigamma(double x);

/// ln Gamma(x) for x > 0.
double log_gamma(double x);

/// Shannon entropy -sum p ln p, with 0 ln 0 = 0.
double entropy(const Categorical& p);

/// KL[p || q]. Throws udst::SupportMismatchError when p_k > 0 and q_k = 0.
double kl_categorical(const Categorical& p, const Categorical& q);

/// Mean of the Dirichlet: alpha_k / alpha_0.
Categorical dirichlet_mean(const DirichletParams& d);

/// E[H[Cat(pi)]] under Dir(alpha): psi(a0+1) - sum (a_k/a0) psi(a_k+1).
double dirichlet_expected_entropy(const DirichletParams& d);

/// total = H[mean], data = expected entropy, knowledge = total - data.
UncertaintyDecomposition dirichlet_decompose(const DirichletParams& d);

/// KL[Dir(a) || Dir(b)]; requires matching K.
double kl_dirichlet(const DirichletParams& a, const DirichletParams& b);

}  // namespace udst

#endif  // UDST_UNCMATH_HPP
