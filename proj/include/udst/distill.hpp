// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef UDST_DISTILL_HPP
#define UDST_DISTILL_HPP

#include <cstddef>
#include <vector>

#include "udst/diffnet.hpp"
#include "udst/ensemble.hpp"
#include "udst/uncmath.hpp"

// Training targets and losses: label smoothing for single models, EnD for
// ensemble distillation, and EnD^2 with its Proxy Dirichlet Target.

namespace udst {

struct SmoothedTarget {
  Categorical probs;
  double epsilon = 0.0;
};

/// (1 - eps) * one_hot(class_index) + eps / K.
/// Throws std::out_of_range for a bad class index, std::invalid_argument
/// for eps outside [0, 1).
SmoothedTarget smooth_labels(std::size_t class_index, std::size_t num_classes,
                             double epsilon);

/// KL[target || pred].
double label_smoothing_loss(const Categorical& pred,
                            const SmoothedTarget& target);

/// p^(1/T) renormalized.
Categorical temper(const Categorical& p, double temperature);

/// KL[temper(posterior, T) || temper(student, T)]; T >= 1.
double end_loss(const Categorical& student, const Categorical& ensemble_posterior,
                double temperature);

struct ProxyDirichletTarget {
  Categorical pi_hat;       // ensemble mean
  DirichletParams beta;     // beta_k = pi_hat_k * beta_tilde0 + 1
  double beta_tilde0 = 0.0;
};

/// Proxy Dirichlet Target from ensemble member outputs. Each member is
/// smoothed as p <- (1 - smoothing*K) * p + smoothing before any log.
/// Throws std::runtime_error if the precision denominator is non-finite.
ProxyDirichletTarget proxy_dirichlet_target(const EnsemblePrediction& e,
                                            double smoothing);

/// EnD^2 loss on the tape: alpha = exp(clamped logits),
///   -sum_k pi_hat_k (psi(alpha_k) - psi(alpha_0))
///   + (1/beta_0) KL[Dir(alpha) || Dir(1)].
Tape::Var end2_loss(Tape& tape, Tape::Var student_logits,
                    const ProxyDirichletTarget& proxy);

/// Scalar convenience wrapper over the tape version.
double end2_loss_value(const std::vector<double>& student_logits,
                       const ProxyDirichletTarget& proxy);

/// EnD loss on the tape from student logits (temper = softmax(logits / T)).
Tape::Var end_loss_on_logits(Tape& tape, Tape::Var student_logits,
                             const Categorical& ensemble_posterior,
                             double temperature);

/// Linear annealing from base temperature to 1.0 over the first
/// `anneal_fraction` of training, then 1.0.
double annealed_temperature(double base, double progress,
                            double anneal_fraction);

}  // namespace udst

#endif  // UDST_DISTILL_HPP
