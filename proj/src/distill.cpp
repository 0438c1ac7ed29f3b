// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#include "udst/distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace udst {

SmoothedTarget smooth_labels(std::size_t class_index, std::size_t num_classes,
                             double epsilon) {
  if (class_index >= num_classes)
    throw std::out_of_range("smooth_labels: class index out of range");
  if (!(epsilon >= 0.0 && epsilon < 1.0))
    throw std::invalid_argument("smooth_labels: epsilon must be in [0,1)");
  std::vector<double> p(num_classes,
                        epsilon / static_cast<double>(num_classes));
  p[class_index] += 1.0 - epsilon;
  return SmoothedTarget{Categorical(std::move(p)), epsilon};
}

double label_smoothing_loss(const Categorical& pred,
                            const SmoothedTarget& target) {
  return kl_categorical(target.probs, pred);
}

Categorical temper(const Categorical& p, double temperature) {
  if (!(temperature > 0.0))
    throw std::invalid_argument("temper: temperature must be > 0");
  std::vector<double> q(p.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    q[k] = std::pow(std::max(p[k], 0.0), 1.0 / temperature);
    sum += q[k];
  }
  for (double& v : q) v /= sum;
  return Categorical(std::move(q));
}

double end_loss(const Categorical& student,
                const Categorical& ensemble_posterior, double temperature) {
  if (!(temperature >= 1.0))
    throw std::invalid_argument("end_loss: temperature must be >= 1");
  return kl_categorical(temper(ensemble_posterior, temperature),
                        temper(student, temperature));
}

ProxyDirichletTarget proxy_dirichlet_target(const EnsemblePrediction& e,
                                            double smoothing) {
  if (e.members.empty())
    throw std::invalid_argument("proxy_dirichlet_target: empty ensemble");
  const std::size_t k_classes = e.num_classes();
  const double m_count = static_cast<double>(e.members.size());

  // Smooth member distributions before any log.
  std::vector<std::vector<double>> smoothed(e.members.size());
  for (std::size_t m = 0; m < e.members.size(); ++m) {
    smoothed[m].resize(k_classes);
    for (std::size_t k = 0; k < k_classes; ++k)
      smoothed[m][k] =
          (1.0 - smoothing * static_cast<double>(k_classes)) * e.members[m][k] +
          smoothing;
  }

  std::vector<double> pi_hat(k_classes, 0.0);
  std::vector<double> mean_log(k_classes, 0.0);
  for (std::size_t m = 0; m < e.members.size(); ++m)
    for (std::size_t k = 0; k < k_classes; ++k) {
      pi_hat[k] += smoothed[m][k] / m_count;
      mean_log[k] += std::log(std::max(smoothed[m][k], kProbFloor)) / m_count;
    }

  double denom = 0.0;
  for (std::size_t k = 0; k < k_classes; ++k)
    denom += pi_hat[k] *
             (std::log(std::max(pi_hat[k], kProbFloor)) - mean_log[k]);
  // Identical members give a zero denominator even after smoothing; floor it
  // so the precision stays finite (and large).
  denom = std::max(denom, 1e-12);
  const double beta_tilde0 =
      static_cast<double>(k_classes - 1) / (2.0 * denom);
  if (!std::isfinite(beta_tilde0) || !(beta_tilde0 > 0.0))
    throw std::runtime_error(
        "proxy_dirichlet_target: degenerate ensemble, non-finite precision");

  std::vector<double> beta(k_classes);
  for (std::size_t k = 0; k < k_classes; ++k)
    beta[k] = pi_hat[k] * beta_tilde0 + 1.0;
  ProxyDirichletTarget target;
  target.pi_hat = Categorical(std::move(pi_hat));
  target.beta = DirichletParams(std::move(beta));
  target.beta_tilde0 = beta_tilde0;
  return target;
}

Tape::Var end2_loss(Tape& t, Tape::Var student_logits,
                    const ProxyDirichletTarget& proxy) {
  const std::size_t k_classes = proxy.pi_hat.size();
  if (t.value(student_logits).numel() != k_classes)
    throw std::invalid_argument("end2_loss: dimension mismatch");

  Tape::Var alpha = t.exp_clamped(student_logits);
  Tape::Var alpha0 = t.sum(alpha);
  Tape::Var psi_alpha = t.digamma_(alpha);
  Tape::Var psi_alpha0 = t.digamma_(alpha0);

  // Expectation term: -sum_k pi_hat_k (psi(alpha_k) - psi(alpha_0)),
  // using E[ln pi_k] = psi(alpha_k) - psi(alpha_0).
  Tensor pi_hat_v = Tensor::vec(k_classes);
  pi_hat_v.data = proxy.pi_hat.probs;
  Tape::Var pi_hat = t.input(std::move(pi_hat_v));
  Tape::Var expected =
      t.neg(t.dot(pi_hat, t.sub_broadcast(psi_alpha, psi_alpha0)));

  // KL[Dir(alpha) || Dir(1)] = ln G(a0) - sum ln G(a_k) - ln G(K)
  //                            + sum (a_k - 1)(psi(a_k) - psi(a0)).
  Tape::Var kl = t.sub(t.lgamma_(alpha0), t.sum(t.lgamma_(alpha)));
  kl = t.add_const(kl, -log_gamma(static_cast<double>(k_classes)));
  kl = t.add(kl, t.dot(t.add_const(alpha, -1.0),
                       t.sub_broadcast(psi_alpha, psi_alpha0)));

  const double beta0 = proxy.beta.alpha0;
  return t.add(expected, t.scale(kl, 1.0 / beta0));
}

double end2_loss_value(const std::vector<double>& student_logits,
                       const ProxyDirichletTarget& proxy) {
  Tape t;
  Tensor v = Tensor::vec(student_logits.size());
  v.data = student_logits;
  Tape::Var logits = t.input(std::move(v));
  return t.value(end2_loss(t, logits, proxy)).data[0];
}

Tape::Var end_loss_on_logits(Tape& t, Tape::Var student_logits,
                             const Categorical& ensemble_posterior,
                             double temperature) {
  if (!(temperature >= 1.0))
    throw std::invalid_argument("end_loss_on_logits: temperature must be >= 1");
  Categorical target = temper(ensemble_posterior, temperature);
  Tape::Var probs = t.softmax_vec(t.scale(student_logits, 1.0 / temperature));
  // KL[target || probs] = -H[target] + CE(target, probs); the entropy part
  // is constant w.r.t. the student.
  Tape::Var ce = t.cross_entropy_const(target.probs, probs);
  return t.add_const(ce, -entropy(target));
}

double annealed_temperature(double base, double progress,
                            double anneal_fraction) {
  if (anneal_fraction <= 0.0 || progress >= anneal_fraction) return 1.0;
  const double frac = std::clamp(progress / anneal_fraction, 0.0, 1.0);
  return base + (1.0 - base) * frac;
}

}  // namespace udst
