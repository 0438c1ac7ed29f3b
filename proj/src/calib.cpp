// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#include "udst/calib.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace udst {

double TurnEvaluation::joint_confidence() const {
  double conf = 1.0;
  for (const Categorical& p : slot_predictions) conf *= p.max_prob();
  return conf;
}

bool TurnEvaluation::joint_correct() const {
  for (std::size_t s = 0; s < slot_predictions.size(); ++s)
    if (slot_predictions[s].argmax() != gold_values[s]) return false;
  return true;
}

double joint_goal_accuracy(const std::vector<TurnEvaluation>& evals) {
  if (evals.empty())
    throw std::invalid_argument("joint_goal_accuracy: empty input");
  std::size_t correct = 0;
  for (const TurnEvaluation& e : evals)
    if (e.joint_correct()) ++correct;
  return 100.0 * static_cast<double>(correct) /
         static_cast<double>(evals.size());
}

double l2_error(const std::vector<TurnEvaluation>& evals, L2Aggregation agg) {
  if (evals.empty()) throw std::invalid_argument("l2_error: empty input");
  double total = 0.0;
  for (const TurnEvaluation& e : evals) {
    double turn = 0.0;
    for (std::size_t s = 0; s < e.slot_predictions.size(); ++s) {
      const Categorical& p = e.slot_predictions[s];
      double sq = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double target = (k == e.gold_values[s]) ? 1.0 : 0.0;
        const double diff = p[k] - target;
        sq += diff * diff;
      }
      turn += std::sqrt(sq);
    }
    if (agg == L2Aggregation::kMeanOverSlots && !e.slot_predictions.empty())
      turn /= static_cast<double>(e.slot_predictions.size());
    total += turn;
  }
  return total / static_cast<double>(evals.size());
}

std::vector<ReliabilityBin> reliability_table(
    const std::vector<TurnEvaluation>& evals, std::size_t num_bins) {
  if (num_bins < 1)
    throw std::invalid_argument("reliability_table: need >= 1 bin");
  std::vector<ReliabilityBin> bins(num_bins);
  std::vector<double> conf_sum(num_bins, 0.0);
  std::vector<std::size_t> correct(num_bins, 0);
  for (const TurnEvaluation& e : evals) {
    const double conf = e.joint_confidence();
    std::size_t b = static_cast<std::size_t>(
        conf * static_cast<double>(num_bins));
    if (b >= num_bins) b = num_bins - 1;  // conf == 1.0 lands in the top bin
    bins[b].count += 1;
    conf_sum[b] += conf;
    if (e.joint_correct()) correct[b] += 1;
  }
  for (std::size_t b = 0; b < num_bins; ++b) {
    if (bins[b].count == 0) continue;
    bins[b].mean_confidence = conf_sum[b] / static_cast<double>(bins[b].count);
    bins[b].accuracy =
        static_cast<double>(correct[b]) / static_cast<double>(bins[b].count);
  }
  return bins;
}

double ece_from_table(const std::vector<ReliabilityBin>& table) {
  std::size_t n = 0;
  for (const ReliabilityBin& b : table) n += b.count;
  if (n == 0) throw std::invalid_argument("ece_from_table: empty table");
  double total = 0.0;
  for (const ReliabilityBin& b : table)
    total += static_cast<double>(b.count) / static_cast<double>(n) *
             std::abs(b.accuracy - b.mean_confidence);
  return 100.0 * total;
}

double ece(const std::vector<TurnEvaluation>& evals, std::size_t num_bins) {
  if (evals.empty()) throw std::invalid_argument("ece: empty input");
  return ece_from_table(reliability_table(evals, num_bins));
}

}  // namespace udst
