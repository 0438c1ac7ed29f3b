// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef UDST_CALIB_HPP
#define UDST_CALIB_HPP

#include <cstddef>
#include <vector>

#include "udst/uncmath.hpp"

// Evaluation metrics: joint goal accuracy, L2-Error, expected calibration
// error, and reliability-diagram tables.

namespace udst {

/// Per-turn slot predictions against gold value indices.
struct TurnEvaluation {
  std::vector<Categorical> slot_predictions;
  std::vector<std::size_t> gold_values;  // one index per slot

  /// Product over slots of the max probability.
  double joint_confidence() const;
  /// Every slot's argmax equals gold.
  bool joint_correct() const;
};

enum class L2Aggregation {
  kSumOverSlots,  // default: per-turn sum of slot norms
  kMeanOverSlots,
};

/// Percentage of turns where every slot is predicted correctly.
double joint_goal_accuracy(const std::vector<TurnEvaluation>& evals);

/// Mean over turns of the aggregated per-slot L2 norm ||pred - onehot(gold)||.
double l2_error(const std::vector<TurnEvaluation>& evals,
                L2Aggregation agg = L2Aggregation::kSumOverSlots);

struct ReliabilityBin {
  double mean_confidence = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;
};

/// Equal-width bins over joint confidence in [0,1].
std::vector<ReliabilityBin> reliability_table(
    const std::vector<TurnEvaluation>& evals, std::size_t num_bins);

/// ECE as a percentage: sum_b (n_b/N) |acc_b - conf_b| * 100.
double ece(const std::vector<TurnEvaluation>& evals, std::size_t num_bins = 10);

/// ECE recomputed from a reliability table (bit-exact with ece()).
double ece_from_table(const std::vector<ReliabilityBin>& table);

}  // namespace udst

#endif  // UDST_CALIB_HPP
