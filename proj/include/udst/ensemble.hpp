// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef UDST_ENSEMBLE_HPP
#define UDST_ENSEMBLE_HPP

#include <cstdint>
#include <vector>

#include "udst/uncmath.hpp"

namespace udst {

/// Per-input predictions of the M ensemble members, all over the same K.
struct EnsemblePrediction {
  std::vector<Categorical> members;

  std::size_t num_members() const { return members.size(); }
  std::size_t num_classes() const {
    return members.empty() ? 0 : members.front().size();
  }
};

/// One member's training subset: which dataset records it sees.
struct BaggingPlan {
  int member_index = 0;
  std::vector<std::uint32_t> record_ids;
  std::uint64_t seed = 0;
};

/// Elementwise mean of member distributions.
/// Throws std::invalid_argument on an empty ensemble.
Categorical predictive_posterior(const EnsemblePrediction& e);

/// total = H[posterior], data = mean member entropy, knowledge = difference
/// (the mutual information between prediction and member identity).
UncertaintyDecomposition ensemble_decompose(const EnsemblePrediction& e);

/// M subsets of ceil(fraction * dataset_size) distinct record ids, sampled
/// uniformly without replacement, independently per member. Deterministic
/// given seed. Throws std::invalid_argument for fraction outside (0, 1].
std::vector<BaggingPlan> make_bagged_subsets(std::size_t dataset_size,
                                             std::size_t num_members,
                                             double fraction,
                                             std::uint64_t seed);

}  // namespace udst

#endif  // UDST_ENSEMBLE_HPP
