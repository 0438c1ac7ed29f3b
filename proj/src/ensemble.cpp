// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#include "udst/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace udst {

Categorical predictive_posterior(const EnsemblePrediction& e) {
  if (e.members.empty())
    throw std::invalid_argument("predictive_posterior: empty ensemble");
  const std::size_t k_classes = e.num_classes();
  std::vector<double> mean(k_classes, 0.0);
  for (const Categorical& m : e.members) {
    if (m.size() != k_classes)
      throw std::invalid_argument("predictive_posterior: member K mismatch");
    for (std::size_t k = 0; k < k_classes; ++k) mean[k] += m[k];
  }
  const double inv_m = 1.0 / static_cast<double>(e.members.size());
  for (double& v : mean) v *= inv_m;
  return Categorical(std::move(mean));
}

UncertaintyDecomposition ensemble_decompose(const EnsemblePrediction& e) {
  if (e.members.empty())
    throw std::invalid_argument("ensemble_decompose: empty ensemble");
  UncertaintyDecomposition u;
  u.total = entropy(predictive_posterior(e));
  double mean_entropy = 0.0;
  for (const Categorical& m : e.members) mean_entropy += entropy(m);
  u.data = mean_entropy / static_cast<double>(e.members.size());
  u.knowledge = u.total - u.data;
  return u;
}

std::vector<BaggingPlan> make_bagged_subsets(std::size_t dataset_size,
                                             std::size_t num_members,
                                             double fraction,
                                             std::uint64_t seed) {
  if (dataset_size < 1)
    throw std::invalid_argument("make_bagged_subsets: empty dataset");
  if (num_members < 1)
    throw std::invalid_argument("make_bagged_subsets: need >= 1 member");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("make_bagged_subsets: fraction must be in (0,1]");

  const auto subset_size = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(dataset_size)));
  std::vector<BaggingPlan> plans;
  plans.reserve(num_members);
  for (std::size_t m = 0; m < num_members; ++m) {
    const std::uint64_t member_seed = seed * 1000003u + m;
    std::mt19937_64 rng(member_seed);
    std::vector<std::uint32_t> ids(dataset_size);
    std::iota(ids.begin(), ids.end(), 0u);
    // Partial Fisher-Yates: the first subset_size entries are a uniform
    // without-replacement sample.
    for (std::size_t i = 0; i < subset_size; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, dataset_size - 1);
      std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(subset_size);
    std::sort(ids.begin(), ids.end());
    plans.push_back(BaggingPlan{static_cast<int>(m), std::move(ids),
                                member_seed});
  }
  return plans;
}

}  // namespace udst
