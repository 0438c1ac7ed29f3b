// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef UDST_POLICY_HPP
#define UDST_POLICY_HPP

#include <cstdint>
#include <random>
#include <vector>

#include "udst/dialoguesim.hpp"
#include "udst/diffnet.hpp"
#include "udst/tracker.hpp"

// Dialogue policy over belief-state features: supervised pretraining from the
// scripted corpus, PPO fine-tuning, and simulated evaluation.

namespace udst {

struct PolicyConfig {
  std::size_t hidden = 64;
  double clip = 0.2;
  double gamma = 0.99;
  double lambda = 0.95;
  int inner_epochs = 4;
  double entropy_bonus = 0.01;
  double value_coef = 0.5;
  double learning_rate = 1e-3;
};

/// Two 2-layer MLPs (policy and value), nothing shared.
class PolicyNet {
 public:
  PolicyNet(std::size_t feature_dim, std::size_t num_actions,
            const PolicyConfig& config, std::uint64_t seed);

  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t num_actions() const { return num_actions_; }
  const PolicyConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Tape graph: action logits / state value for a feature input.
  Tape::Var logits(Tape& tape, const ParamStore& ps, Tape::Var features) const;
  Tape::Var value(Tape& tape, const ParamStore& ps, Tape::Var features) const;

  /// Numeric inference. Throws on feature-length mismatch.
  Categorical action_probs(const std::vector<double>& features) const;
  double value_estimate(const std::vector<double>& features) const;

 private:
  std::size_t feature_dim_;
  std::size_t num_actions_;
  PolicyConfig config_;
  ParamStore params_;
};

// ---------------------------------------------------------------------------
// Trajectories

struct TrajectoryStep {
  std::vector<double> features;
  int action = 0;
  double reward = 0.0;
  double log_prob = 0.0;
  double value = 0.0;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  bool terminal = false;
};

// ---------------------------------------------------------------------------
// Supervised pretraining

struct PretrainResult {
  std::vector<double> epoch_losses;  // mean cross-entropy per epoch
  double accuracy = 0.0;             // final argmax accuracy on the data
};

/// Minimizes cross-entropy between the policy distribution and the corpus
/// actions. Throws on feature-length mismatch.
PretrainResult pretrain_supervised(PolicyNet& policy,
                                   const std::vector<std::vector<double>>& states,
                                   const std::vector<int>& actions, int epochs,
                                   double learning_rate);

/// (belief state, scripted action) pairs from a corpus: belief states come
/// from running `tracker` over each dialogue (or from oracle gold labels when
/// `oracle_states` is set), actions from the recorded system turns.
struct PretrainData {
  std::vector<std::vector<double>> states;
  std::vector<int> actions;
};
PretrainData pretrain_data_from_corpus(const DialogueCorpus& corpus,
                                       const Tracker& tracker, BeliefMode mode,
                                       bool oracle_states);

// ---------------------------------------------------------------------------
// Interaction

struct EpisodeResult {
  Trajectory trajectory;
  DialogueRecord record;
};

/// One simulated dialogue: user utterance -> tracker -> belief state ->
/// policy action -> simulator. Per-turn reward -1, terminal +80/-40.
EpisodeResult run_episode(const World& world, const Tracker& tracker,
                          const PolicyNet& policy, BeliefMode mode,
                          const EngineConfig& config, std::mt19937_64& rng,
                          bool greedy);

struct EvaluationSummary {
  double success_rate = 0.0;  // percent
  double mean_reward = 0.0;
  double mean_turns = 0.0;
  std::size_t episodes = 0;
};

/// Averages over n seeded greedy episodes.
EvaluationSummary evaluate_policy(const World& world, const Tracker& tracker,
                                  const PolicyNet& policy, BeliefMode mode,
                                  const EngineConfig& config,
                                  std::size_t n_dialogues, std::uint64_t seed);

// ---------------------------------------------------------------------------
// PPO

struct PpoDiagnostics {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
};

/// Generalized advantage estimates and discounted returns for one
/// trajectory (terminal bootstrap value 0).
struct AdvantageEstimates {
  std::vector<double> advantages;
  std::vector<double> returns;
};
AdvantageEstimates compute_gae(const Trajectory& trajectory, double gamma,
                               double lambda);

/// Clipped-surrogate PPO with value regression and entropy bonus; inner
/// epochs over the whole batch. Throws std::runtime_error with diagnostics on
/// a non-finite loss.
PpoDiagnostics ppo_update(PolicyNet& policy,
                          const std::vector<Trajectory>& batch);

}  // namespace udst

#endif  // UDST_POLICY_HPP
