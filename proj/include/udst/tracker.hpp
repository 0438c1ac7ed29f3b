// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef UDST_TRACKER_HPP
#define UDST_TRACKER_HPP

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "udst/dialoguesim.hpp"
#include "udst/diffnet.hpp"
#include "udst/distill.hpp"
#include "udst/uncmath.hpp"

// Desk-scale set-based belief tracker: toy turn encoder, slot-utterance
// matching attention, per-slot context tracking with a convolutional Set
// Pooler, four prediction heads, and belief-state assembly.

namespace udst {

struct TrackerConfig {
  std::size_t embed_dim = 16;
  std::size_t hidden = 32;       // token-state width (biGRU: hidden/2 per dir)
  std::size_t heads = 2;
  std::size_t context_len = 4;   // slot/value description length
  std::size_t max_turn_len = 32;
  double logit_scale = 1.0;      // multiplier on cosine goal logits
  bool dirichlet_head = false;   // goal head parameterizes Dirichlet alphas
};

struct TurnInput {
  std::vector<int> system_tokens;  // previous system utterance, token ids
  std::vector<int> user_tokens;    // current user utterance, token ids
};

/// [<bos>] + system + [<sep>] + user, truncated to max_len.
std::vector<int> turn_token_ids(const World& world, const TurnInput& turn,
                                std::size_t max_len);

/// Per-slot goal prediction, tagged by head type.
struct SlotDistribution {
  Categorical probs;  // predictive distribution (softmax of the logits)
  std::optional<DirichletParams> alphas;  // present for the Dirichlet head
};

struct TrackerOutput {
  std::vector<SlotDistribution> goals;  // per flat slot
  std::vector<double> request_probs;    // per flat slot
  std::vector<double> domain_probs;     // per domain
  Categorical general;                  // {none, thank_you, goodbye}
};

enum class BeliefMode { kBinary, kConfidence, kTotalUnc, kKnowledgeUnc };

BeliefMode belief_mode_from_string(const std::string& name);
std::string to_string(BeliefMode mode);

struct DbFeatures {
  std::vector<int> match_counts;              // per domain
  std::vector<std::array<double, 4>> buckets;  // per domain, one-hot
  std::map<std::size_t, int> constraints;      // participating flat -> cand
};

/// A slot constraint participates iff its (mode-rounded) confidence is
/// strictly greater than chance 1/K_s and its top value is not "none".
DbFeatures db_query(const TrackerOutput& output, BeliefMode mode,
                    const World& world);

struct BeliefState {
  std::vector<double> features;          // fixed flattening order
  std::vector<std::size_t> top_values;   // per slot, candidate index
  std::vector<double> confidences;       // per slot, after mode rounding
};

/// Feature vector length as a pure function of (world, mode).
std::size_t belief_feature_size(const World& world, BeliefMode mode);

/// Flattening order: per slot [one-hot top value, confidence, optional
/// uncertainty feature], then user-action features (general probs, request
/// probs, domain probs), db buckets, previous system action one-hot
/// (ActionSpace index, last position = hello), booking flags, termination.
/// Throws std::invalid_argument for knowledge mode on a non-Dirichlet output.
BeliefState assemble_belief_state(const TrackerOutput& output,
                                  const DbFeatures& db, int prev_sys_action,
                                  const std::vector<bool>& bookings,
                                  bool terminated, BeliefMode mode,
                                  const World& world);

// ---------------------------------------------------------------------------
// Model

/// Per-turn forward results as tape variables.
struct TurnForward {
  Tape::Var x0;                            // turn vector [D]
  std::vector<Tape::Var> pooled;           // per slot [D]
  std::vector<Tape::Var> goal_logits;      // per slot [K_s] (scaled cosines)
  std::vector<Tape::Var> goal_probs;       // per slot [K_s] softmax
  std::vector<Tape::Var> request_probs;    // per slot [1]
  std::vector<Tape::Var> domain_probs;     // per domain [1]
  Tape::Var general_probs;                 // [3]
};

class Tracker {
 public:
  Tracker(const World& world, TrackerConfig config, std::uint64_t seed);

  const World& world() const { return *world_; }
  const TrackerConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Tape-bound per-dialogue state: slot contexts plus candidate and query
  /// encodings (computed once per dialogue).
  struct DialogueGraph {
    Tape* tape = nullptr;
    std::vector<Tape::Var> context;                   // per slot [L, D]
    std::vector<Tape::Var> slot_queries;              // per slot [L, D]
    std::vector<std::vector<Tape::Var>> candidates;   // per slot, per cand [D]
  };

  DialogueGraph begin_dialogue(Tape& tape) const;
  TurnForward forward_turn(DialogueGraph& graph, const TurnInput& turn) const;

  /// Numeric output extracted from a forward pass.
  TrackerOutput output_from(const Tape& tape, const TurnForward& fwd) const;

  /// Convenience: track a whole dialogue (inference only).
  std::vector<TrackerOutput> track_dialogue(
      const std::vector<TurnInput>& turns) const;

 private:
  const World* world_;
  TrackerConfig config_;
  ParamStore params_;
};

// ---------------------------------------------------------------------------
// Building blocks (free functions; the class methods are thin wrappers)

struct EncodedTurn {
  Tape::Var token_states;  // [T, D]
  Tape::Var x0;            // [D], state at the leading <bos> token
};

/// Embedding + bidirectional GRU over [<bos>] + system + [<sep>] + user.
EncodedTurn encode_turn(Tape& tape, const ParamStore& ps,
                        const TrackerConfig& config,
                        const std::vector<int>& token_ids);

/// Attention with slot-description states as queries, token states as
/// keys/values. Output length = description length.
Tape::Var slot_utterance_match(Tape& tape, const ParamStore& ps,
                               const TrackerConfig& config,
                               Tape::Var token_states, Tape::Var slot_queries);

struct SlotContextVars {
  Tape::Var context;  // [L, D]
  Tape::Var pooled;   // [D] = mean-pool(conv1d3(context))
};

/// Positionwise shared GRU update followed by the Set Pooler.
SlotContextVars update_context(Tape& tape, const ParamStore& ps,
                               Tape::Var prev_context, Tape::Var matched);

/// Set Pooler only: mean-pool(conv1d3(x)).
Tape::Var set_pool(Tape& tape, const ParamStore& ps, Tape::Var sequence);

/// Softmax over scaled cosine similarities between the pooled context and
/// each candidate vector. Returns (logits, probs).
std::pair<Tape::Var, Tape::Var> predict_goal(
    Tape& tape, Tape::Var pooled, const std::vector<Tape::Var>& candidates,
    double logit_scale);

Tape::Var predict_general_action(Tape& tape, const ParamStore& ps,
                                 Tape::Var x0);
Tape::Var predict_request(Tape& tape, const ParamStore& ps, Tape::Var pooled);
Tape::Var predict_active_domain(Tape& tape, const ParamStore& ps,
                                const std::vector<Tape::Var>& domain_pooled);

// ---------------------------------------------------------------------------
// Loss

struct TurnLabels {
  std::vector<std::size_t> goal;  // per flat slot, candidate index
  std::vector<bool> requested;    // per flat slot
  std::vector<bool> active;       // per domain
  int general = 0;
};

TurnLabels labels_from_gold(const GoldLabels& gold);

enum class GoalLossMode { kLabelSmoothing, kEnD, kEnD2 };

struct GoalSupervision {
  GoalLossMode mode = GoalLossMode::kLabelSmoothing;
  // kEnD: per-slot ensemble posteriors and the (annealed) temperature.
  std::vector<Categorical> posteriors;
  double temperature = 1.0;
  // kEnD2: per-slot proxy targets.
  std::vector<ProxyDirichletTarget> proxies;
};

struct LossWeights {
  double goal = 1.0;
  double general = 0.2;
  double request = 0.2;
  double domain = 0.2;
};

/// alpha_goal * L_goal + alpha_general * L_general + alpha_request *
/// L_request + alpha_domain * L_domain. Per-slot goal loss depends on the
/// supervision mode; binary heads use smoothed binary cross-entropy; per-task
/// losses are means over slots/domains.
Tape::Var multitask_loss(Tape& tape, const TurnForward& fwd,
                         const TurnLabels& labels,
                         const GoalSupervision& goal_supervision,
                         const LossWeights& weights, double label_epsilon);

}  // namespace udst

#endif  // UDST_TRACKER_HPP
