// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#include "udst/policy.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace udst {

// ---------------------------------------------------------------------------
// PolicyNet

PolicyNet::PolicyNet(std::size_t feature_dim, std::size_t num_actions,
                     const PolicyConfig& config, std::uint64_t seed)
    : feature_dim_(feature_dim), num_actions_(num_actions), config_(config) {
  if (feature_dim == 0 || num_actions < 2)
    throw std::invalid_argument("PolicyNet: bad dimensions");
  const std::size_t h = config_.hidden;
  params_.add("pi_w1", init_uniform({h, feature_dim}, feature_dim, seed + 1));
  params_.add("pi_b1", Tensor::vec(h));
  params_.add("pi_w2", init_uniform({num_actions, h}, h, seed + 2));
  params_.add("pi_b2", Tensor::vec(num_actions));
  params_.add("v_w1", init_uniform({h, feature_dim}, feature_dim, seed + 3));
  params_.add("v_b1", Tensor::vec(h));
  params_.add("v_w2", init_uniform({1, h}, h, seed + 4));
  params_.add("v_b2", Tensor::vec(1));
}

Tape::Var PolicyNet::logits(Tape& t, const ParamStore& ps,
                            Tape::Var features) const {
  Tape::Var hidden = t.tanh_(
      t.affine(t.param(ps, "pi_w1"), features, t.param(ps, "pi_b1")));
  return t.affine(t.param(ps, "pi_w2"), hidden, t.param(ps, "pi_b2"));
}

Tape::Var PolicyNet::value(Tape& t, const ParamStore& ps,
                           Tape::Var features) const {
  Tape::Var hidden = t.tanh_(
      t.affine(t.param(ps, "v_w1"), features, t.param(ps, "v_b1")));
  return t.affine(t.param(ps, "v_w2"), hidden, t.param(ps, "v_b2"));
}

namespace {
Tape::Var feature_input(Tape& t, const std::vector<double>& features,
                        std::size_t expect) {
  if (features.size() != expect)
    throw std::invalid_argument("PolicyNet: feature length mismatch");
  Tensor x = Tensor::vec(features.size());
  x.data = features;
  return t.input(std::move(x));
}
}  // namespace

Categorical PolicyNet::action_probs(const std::vector<double>& features) const {
  Tape t;
  Tape::Var probs = t.softmax_vec(
      logits(t, params_, feature_input(t, features, feature_dim_)));
  return Categorical(t.value(probs).data);
}

double PolicyNet::value_estimate(const std::vector<double>& features) const {
  Tape t;
  return t.value(value(t, params_, feature_input(t, features, feature_dim_)))
      .data[0];
}

// ---------------------------------------------------------------------------
// Supervised pretraining

PretrainResult pretrain_supervised(PolicyNet& policy,
                                   const std::vector<std::vector<double>>& states,
                                   const std::vector<int>& actions, int epochs,
                                   double learning_rate) {
  if (states.size() != actions.size() || states.empty())
    throw std::invalid_argument("pretrain_supervised: bad data");
  const std::size_t batch = 16;
  PretrainResult result;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < states.size(); start += batch) {
      const std::size_t end = std::min(states.size(), start + batch);
      Tape t;
      Tape::Var loss = t.constant(0.0);
      for (std::size_t i = start; i < end; ++i) {
        Tape::Var probs = t.softmax_vec(policy.logits(
            t, policy.params(),
            feature_input(t, states[i], policy.feature_dim())));
        std::vector<double> onehot(policy.num_actions(), 0.0);
        onehot[static_cast<std::size_t>(actions[i])] = 1.0;
        loss = t.add(loss, t.cross_entropy_const(onehot, probs));
      }
      loss = t.scale(loss, 1.0 / static_cast<double>(end - start));
      epoch_loss += t.value(loss).data[0] * static_cast<double>(end - start);
      Grads grads = t.backward(loss);
      adam_step(policy.params(), grads, learning_rate);
    }
    result.epoch_losses.push_back(epoch_loss /
                                  static_cast<double>(states.size()));
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < states.size(); ++i)
    if (static_cast<int>(policy.action_probs(states[i]).argmax()) ==
        actions[i])
      ++correct;
  result.accuracy =
      static_cast<double>(correct) / static_cast<double>(states.size());
  return result;
}

namespace {

/// Oracle tracker output built directly from gold labels.
TrackerOutput oracle_output(const GoldLabels& gold, const World& world) {
  TrackerOutput out;
  for (std::size_t flat = 0; flat < world.num_slots(); ++flat) {
    std::vector<double> p(world.num_candidates(flat), 0.0);
    p[static_cast<std::size_t>(gold.slot_values[flat])] = 1.0;
    out.goals.push_back(SlotDistribution{Categorical(std::move(p)),
                                         std::nullopt});
    out.request_probs.push_back(gold.requested[flat] ? 1.0 : 0.0);
  }
  for (bool a : gold.active_domains) out.domain_probs.push_back(a ? 1.0 : 0.0);
  std::vector<double> gen(3, 0.0);
  gen[static_cast<std::size_t>(gold.general_action)] = 1.0;
  out.general = Categorical(std::move(gen));
  return out;
}

int encode_prev_action(const SystemTurn& sys, const ActionSpace& space) {
  if (sys.action.kind == SystemAction::kHello) return -1;
  return space.encode(sys.action);
}

void update_bookings(std::vector<bool>& bookings, const SystemTurn& sys) {
  if (sys.action.kind == SystemAction::kBook && sys.entity_row >= 0)
    bookings[static_cast<std::size_t>(sys.action.domain)] = true;
}

}  // namespace

PretrainData pretrain_data_from_corpus(const DialogueCorpus& corpus,
                                       const Tracker& tracker, BeliefMode mode,
                                       bool oracle_states) {
  const World& world = tracker.world();
  ActionSpace space{world.config.num_domains, world.config.slots_per_domain};
  PretrainData data;
  for (const DialogueRecord& dialogue : corpus.dialogues) {
    Tape tape;
    Tracker::DialogueGraph graph = tracker.begin_dialogue(tape);
    std::vector<bool> bookings(
        static_cast<std::size_t>(world.config.num_domains), false);
    for (std::size_t t = 0; t + 1 < dialogue.turns.size(); ++t) {
      const TurnRecord& turn = dialogue.turns[t];
      update_bookings(bookings, turn.sys);
      TrackerOutput out;
      if (oracle_states) {
        out = oracle_output(turn.gold, world);
      } else {
        TurnInput input{world.token_ids(turn.sys_tokens),
                        world.token_ids(turn.user_tokens)};
        out = tracker.output_from(tape, tracker.forward_turn(graph, input));
      }
      DbFeatures db = db_query(out, mode, world);
      BeliefState belief = assemble_belief_state(
          out, db, encode_prev_action(turn.sys, space), bookings, false, mode,
          world);
      data.states.push_back(std::move(belief.features));
      data.actions.push_back(space.encode(dialogue.turns[t + 1].sys.action));
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// Interaction

EpisodeResult run_episode(const World& world, const Tracker& tracker,
                          const PolicyNet& policy, BeliefMode mode,
                          const EngineConfig& config, std::mt19937_64& rng,
                          bool greedy) {
  ActionSpace space{world.config.num_domains, world.config.slots_per_domain};
  UserGoal goal = sample_user_goal(world, rng);

  EpisodeResult episode;
  Tape tape;
  Tracker::DialogueGraph graph = tracker.begin_dialogue(tape);
  std::vector<bool> bookings(
      static_cast<std::size_t>(world.config.num_domains), false);

  auto callback = [&](const TurnRecord& turn, int /*turn_index*/) {
    update_bookings(bookings, turn.sys);
    TurnInput input{world.token_ids(turn.sys_tokens),
                    world.token_ids(turn.user_tokens)};
    TrackerOutput out =
        tracker.output_from(tape, tracker.forward_turn(graph, input));
    DbFeatures db = db_query(out, mode, world);
    BeliefState belief = assemble_belief_state(
        out, db, encode_prev_action(turn.sys, space), bookings, false, mode,
        world);

    Categorical probs = policy.action_probs(belief.features);
    int action;
    if (greedy) {
      action = static_cast<int>(probs.argmax());
    } else {
      const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      double acc = 0.0;
      action = static_cast<int>(probs.size()) - 1;
      for (std::size_t k = 0; k < probs.size(); ++k) {
        acc += probs[k];
        if (u < acc) {
          action = static_cast<int>(k);
          break;
        }
      }
    }

    TrajectoryStep step;
    step.features = belief.features;
    step.action = action;
    step.log_prob =
        std::log(std::max(probs[static_cast<std::size_t>(action)], kProbFloor));
    step.value = policy.value_estimate(belief.features);
    step.reward = -1.0;  // terminal bonus added after the episode
    episode.trajectory.steps.push_back(std::move(step));

    SystemDecision decision;
    decision.action_index = action;
    decision.constraints = db.constraints;
    for (std::size_t flat = 0; flat < out.request_probs.size(); ++flat)
      if (out.request_probs[flat] > 0.5) decision.answer_slots.insert(flat);
    return decision;
  };

  episode.record = run_dialogue(world, goal, callback, config, rng);
  episode.trajectory.terminal = true;
  if (!episode.trajectory.steps.empty())
    episode.trajectory.steps.back().reward +=
        episode.record.result.success ? 80.0 : -40.0;
  return episode;
}

EvaluationSummary evaluate_policy(const World& world, const Tracker& tracker,
                                  const PolicyNet& policy, BeliefMode mode,
                                  const EngineConfig& config,
                                  std::size_t n_dialogues, std::uint64_t seed) {
  if (n_dialogues == 0)
    throw std::invalid_argument("evaluate_policy: n must be >= 1");
  std::mt19937_64 rng(seed);
  EvaluationSummary summary;
  summary.episodes = n_dialogues;
  for (std::size_t i = 0; i < n_dialogues; ++i) {
    EpisodeResult ep =
        run_episode(world, tracker, policy, mode, config, rng, /*greedy=*/true);
    summary.success_rate += ep.record.result.success ? 100.0 : 0.0;
    summary.mean_reward += ep.record.result.reward;
    summary.mean_turns += static_cast<double>(ep.record.result.turns);
  }
  const double n = static_cast<double>(n_dialogues);
  summary.success_rate /= n;
  summary.mean_reward /= n;
  summary.mean_turns /= n;
  return summary;
}

// ---------------------------------------------------------------------------
// PPO

AdvantageEstimates compute_gae(const Trajectory& trajectory, double gamma,
                               double lambda) {
  const std::size_t n = trajectory.steps.size();
  AdvantageEstimates est;
  est.advantages.assign(n, 0.0);
  est.returns.assign(n, 0.0);
  double gae = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double next_value =
        i + 1 < n ? trajectory.steps[i + 1].value : 0.0;  // terminal bootstrap
    const double delta = trajectory.steps[i].reward + gamma * next_value -
                         trajectory.steps[i].value;
    gae = delta + gamma * lambda * gae;
    est.advantages[i] = gae;
    est.returns[i] = gae + trajectory.steps[i].value;
  }
  return est;
}

PpoDiagnostics ppo_update(PolicyNet& policy,
                          const std::vector<Trajectory>& batch) {
  if (batch.empty()) throw std::invalid_argument("ppo_update: empty batch");
  const PolicyConfig& cfg = policy.config();

  struct Flat {
    const TrajectoryStep* step;
    double advantage;
    double ret;
  };
  std::vector<Flat> steps;
  for (const Trajectory& traj : batch) {
    AdvantageEstimates est = compute_gae(traj, cfg.gamma, cfg.lambda);
    for (std::size_t i = 0; i < traj.steps.size(); ++i)
      steps.push_back({&traj.steps[i], est.advantages[i], est.returns[i]});
  }
  if (steps.empty()) throw std::invalid_argument("ppo_update: no steps");

  // Advantage normalization over the batch.
  double mean = 0.0, var = 0.0;
  for (const Flat& f : steps) mean += f.advantage;
  mean /= static_cast<double>(steps.size());
  for (const Flat& f : steps) {
    const double d = f.advantage - mean;
    var += d * d;
  }
  const double stddev =
      std::sqrt(var / static_cast<double>(steps.size())) + 1e-8;
  for (Flat& f : steps) f.advantage = (f.advantage - mean) / stddev;

  PpoDiagnostics diag;
  const double inv_n = 1.0 / static_cast<double>(steps.size());
  for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
    Tape t;
    Tape::Var policy_loss = t.constant(0.0);
    Tape::Var value_loss = t.constant(0.0);
    Tape::Var entropy_sum = t.constant(0.0);
    double ratio_sum = 0.0;
    std::size_t clipped = 0;

    for (const Flat& f : steps) {
      Tape::Var x = feature_input(t, f.step->features, policy.feature_dim());
      Tape::Var probs = t.softmax_vec(policy.logits(t, policy.params(), x));
      std::vector<double> onehot(policy.num_actions(), 0.0);
      onehot[static_cast<std::size_t>(f.step->action)] = 1.0;
      Tape::Var log_prob = t.neg(t.cross_entropy_const(onehot, probs));
      Tape::Var ratio =
          t.exp_clamped(t.add_const(log_prob, -f.step->log_prob));
      const double ratio_val = t.value(ratio).data[0];
      ratio_sum += ratio_val;

      // min(r A, clip(r) A): when the clipped branch is active its gradient
      // is zero, so it enters as a constant.
      const bool clip_active = (f.advantage >= 0.0 &&
                                ratio_val > 1.0 + cfg.clip) ||
                               (f.advantage < 0.0 &&
                                ratio_val < 1.0 - cfg.clip);
      if (clip_active) {
        const double r_clip =
            std::clamp(ratio_val, 1.0 - cfg.clip, 1.0 + cfg.clip);
        policy_loss = t.add_const(policy_loss, -r_clip * f.advantage * inv_n);
        ++clipped;
      } else {
        policy_loss =
            t.add(policy_loss, t.scale(ratio, -f.advantage * inv_n));
      }

      Tape::Var v = policy.value(t, policy.params(), x);
      Tape::Var diff = t.add_const(v, -f.ret);
      value_loss = t.add(value_loss, t.scale(t.mul(diff, diff), inv_n));
      entropy_sum =
          t.add(entropy_sum, t.scale(t.dot(probs, t.log_(probs)), -inv_n));
    }

    Tape::Var total = t.add(policy_loss, t.scale(value_loss, cfg.value_coef));
    total = t.add(total, t.scale(entropy_sum, -cfg.entropy_bonus));

    diag.policy_loss = t.value(policy_loss).data[0];
    diag.value_loss = t.value(value_loss).data[0];
    diag.entropy = t.value(entropy_sum).data[0];
    diag.mean_ratio = ratio_sum * inv_n;
    diag.clip_fraction = static_cast<double>(clipped) * inv_n;

    const double total_val = t.value(total).data[0];
    if (!std::isfinite(total_val)) {
      std::ostringstream oss;
      oss << "ppo_update: non-finite loss (policy=" << diag.policy_loss
          << ", value=" << diag.value_loss << ", entropy=" << diag.entropy
          << ")";
      throw std::runtime_error(oss.str());
    }
    Grads grads = t.backward(total);
    adam_step(policy.params(), grads, cfg.learning_rate);
  }
  return diag;
}

}  // namespace udst
