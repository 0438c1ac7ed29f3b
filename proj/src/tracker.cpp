// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#include "udst/tracker.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace udst {

namespace {

std::vector<int> description_ids(const World& world,
                                 const std::vector<std::string>& tokens,
                                 std::size_t length) {
  std::vector<int> ids = world.token_ids(tokens);
  ids.resize(length, world.vocab.id("pad"));
  return ids;
}

std::vector<int> candidate_description_ids(const World& world,
                                           std::size_t flat, std::size_t cand,
                                           std::size_t length) {
  const SlotDef& slot = world.slot(flat);
  if (cand == 0) return description_ids(world, slot.none_description, length);
  std::vector<std::string> tokens{"value", slot.name,
                                  slot.values[cand - 1].canonical, "pad"};
  return description_ids(world, tokens, length);
}

/// Row-wise affine projection of an embedded [L, E] sequence to [L, D].
Tape::Var project_rows(Tape& t, const ParamStore& ps, Tape::Var rows,
                       std::size_t n_rows) {
  Tape::Var w = t.param(ps, "desc_w");
  Tape::Var b = t.param(ps, "desc_b");
  std::vector<Tape::Var> out;
  out.reserve(n_rows);
  for (std::size_t i = 0; i < n_rows; ++i)
    out.push_back(t.affine(w, t.row(rows, i), b));
  return t.stack_rows(out);
}

}  // namespace

std::vector<int> turn_token_ids(const World& world, const TurnInput& turn,
                                std::size_t max_len) {
  std::vector<int> ids;
  ids.push_back(world.vocab.id_checked("<bos>"));
  ids.insert(ids.end(), turn.system_tokens.begin(), turn.system_tokens.end());
  ids.push_back(world.vocab.id_checked("<sep>"));
  ids.insert(ids.end(), turn.user_tokens.begin(), turn.user_tokens.end());
  if (ids.size() > max_len) ids.resize(max_len);
  return ids;
}

// ---------------------------------------------------------------------------
// Building blocks

EncodedTurn encode_turn(Tape& t, const ParamStore& ps,
                        const TrackerConfig& config,
                        const std::vector<int>& token_ids) {
  if (token_ids.empty())
    throw std::invalid_argument("encode_turn: empty token sequence");
  const std::size_t half = config.hidden / 2;
  Tape::Var table = t.param(ps, "embed");
  Tape::Var emb = t.embed(table, token_ids);

  GruParams fwd = gru_params(t, ps, "enc_f");
  GruParams bwd = gru_params(t, ps, "enc_b");
  const std::size_t n = token_ids.size();

  std::vector<Tape::Var> hf(n), hb(n);
  Tape::Var h = t.input(Tensor::vec(half));
  for (std::size_t i = 0; i < n; ++i) {
    h = gru_cell(t, fwd, t.row(emb, i), h);
    hf[i] = h;
  }
  h = t.input(Tensor::vec(half));
  for (std::size_t i = n; i-- > 0;) {
    h = gru_cell(t, bwd, t.row(emb, i), h);
    hb[i] = h;
  }
  std::vector<Tape::Var> states;
  states.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    states.push_back(t.concat({hf[i], hb[i]}));
  EncodedTurn out;
  out.token_states = t.stack_rows(states);
  out.x0 = t.row(out.token_states, 0);
  return out;
}

Tape::Var slot_utterance_match(Tape& t, const ParamStore& ps,
                               const TrackerConfig& config,
                               Tape::Var token_states, Tape::Var slot_queries) {
  return attention(t, ps, "match", slot_queries, token_states, config.heads);
}

Tape::Var set_pool(Tape& t, const ParamStore& ps, Tape::Var sequence) {
  return t.mean_rows(
      t.conv1d3(sequence, t.param(ps, "pool_w"), t.param(ps, "pool_b")));
}

SlotContextVars update_context(Tape& t, const ParamStore& ps,
                               Tape::Var prev_context, Tape::Var matched) {
  const std::size_t length = t.value(prev_context).rows();
  if (t.value(matched).rows() != length)
    throw std::invalid_argument("update_context: sequence length mismatch");
  GruParams ctx = gru_params(t, ps, "ctx");
  std::vector<Tape::Var> rows;
  rows.reserve(length);
  for (std::size_t i = 0; i < length; ++i)
    rows.push_back(
        gru_cell(t, ctx, t.row(matched, i), t.row(prev_context, i)));
  SlotContextVars out;
  out.context = t.stack_rows(rows);
  out.pooled = set_pool(t, ps, out.context);
  return out;
}

std::pair<Tape::Var, Tape::Var> predict_goal(
    Tape& t, Tape::Var pooled, const std::vector<Tape::Var>& candidates,
    double logit_scale) {
  if (candidates.size() < 2)
    throw std::invalid_argument("predict_goal: need >= 2 candidates");
  std::vector<Tape::Var> logits;
  logits.reserve(candidates.size());
  for (Tape::Var cand : candidates)
    logits.push_back(t.scale(t.cosine(pooled, cand), logit_scale));
  Tape::Var logit_vec = t.concat(logits);
  return {logit_vec, t.softmax_vec(logit_vec)};
}

Tape::Var predict_general_action(Tape& t, const ParamStore& ps,
                                 Tape::Var x0) {
  return t.softmax_vec(
      t.affine(t.param(ps, "gen_w"), x0, t.param(ps, "gen_b")));
}

Tape::Var predict_request(Tape& t, const ParamStore& ps, Tape::Var pooled) {
  return t.sigmoid(
      t.affine(t.param(ps, "req_w"), pooled, t.param(ps, "req_b")));
}

Tape::Var predict_active_domain(Tape& t, const ParamStore& ps,
                                const std::vector<Tape::Var>& domain_pooled) {
  if (domain_pooled.empty())
    throw std::invalid_argument("predict_active_domain: empty domain");
  Tape::Var mean = t.mean_rows(t.stack_rows(domain_pooled));
  return t.sigmoid(
      t.affine(t.param(ps, "dom_w"), mean, t.param(ps, "dom_b")));
}

// ---------------------------------------------------------------------------
// Tracker

Tracker::Tracker(const World& world, TrackerConfig config, std::uint64_t seed)
    : world_(&world), config_(config) {
  if (config_.hidden % 2 != 0 || config_.hidden % config_.heads != 0)
    throw std::invalid_argument(
        "Tracker: hidden must be even and divisible by heads");
  const std::size_t e = config_.embed_dim;
  const std::size_t d = config_.hidden;
  std::uint64_t s = seed;
  auto next = [&s] { return ++s; };

  params_.add("embed",
              init_uniform({world.vocab.size(), e}, e, next()));
  add_gru_params(params_, "enc_f", e, d / 2, next());
  add_gru_params(params_, "enc_b", e, d / 2, next());
  params_.add("desc_w", init_uniform({d, e}, e, next()));
  params_.add("desc_b", Tensor::vec(d));
  add_attention_params(params_, "match", d, next());
  add_gru_params(params_, "ctx", d, d, next());
  params_.add("pool_w", init_uniform({3, d, d}, 3 * d, next()));
  params_.add("pool_b", Tensor::vec(d));
  params_.add("gen_w", init_uniform({3, d}, d, next()));
  params_.add("gen_b", Tensor::vec(3));
  params_.add("req_w", init_uniform({1, d}, d, next()));
  params_.add("req_b", Tensor::vec(1));
  params_.add("dom_w", init_uniform({1, d}, d, next()));
  params_.add("dom_b", Tensor::vec(1));
}

Tracker::DialogueGraph Tracker::begin_dialogue(Tape& t) const {
  DialogueGraph g;
  g.tape = &t;
  const std::size_t l = config_.context_len;
  const std::size_t d = config_.hidden;
  for (std::size_t flat = 0; flat < world_->num_slots(); ++flat) {
    g.context.push_back(t.input(Tensor::mat(l, d)));
    const SlotDef& slot = world_->slot(flat);
    Tape::Var desc_emb = t.embed(
        t.param(params_, "embed"),
        description_ids(*world_, slot.description, l));
    g.slot_queries.push_back(project_rows(t, params_, desc_emb, l));

    std::vector<Tape::Var> cands;
    for (std::size_t c = 0; c < world_->num_candidates(flat); ++c) {
      Tape::Var cand_emb =
          t.embed(t.param(params_, "embed"),
                  candidate_description_ids(*world_, flat, c, l));
      cands.push_back(
          set_pool(t, params_, project_rows(t, params_, cand_emb, l)));
    }
    g.candidates.push_back(std::move(cands));
  }
  return g;
}

TurnForward Tracker::forward_turn(DialogueGraph& g,
                                  const TurnInput& turn) const {
  Tape& t = *g.tape;
  EncodedTurn enc = encode_turn(
      t, params_, config_, turn_token_ids(*world_, turn, config_.max_turn_len));

  TurnForward fwd;
  fwd.x0 = enc.x0;
  for (std::size_t flat = 0; flat < world_->num_slots(); ++flat) {
    Tape::Var matched = slot_utterance_match(t, params_, config_,
                                             enc.token_states,
                                             g.slot_queries[flat]);
    SlotContextVars ctx = update_context(t, params_, g.context[flat], matched);
    g.context[flat] = ctx.context;
    fwd.pooled.push_back(ctx.pooled);
    auto [logits, probs] =
        predict_goal(t, ctx.pooled, g.candidates[flat], config_.logit_scale);
    fwd.goal_logits.push_back(logits);
    fwd.goal_probs.push_back(probs);
    fwd.request_probs.push_back(predict_request(t, params_, ctx.pooled));
  }
  for (int dom = 0; dom < world_->config.num_domains; ++dom) {
    std::vector<Tape::Var> pooled;
    for (std::size_t flat = 0; flat < world_->num_slots(); ++flat)
      if (world_->flat_slots[flat].first == dom)
        pooled.push_back(fwd.pooled[flat]);
    fwd.domain_probs.push_back(predict_active_domain(t, params_, pooled));
  }
  fwd.general_probs = predict_general_action(t, params_, enc.x0);
  return fwd;
}

TrackerOutput Tracker::output_from(const Tape& t,
                                   const TurnForward& fwd) const {
  TrackerOutput out;
  for (std::size_t flat = 0; flat < fwd.goal_probs.size(); ++flat) {
    SlotDistribution dist;
    dist.probs = Categorical(t.value(fwd.goal_probs[flat]).data);
    if (config_.dirichlet_head) {
      std::vector<double> alphas;
      for (double z : t.value(fwd.goal_logits[flat]).data)
        alphas.push_back(std::exp(std::clamp(z, -30.0, 30.0)));
      dist.alphas = DirichletParams(std::move(alphas));
    }
    out.goals.push_back(std::move(dist));
    out.request_probs.push_back(t.value(fwd.request_probs[flat]).data[0]);
  }
  for (Tape::Var dom : fwd.domain_probs)
    out.domain_probs.push_back(t.value(dom).data[0]);
  out.general = Categorical(t.value(fwd.general_probs).data);
  return out;
}

std::vector<TrackerOutput> Tracker::track_dialogue(
    const std::vector<TurnInput>& turns) const {
  Tape t;
  DialogueGraph g = begin_dialogue(t);
  std::vector<TrackerOutput> outputs;
  outputs.reserve(turns.size());
  for (const TurnInput& turn : turns)
    outputs.push_back(output_from(t, forward_turn(g, turn)));
  return outputs;
}

// ---------------------------------------------------------------------------
// Belief state

BeliefMode belief_mode_from_string(const std::string& name) {
  if (name == "binary") return BeliefMode::kBinary;
  if (name == "confidence") return BeliefMode::kConfidence;
  if (name == "total_unc") return BeliefMode::kTotalUnc;
  if (name == "knowledge_unc") return BeliefMode::kKnowledgeUnc;
  throw std::invalid_argument("unknown belief mode: " + name);
}

std::string to_string(BeliefMode mode) {
  switch (mode) {
    case BeliefMode::kBinary: return "binary";
    case BeliefMode::kConfidence: return "confidence";
    case BeliefMode::kTotalUnc: return "total_unc";
    case BeliefMode::kKnowledgeUnc: return "knowledge_unc";
  }
  return "?";
}

namespace {
double mode_confidence(double max_prob, BeliefMode mode) {
  if (mode == BeliefMode::kBinary) return max_prob >= 0.5 ? 1.0 : 0.0;
  return max_prob;
}
}  // namespace

DbFeatures db_query(const TrackerOutput& output, BeliefMode mode,
                    const World& world) {
  DbFeatures db;
  for (std::size_t flat = 0; flat < output.goals.size(); ++flat) {
    const Categorical& probs = output.goals[flat].probs;
    const std::size_t top = probs.argmax();
    const double conf = mode_confidence(probs.max_prob(), mode);
    const double chance = 1.0 / static_cast<double>(probs.size());
    if (top != 0 && conf > chance)
      db.constraints[flat] = static_cast<int>(top);
  }
  for (int dom = 0; dom < world.config.num_domains; ++dom) {
    const int count =
        static_cast<int>(db_query_domain(world, dom, db.constraints).size());
    db.match_counts.push_back(count);
    db.buckets.push_back(db_bucket(count));
  }
  return db;
}

std::size_t belief_feature_size(const World& world, BeliefMode mode) {
  const bool unc =
      mode == BeliefMode::kTotalUnc || mode == BeliefMode::kKnowledgeUnc;
  std::size_t n = 0;
  for (std::size_t flat = 0; flat < world.num_slots(); ++flat)
    n += world.num_candidates(flat) + 1 + (unc ? 1 : 0);
  const std::size_t domains =
      static_cast<std::size_t>(world.config.num_domains);
  n += 3 + world.num_slots() + domains;  // h^usr
  n += 4 * domains;                      // h^db
  ActionSpace space{world.config.num_domains, world.config.slots_per_domain};
  n += static_cast<std::size_t>(space.size()) + 1;  // h^sys (+ hello)
  n += domains;                                     // h^book
  n += 1;                                           // h^term
  return n;
}

BeliefState assemble_belief_state(const TrackerOutput& output,
                                  const DbFeatures& db, int prev_sys_action,
                                  const std::vector<bool>& bookings,
                                  bool terminated, BeliefMode mode,
                                  const World& world) {
  if (output.goals.size() != world.num_slots())
    throw std::invalid_argument("assemble_belief_state: slot count mismatch");
  const bool unc =
      mode == BeliefMode::kTotalUnc || mode == BeliefMode::kKnowledgeUnc;
  BeliefState b;
  b.features.reserve(belief_feature_size(world, mode));

  for (std::size_t flat = 0; flat < world.num_slots(); ++flat) {
    const SlotDistribution& dist = output.goals[flat];
    const std::size_t top = dist.probs.argmax();
    const double conf = mode_confidence(dist.probs.max_prob(), mode);
    b.top_values.push_back(top);
    b.confidences.push_back(conf);
    for (std::size_t c = 0; c < world.num_candidates(flat); ++c)
      b.features.push_back(c == top ? 1.0 : 0.0);
    b.features.push_back(conf);
    if (unc) {
      if (mode == BeliefMode::kTotalUnc) {
        b.features.push_back(entropy(dist.probs));
      } else {
        if (!dist.alphas.has_value())
          throw std::invalid_argument(
              "assemble_belief_state: knowledge mode requires a Dirichlet "
              "tracker");
        b.features.push_back(dirichlet_decompose(*dist.alphas).knowledge);
      }
    }
  }

  // h^usr: general-action probabilities, request and domain probabilities.
  for (double p : output.general.probs) b.features.push_back(p);
  for (double p : output.request_probs) b.features.push_back(p);
  for (double p : output.domain_probs) b.features.push_back(p);

  // h^db.
  for (const auto& bucket : db.buckets)
    for (double v : bucket) b.features.push_back(v);

  // h^sys: one-hot over the action space; final slot marks hello/none.
  ActionSpace space{world.config.num_domains, world.config.slots_per_domain};
  const std::size_t action_dims = static_cast<std::size_t>(space.size()) + 1;
  for (std::size_t i = 0; i < action_dims; ++i) {
    const bool hot = prev_sys_action < 0
                         ? i + 1 == action_dims
                         : i == static_cast<std::size_t>(prev_sys_action);
    b.features.push_back(hot ? 1.0 : 0.0);
  }

  // h^book and h^term.
  for (int dom = 0; dom < world.config.num_domains; ++dom)
    b.features.push_back(
        dom < static_cast<int>(bookings.size()) && bookings[static_cast<std::size_t>(dom)]
            ? 1.0
            : 0.0);
  b.features.push_back(terminated ? 1.0 : 0.0);

  if (b.features.size() != belief_feature_size(world, mode))
    throw std::logic_error("assemble_belief_state: feature size mismatch");
  return b;
}

// ---------------------------------------------------------------------------
// Loss

TurnLabels labels_from_gold(const GoldLabels& gold) {
  TurnLabels labels;
  for (int v : gold.slot_values)
    labels.goal.push_back(static_cast<std::size_t>(v));
  labels.requested.assign(gold.requested.begin(), gold.requested.end());
  labels.active.assign(gold.active_domains.begin(),
                       gold.active_domains.end());
  labels.general = gold.general_action;
  return labels;
}

namespace {
/// KL[smoothed target || probs] as CE minus the (constant) target entropy.
Tape::Var smoothed_kl(Tape& t, const SmoothedTarget& target, Tape::Var probs) {
  return t.add_const(t.cross_entropy_const(target.probs.probs, probs),
                     -entropy(target.probs));
}

/// Smoothed binary cross-entropy on a [1]-shaped probability.
Tape::Var smoothed_bce(Tape& t, bool positive, Tape::Var prob, double eps) {
  const double target = positive ? 1.0 - eps / 2.0 : eps / 2.0;
  Tape::Var log_p = t.log_(prob);
  Tape::Var log_q = t.log_(t.add_const(t.neg(prob), 1.0));
  return t.neg(t.add(t.scale(log_p, target), t.scale(log_q, 1.0 - target)));
}

Tape::Var mean_of(Tape& t, const std::vector<Tape::Var>& terms) {
  Tape::Var sum = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) sum = t.add(sum, terms[i]);
  return t.scale(sum, 1.0 / static_cast<double>(terms.size()));
}
}  // namespace

Tape::Var multitask_loss(Tape& t, const TurnForward& fwd,
                         const TurnLabels& labels,
                         const GoalSupervision& goal_supervision,
                         const LossWeights& weights, double label_epsilon) {
  const std::size_t n_slots = fwd.goal_probs.size();
  if (labels.requested.size() != n_slots ||
      labels.active.size() != fwd.domain_probs.size())
    throw std::invalid_argument("multitask_loss: label shape mismatch");

  std::vector<Tape::Var> goal_terms;
  for (std::size_t flat = 0; flat < n_slots; ++flat) {
    switch (goal_supervision.mode) {
      case GoalLossMode::kLabelSmoothing: {
        if (labels.goal.size() != n_slots)
          throw std::invalid_argument("multitask_loss: missing goal labels");
        const std::size_t k = t.value(fwd.goal_probs[flat]).numel();
        goal_terms.push_back(smoothed_kl(
            t, smooth_labels(labels.goal[flat], k, label_epsilon),
            fwd.goal_probs[flat]));
        break;
      }
      case GoalLossMode::kEnD:
        if (goal_supervision.posteriors.size() != n_slots)
          throw std::invalid_argument("multitask_loss: missing posteriors");
        goal_terms.push_back(end_loss_on_logits(
            t, fwd.goal_logits[flat], goal_supervision.posteriors[flat],
            goal_supervision.temperature));
        break;
      case GoalLossMode::kEnD2:
        if (goal_supervision.proxies.size() != n_slots)
          throw std::invalid_argument("multitask_loss: missing proxies");
        goal_terms.push_back(
            end2_loss(t, fwd.goal_logits[flat], goal_supervision.proxies[flat]));
        break;
    }
  }

  Tape::Var general = smoothed_kl(
      t, smooth_labels(static_cast<std::size_t>(labels.general), 3,
                       label_epsilon),
      fwd.general_probs);

  std::vector<Tape::Var> request_terms, domain_terms;
  for (std::size_t flat = 0; flat < n_slots; ++flat)
    request_terms.push_back(smoothed_bce(t, labels.requested[flat],
                                         fwd.request_probs[flat],
                                         label_epsilon));
  for (std::size_t dom = 0; dom < fwd.domain_probs.size(); ++dom)
    domain_terms.push_back(smoothed_bce(t, labels.active[dom],
                                        fwd.domain_probs[dom],
                                        label_epsilon));

  Tape::Var total = t.scale(mean_of(t, goal_terms), weights.goal);
  total = t.add(total, t.scale(general, weights.general));
  total = t.add(total, t.scale(mean_of(t, request_terms), weights.request));
  total = t.add(total, t.scale(mean_of(t, domain_terms), weights.domain));
  return total;
}

}  // namespace udst
