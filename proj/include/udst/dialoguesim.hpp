// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef UDST_DIALOGUESIM_HPP
#define UDST_DIALOGUESIM_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

// Synthetic multi-domain dialogue world: ontology/database generation, an
// agenda-based rule user simulator with value-variation noise, a scripted
// system policy, corpus generation and dialogue scoring.

namespace udst {

// ---------------------------------------------------------------------------
// World

struct WorldConfig {
  int num_domains = 2;
  int slots_per_domain = 3;
  int values_per_slot = 5;
  int variants_per_value = 3;  // 1 canonical + (R-1) variant surface forms
  int db_rows_per_domain = 12;
  // Number of adjacent value pairs per slot (values 2p and 2p+1) that share
  // one additional ambiguous variant sequence. Shared variants make some
  // noised mentions genuinely ambiguous between two values.
  int confusable_pairs = 1;
};

struct ValueEntry {
  std::string canonical;  // single canonical token
  // Variant surface forms: token sequences sharing no tokens with the
  // canonical form.
  std::vector<std::vector<std::string>> variants;
};

struct SlotDef {
  std::string name;
  std::vector<ValueEntry> values;
  std::vector<std::string> description;  // token sequence
  // Description for the "none" candidate of this slot.
  std::vector<std::string> none_description;
};

struct DomainDef {
  std::string name;
  std::vector<SlotDef> slots;
};

struct Ontology {
  std::vector<DomainDef> domains;
};

/// One database entity: a value index per slot of its domain.
struct DbRow {
  int domain = 0;
  std::string entity_name;
  std::vector<int> values;
};

struct Database {
  std::vector<DbRow> rows;
  std::vector<std::vector<int>> rows_by_domain;  // row indices per domain
};

/// Closed token vocabulary. Index 0 is reserved for UNK.
class Vocabulary {
 public:
  static constexpr int kUnk = 0;
  int add(const std::string& token);           // idempotent
  int id(const std::string& token) const;      // kUnk if absent
  int id_checked(const std::string& token) const;  // throws if absent
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }

 private:
  std::vector<std::string> tokens_{"<unk>"};
  std::map<std::string, int> index_{{"<unk>", 0}};
};

struct World {
  WorldConfig config;
  std::uint64_t seed = 0;
  Ontology ontology;
  Database database;
  Vocabulary vocab;

  // Flat (domain, slot) pairs in lexicographic order; the canonical slot
  // ordering used for belief states, labels and metrics.
  std::vector<std::pair<int, int>> flat_slots;
  std::size_t num_slots() const { return flat_slots.size(); }
  std::size_t flat_index(int domain, int slot) const;
  const SlotDef& slot(std::size_t flat) const;
  /// Candidates per slot: index 0 = "none", 1..V = values.
  std::size_t num_candidates(std::size_t flat) const;

  std::vector<int> token_ids(const std::vector<std::string>& tokens) const;
};

World build_world(const WorldConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Goals and semantic acts

struct DomainGoal {
  int domain = 0;
  std::map<int, int> constraints;  // slot index (within domain) -> value
  std::vector<int> requests;       // slot indices to ask about
  bool book = false;
};

struct UserGoal {
  std::vector<DomainGoal> domains;
};

/// 1-2 domains, 1-3 constraints and 1-2 requests per domain; resampled until
/// satisfiable against the database (bounded retries).
UserGoal sample_user_goal(const World& world, std::mt19937_64& rng);

/// True iff the database has a row satisfying every constraint of every
/// domain goal.
bool goal_satisfiable(const World& world, const UserGoal& goal);

enum class UserActType {
  kInform,          // slot := value
  kInformDontcare,  // slot is unconstrained ("any")
  kRequest,
  kBookRequest,
  kThankYou,
  kGoodbye,
};

struct UserAct {
  UserActType type;
  int domain = -1;
  int slot = -1;   // within domain
  int value = -1;  // within slot
};

// ---------------------------------------------------------------------------
// System side

struct SystemAction {
  enum Kind { kHello, kRequest, kOffer, kBook, kReqMore, kBye };
  Kind kind = kHello;
  int domain = -1;
  int slot = -1;  // for kRequest
};

/// Flat discrete action space: per domain {request(slot) for each slot,
/// offer_entity, book} plus global {reqmore, bye}.
struct ActionSpace {
  int num_domains = 0;
  int slots_per_domain = 0;
  int size() const { return num_domains * (slots_per_domain + 2) + 2; }
  int encode(const SystemAction& action) const;
  SystemAction decode(int index) const;
};

/// What the system decided for one turn, before the engine grounds it.
struct SystemDecision {
  int action_index = 0;
  // Participating constraints for the database query (flat slot -> value
  // candidate index 1..V; slots absent are unconstrained).
  std::map<std::size_t, int> constraints;
  // Flat slots whose values an offer should include (answered requests).
  std::set<std::size_t> answer_slots;
};

/// Grounded system turn as the user sees it.
struct SystemTurn {
  SystemAction action;
  int entity_row = -1;  // database row index for offers/bookings
  std::vector<std::pair<std::size_t, int>> answers;  // (flat slot, value idx)
  int match_count = -1;  // database matches at decision time
};

// ---------------------------------------------------------------------------
// Turn records and gold labels

struct GoldLabels {
  std::vector<int> slot_values;      // per flat slot: 0 = none, 1..V
  std::vector<bool> requested;       // per flat slot, this turn
  std::vector<bool> active_domains;  // per domain
  int general_action = 0;            // 0 none, 1 thank_you, 2 goodbye
};

struct TurnRecord {
  SystemTurn sys;                        // system turn the user responded to
  std::vector<std::string> sys_tokens;   // rendered system utterance
  std::vector<UserAct> user_acts;
  std::vector<std::string> user_tokens;  // rendered user utterance (noisy)
  GoldLabels gold;
};

struct DialogueResult {
  bool success = false;
  int turns = 0;
  double reward = 0.0;
};

struct DialogueRecord {
  UserGoal goal;  // effective goal (after any mid-dialogue change)
  std::vector<TurnRecord> turns;
  bool terminated = false;
  DialogueResult result;
};

// ---------------------------------------------------------------------------
// Rendering

/// Template realization of user acts. With probability noise_prob per
/// value-bearing act, the canonical surface form is replaced by a sampled
/// variant. Never changes the semantic act.
std::vector<std::string> render_utterance(const std::vector<UserAct>& acts,
                                          const World& world,
                                          double noise_prob,
                                          std::mt19937_64& rng,
                                          bool* used_variant = nullptr);

std::vector<std::string> render_system_utterance(const SystemTurn& turn,
                                                 const World& world);

// ---------------------------------------------------------------------------
// Agenda-based user

class UserAgenda {
 public:
  struct Config {
    int max_acts_per_turn = 2;
    double goal_change_prob = 0.1;  // fraction of dialogues with a change
  };

  UserAgenda(const World& world, UserGoal goal, const Config& config,
             std::mt19937_64& rng);

  struct Response {
    std::vector<UserAct> acts;
    GoldLabels gold;
    bool terminated = false;
  };

  /// Rule-based reaction to the previous system turn.
  Response respond(const SystemTurn& sys_turn);

  /// Goal after any mid-dialogue change.
  const UserGoal& effective_goal() const { return goal_; }

 private:
  struct DomainState {
    std::vector<std::pair<int, int>> pending_constraints;  // (slot, value)
    std::map<int, int> informed;                           // slot -> value
    std::set<int> pending_requests;
    std::set<int> answered_requests;
    bool book_needed = false;
    bool booked = false;
    bool offer_ok = false;  // currently offered entity satisfies constraints
  };

  GoldLabels make_gold(const std::vector<UserAct>& acts) const;
  bool domain_done(const DomainState& d) const;
  int current_domain() const;

  const World& world_;
  UserGoal goal_;
  Config config_;
  std::vector<DomainState> states_;  // parallel to goal_.domains
  int turn_index_ = 0;
  bool thanked_ = false;
  // Scheduled goal change: (user turn, goal-domain position, slot, new value).
  int change_turn_ = -1;
  int change_goal_pos_ = -1, change_slot_ = -1, change_value_ = -1;
};

// ---------------------------------------------------------------------------
// Dialogue engine

struct EngineConfig {
  double noise_prob = 0.2;
  int max_turns = 20;
  UserAgenda::Config user;
};

/// System callback: observes the rendered utterances (and, for oracle
/// policies, the gold labels) and returns a decision.
using SystemCallback = std::function<SystemDecision(
    const TurnRecord& current_turn, int turn_index)>;

/// Runs one dialogue; grounds offers against the database using the
/// decision's constraints (first matching row) and scores the transcript.
DialogueRecord run_dialogue(const World& world, const UserGoal& goal,
                            const SystemCallback& system,
                            const EngineConfig& config, std::mt19937_64& rng);

/// Success iff every requested slot was answered from an entity satisfying
/// all (final) constraints and every wanted booking completed; reward =
/// 80 * success - 40 * (1 - success) - turns.
DialogueResult score_dialogue(const World& world, const UserGoal& goal,
                              const std::vector<TurnRecord>& turns);

/// Database query: rows of `domain` matching the participating constraints.
std::vector<int> db_query_domain(const World& world, int domain,
                                 const std::map<std::size_t, int>& constraints);

/// Bucketize a match count into one-hot {0, 1, 2-3, >=4}.
std::array<double, 4> db_bucket(int match_count);

// ---------------------------------------------------------------------------
// Scripted policy and corpus generation

/// Hand-written rule policy operating on oracle labels: request unfilled
/// slots (each at most once), then offer; answer requests; book; bye.
class ScriptedPolicy {
 public:
  explicit ScriptedPolicy(const World& world);
  SystemDecision decide(const TurnRecord& turn, int turn_index);
  void reset();

 private:
  const World& world_;
  ActionSpace space_;
  std::set<std::size_t> requested_;  // flat slots requested so far
};

struct DialogueCorpus {
  std::uint64_t world_seed = 0;
  std::vector<DialogueRecord> dialogues;
};

DialogueCorpus generate_corpus(const World& world, std::size_t n_dialogues,
                               const EngineConfig& config, std::uint64_t seed);

}  // namespace udst

#endif  // UDST_DIALOGUESIM_HPP
