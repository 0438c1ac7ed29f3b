// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#include "udst/dialoguesim.hpp"

#include <algorithm>
#include <stdexcept>

namespace udst {

// ---------------------------------------------------------------------------
// Vocabulary

int Vocabulary::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

int Vocabulary::id_checked(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end())
    throw std::out_of_range("Vocabulary: unknown token " + token);
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= static_cast<int>(tokens_.size()))
    throw std::out_of_range("Vocabulary: id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

// ---------------------------------------------------------------------------
// World

std::size_t World::flat_index(int domain, int slot) const {
  for (std::size_t i = 0; i < flat_slots.size(); ++i)
    if (flat_slots[i].first == domain && flat_slots[i].second == slot) return i;
  throw std::out_of_range("World: unknown (domain, slot)");
}

const SlotDef& World::slot(std::size_t flat) const {
  const auto& [d, s] = flat_slots.at(flat);
  return ontology.domains[static_cast<std::size_t>(d)]
      .slots[static_cast<std::size_t>(s)];
}

std::size_t World::num_candidates(std::size_t flat) const {
  return slot(flat).values.size() + 1;  // + "none"
}

std::vector<int> World::token_ids(
    const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const std::string& t : tokens) ids.push_back(vocab.id(t));
  return ids;
}

namespace {

// Fixed surface words shared by all worlds. Added to the vocabulary first so
// their ids are stable across world seeds with the same config.
const char* const kTemplateWords[] = {
    "<bos>",  "<sep>",    "inform", "request", "book",  "any",
    "thanks", "bye",      "ok",     "sys_hello", "sys_request", "sys_offer",
    "sys_book", "sys_reqmore", "sys_bye", "slot",  "value", "none_value",
    "pad"};

}  // namespace

World build_world(const WorldConfig& config, std::uint64_t seed) {
  if (config.num_domains < 1 || config.slots_per_domain < 1 ||
      config.values_per_slot < 2 || config.variants_per_value < 1 ||
      config.db_rows_per_domain < 1 || config.confusable_pairs < 0 ||
      config.confusable_pairs > config.values_per_slot / 2)
    throw std::invalid_argument("build_world: invalid configuration");

  World w;
  w.config = config;
  w.seed = seed;
  std::mt19937_64 rng(seed);

  for (const char* t : kTemplateWords) w.vocab.add(t);

  for (int d = 0; d < config.num_domains; ++d) {
    DomainDef dom;
    dom.name = "d" + std::to_string(d);
    w.vocab.add(dom.name);
    for (int s = 0; s < config.slots_per_domain; ++s) {
      SlotDef slot;
      slot.name = dom.name + "_s" + std::to_string(s);
      w.vocab.add(slot.name);
      slot.description = {"slot", dom.name, slot.name, "pad"};
      slot.none_description = {"value", slot.name, "none_value", "pad"};
      for (int v = 0; v < config.values_per_slot; ++v) {
        ValueEntry value;
        value.canonical = slot.name + "_v" + std::to_string(v);
        w.vocab.add(value.canonical);
        for (int r = 1; r < config.variants_per_value; ++r) {
          // Two-token variant sequences disjoint from the canonical token.
          std::vector<std::string> variant{
              "var_" + slot.name + "_v" + std::to_string(v) + "_" +
                  std::to_string(r) + "a",
              "var_" + slot.name + "_v" + std::to_string(v) + "_" +
                  std::to_string(r) + "b"};
          for (const std::string& t : variant) w.vocab.add(t);
          value.variants.push_back(std::move(variant));
        }
        slot.values.push_back(std::move(value));
      }
      // Ambiguous variants shared by adjacent value pairs: the same surface
      // sequence can mean either value, so noised mentions of these values
      // are not always resolvable from the utterance alone.
      for (int p = 0; p < config.confusable_pairs; ++p) {
        std::vector<std::string> shared{
            "var_" + slot.name + "_amb" + std::to_string(p) + "a",
            "var_" + slot.name + "_amb" + std::to_string(p) + "b"};
        for (const std::string& t : shared) w.vocab.add(t);
        slot.values[static_cast<std::size_t>(2 * p)].variants.push_back(
            shared);
        slot.values[static_cast<std::size_t>(2 * p + 1)].variants.push_back(
            std::move(shared));
      }
      dom.slots.push_back(std::move(slot));
    }
    w.ontology.domains.push_back(std::move(dom));
  }

  for (int d = 0; d < config.num_domains; ++d)
    for (int s = 0; s < config.slots_per_domain; ++s)
      w.flat_slots.emplace_back(d, s);

  // Database rows: uniform over value combinations, deduplicated so every
  // entity is distinguishable by its attribute vector.
  w.database.rows_by_domain.resize(
      static_cast<std::size_t>(config.num_domains));
  for (int d = 0; d < config.num_domains; ++d) {
    std::set<std::vector<int>> seen;
    int guard = 0;
    for (int n = 0; n < config.db_rows_per_domain; ++n) {
      DbRow row;
      row.domain = d;
      row.entity_name =
          "d" + std::to_string(d) + "_e" + std::to_string(n);
      w.vocab.add(row.entity_name);
      do {
        row.values.clear();
        for (int s = 0; s < config.slots_per_domain; ++s)
          row.values.push_back(static_cast<int>(
              rng() % static_cast<std::uint64_t>(config.values_per_slot)));
      } while (!seen.insert(row.values).second && ++guard < 10000);
      w.database.rows_by_domain[static_cast<std::size_t>(d)].push_back(
          static_cast<int>(w.database.rows.size()));
      w.database.rows.push_back(std::move(row));
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Goals

bool goal_satisfiable(const World& world, const UserGoal& goal) {
  for (const DomainGoal& dg : goal.domains) {
    bool found = false;
    for (int row_idx :
         world.database.rows_by_domain[static_cast<std::size_t>(dg.domain)]) {
      const DbRow& row = world.database.rows[static_cast<std::size_t>(row_idx)];
      bool ok = true;
      for (const auto& [slot, value] : dg.constraints)
        if (row.values[static_cast<std::size_t>(slot)] != value) {
          ok = false;
          break;
        }
      if (ok) {
        found = true;
        break;
      }
    }
    if (!found) return false;
  }
  return true;
}

UserGoal sample_user_goal(const World& world, std::mt19937_64& rng) {
  const int kMaxAttempts = 50;
  auto uniform = [&rng](int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };
  UserGoal goal;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    goal.domains.clear();
    const int n_domains =
        std::min(world.config.num_domains, uniform(1, 2));
    std::vector<int> domain_ids(
        static_cast<std::size_t>(world.config.num_domains));
    for (int d = 0; d < world.config.num_domains; ++d)
      domain_ids[static_cast<std::size_t>(d)] = d;
    std::shuffle(domain_ids.begin(), domain_ids.end(), rng);
    for (int i = 0; i < n_domains; ++i) {
      DomainGoal dg;
      dg.domain = domain_ids[static_cast<std::size_t>(i)];
      std::vector<int> slots(
          static_cast<std::size_t>(world.config.slots_per_domain));
      for (int s = 0; s < world.config.slots_per_domain; ++s)
        slots[static_cast<std::size_t>(s)] = s;
      std::shuffle(slots.begin(), slots.end(), rng);
      const int n_constraints =
          std::min(world.config.slots_per_domain, uniform(1, 3));
      for (int c = 0; c < n_constraints; ++c)
        dg.constraints[slots[static_cast<std::size_t>(c)]] =
            uniform(0, world.config.values_per_slot - 1);
      // Request unconstrained slots where possible.
      const int n_requests = uniform(1, 2);
      for (int r = 0; r < n_requests; ++r) {
        const std::size_t pos =
            static_cast<std::size_t>(n_constraints + r);
        if (pos < slots.size())
          dg.requests.push_back(slots[pos]);
      }
      if (dg.requests.empty())
        dg.requests.push_back(slots[0]);  // fully constrained domain
      std::sort(dg.requests.begin(), dg.requests.end());
      dg.book = uniform(0, 1) == 1;
      goal.domains.push_back(std::move(dg));
    }
    if (goal_satisfiable(world, goal)) return goal;
  }
  return goal;  // last attempt, possibly unsatisfiable (rare)
}

// ---------------------------------------------------------------------------
// Action space

int ActionSpace::encode(const SystemAction& action) const {
  const int per_domain = slots_per_domain + 2;
  switch (action.kind) {
    case SystemAction::kRequest:
      return action.domain * per_domain + action.slot;
    case SystemAction::kOffer:
      return action.domain * per_domain + slots_per_domain;
    case SystemAction::kBook:
      return action.domain * per_domain + slots_per_domain + 1;
    case SystemAction::kReqMore:
      return num_domains * per_domain;
    case SystemAction::kBye:
      return num_domains * per_domain + 1;
    default:
      throw std::invalid_argument("ActionSpace: cannot encode hello");
  }
}

SystemAction ActionSpace::decode(int index) const {
  const int per_domain = slots_per_domain + 2;
  if (index < 0 || index >= size())
    throw std::out_of_range("ActionSpace: index out of range");
  SystemAction a;
  if (index >= num_domains * per_domain) {
    a.kind = (index == num_domains * per_domain) ? SystemAction::kReqMore
                                                 : SystemAction::kBye;
    return a;
  }
  a.domain = index / per_domain;
  const int within = index % per_domain;
  if (within < slots_per_domain) {
    a.kind = SystemAction::kRequest;
    a.slot = within;
  } else if (within == slots_per_domain) {
    a.kind = SystemAction::kOffer;
  } else {
    a.kind = SystemAction::kBook;
  }
  return a;
}

// ---------------------------------------------------------------------------
// Rendering

std::vector<std::string> render_utterance(const std::vector<UserAct>& acts,
                                          const World& world,
                                          double noise_prob,
                                          std::mt19937_64& rng,
                                          bool* used_variant) {
  if (used_variant != nullptr) *used_variant = false;
  std::vector<std::string> out;
  if (acts.empty()) {
    out.push_back("ok");
    return out;
  }
  for (const UserAct& act : acts) {
    switch (act.type) {
      case UserActType::kInform: {
        const SlotDef& slot =
            world.ontology.domains[static_cast<std::size_t>(act.domain)]
                .slots[static_cast<std::size_t>(act.slot)];
        const ValueEntry& value =
            slot.values[static_cast<std::size_t>(act.value)];
        out.push_back("inform");
        out.push_back(slot.name);
        const bool noisy =
            !value.variants.empty() &&
            std::uniform_real_distribution<double>(0.0, 1.0)(rng) < noise_prob;
        if (noisy) {
          const std::size_t pick = static_cast<std::size_t>(
              rng() % static_cast<std::uint64_t>(value.variants.size()));
          for (const std::string& t : value.variants[pick]) out.push_back(t);
          if (used_variant != nullptr) *used_variant = true;
        } else {
          out.push_back(value.canonical);
        }
        break;
      }
      case UserActType::kInformDontcare: {
        const SlotDef& slot =
            world.ontology.domains[static_cast<std::size_t>(act.domain)]
                .slots[static_cast<std::size_t>(act.slot)];
        out.push_back("inform");
        out.push_back(slot.name);
        out.push_back("any");
        break;
      }
      case UserActType::kRequest: {
        const SlotDef& slot =
            world.ontology.domains[static_cast<std::size_t>(act.domain)]
                .slots[static_cast<std::size_t>(act.slot)];
        out.push_back("request");
        out.push_back(slot.name);
        break;
      }
      case UserActType::kBookRequest:
        out.push_back("book");
        out.push_back(
            world.ontology.domains[static_cast<std::size_t>(act.domain)].name);
        break;
      case UserActType::kThankYou:
        out.push_back("thanks");
        break;
      case UserActType::kGoodbye:
        out.push_back("bye");
        break;
    }
  }
  return out;
}

std::vector<std::string> render_system_utterance(const SystemTurn& turn,
                                                 const World& world) {
  std::vector<std::string> out;
  switch (turn.action.kind) {
    case SystemAction::kHello:
      out.push_back("sys_hello");
      break;
    case SystemAction::kRequest: {
      const SlotDef& slot =
          world.ontology.domains[static_cast<std::size_t>(turn.action.domain)]
              .slots[static_cast<std::size_t>(turn.action.slot)];
      out.push_back("sys_request");
      out.push_back(slot.name);
      break;
    }
    case SystemAction::kOffer: {
      out.push_back("sys_offer");
      if (turn.entity_row >= 0) {
        out.push_back(world.database.rows[static_cast<std::size_t>(
                                              turn.entity_row)]
                          .entity_name);
        for (const auto& [flat, value] : turn.answers) {
          const SlotDef& slot = world.slot(flat);
          out.push_back(slot.name);
          out.push_back(
              slot.values[static_cast<std::size_t>(value)].canonical);
        }
      } else {
        out.push_back("none_value");
      }
      break;
    }
    case SystemAction::kBook:
      out.push_back("sys_book");
      out.push_back(
          world.ontology.domains[static_cast<std::size_t>(turn.action.domain)]
              .name);
      break;
    case SystemAction::kReqMore:
      out.push_back("sys_reqmore");
      break;
    case SystemAction::kBye:
      out.push_back("sys_bye");
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Agenda-based user

UserAgenda::UserAgenda(const World& world, UserGoal goal, const Config& config,
                       std::mt19937_64& rng)
    : world_(world), goal_(std::move(goal)), config_(config) {
  states_.resize(goal_.domains.size());
  for (std::size_t i = 0; i < goal_.domains.size(); ++i) {
    const DomainGoal& dg = goal_.domains[i];
    DomainState& st = states_[i];
    for (const auto& [slot, value] : dg.constraints)
      st.pending_constraints.emplace_back(slot, value);
    st.pending_requests.insert(dg.requests.begin(), dg.requests.end());
    st.book_needed = dg.book;
  }
  // Schedule an optional mid-dialogue goal change on a constrained slot.
  if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) <
      config_.goal_change_prob) {
    const std::size_t pos = static_cast<std::size_t>(
        rng() % static_cast<std::uint64_t>(goal_.domains.size()));
    const DomainGoal& dg = goal_.domains[pos];
    if (!dg.constraints.empty()) {
      auto it = dg.constraints.begin();
      std::advance(it, static_cast<long>(
                           rng() % static_cast<std::uint64_t>(
                                       dg.constraints.size())));
      // Pick a different value that keeps the goal satisfiable; skip the
      // change entirely if none exists.
      const int offset = 1 + static_cast<int>(
                                 rng() % static_cast<std::uint64_t>(
                                             world_.config.values_per_slot - 1));
      for (int step = 0; step < world_.config.values_per_slot - 1; ++step) {
        const int candidate =
            (it->second + offset + step) % world_.config.values_per_slot;
        if (candidate == it->second) continue;
        UserGoal altered = goal_;
        altered.domains[pos].constraints[it->first] = candidate;
        if (goal_satisfiable(world_, altered)) {
          change_goal_pos_ = static_cast<int>(pos);
          change_slot_ = it->first;
          change_value_ = candidate;
          change_turn_ = 2 + static_cast<int>(rng() % 3);  // user turn 2..4
          break;
        }
      }
    }
  }
}

bool UserAgenda::domain_done(const DomainState& d) const {
  return d.pending_constraints.empty() && d.pending_requests.empty() &&
         (!d.book_needed || d.booked);
}

int UserAgenda::current_domain() const {
  for (std::size_t i = 0; i < states_.size(); ++i)
    if (!domain_done(states_[i])) return static_cast<int>(i);
  return -1;
}

GoldLabels UserAgenda::make_gold(const std::vector<UserAct>& acts) const {
  GoldLabels gold;
  gold.slot_values.assign(world_.num_slots(), 0);
  gold.requested.assign(world_.num_slots(), false);
  gold.active_domains.assign(
      static_cast<std::size_t>(world_.config.num_domains), false);
  // Cumulative goal labels: everything informed so far (candidate index =
  // value index + 1; 0 is "none").
  for (std::size_t i = 0; i < goal_.domains.size(); ++i) {
    const int domain = goal_.domains[i].domain;
    for (const auto& [slot, value] : states_[i].informed)
      gold.slot_values[world_.flat_index(domain, slot)] = value + 1;
  }
  for (const UserAct& act : acts) {
    if (act.domain >= 0)
      gold.active_domains[static_cast<std::size_t>(act.domain)] = true;
    if (act.type == UserActType::kRequest)
      gold.requested[world_.flat_index(act.domain, act.slot)] = true;
    if (act.type == UserActType::kThankYou) gold.general_action = 1;
    if (act.type == UserActType::kGoodbye) gold.general_action = 2;
  }
  // If nothing named a domain, keep the current one active for context.
  if (std::none_of(gold.active_domains.begin(), gold.active_domains.end(),
                   [](bool b) { return b; })) {
    const int cur = current_domain();
    if (cur >= 0)
      gold.active_domains[static_cast<std::size_t>(
          goal_.domains[static_cast<std::size_t>(cur)].domain)] = true;
  }
  return gold;
}

UserAgenda::Response UserAgenda::respond(const SystemTurn& sys_turn) {
  Response r;
  const int cur = current_domain();

  auto goal_pos_of_domain = [&](int domain) -> int {
    for (std::size_t i = 0; i < goal_.domains.size(); ++i)
      if (goal_.domains[i].domain == domain) return static_cast<int>(i);
    return -1;
  };
  auto inform = [&](int goal_pos, int slot, int value) {
    DomainState& st = states_[static_cast<std::size_t>(goal_pos)];
    st.informed[slot] = value;
    st.pending_constraints.erase(
        std::remove_if(st.pending_constraints.begin(),
                       st.pending_constraints.end(),
                       [&](const std::pair<int, int>& pc) {
                         return pc.first == slot;
                       }),
        st.pending_constraints.end());
    r.acts.push_back(UserAct{UserActType::kInform,
                             goal_.domains[static_cast<std::size_t>(goal_pos)]
                                 .domain,
                             slot, value});
  };

  // Apply any scheduled goal change first: re-inform with the new value.
  bool changed_this_turn = false;
  if (change_turn_ >= 0 && turn_index_ == change_turn_ &&
      change_goal_pos_ >= 0) {
    DomainGoal& dg = goal_.domains[static_cast<std::size_t>(change_goal_pos_)];
    DomainState& st = states_[static_cast<std::size_t>(change_goal_pos_)];
    if (st.informed.count(change_slot_) > 0) {
      dg.constraints[change_slot_] = change_value_;
      st.offer_ok = false;  // previous offer may no longer satisfy
      st.booked = false;
      // Previously answered requests referred to the old entity; ask again.
      st.pending_requests.insert(st.answered_requests.begin(),
                                 st.answered_requests.end());
      st.answered_requests.clear();
      inform(change_goal_pos_, change_slot_, change_value_);
      changed_this_turn = true;
    }
    change_turn_ = -1;
  }

  // React to the system turn.
  switch (sys_turn.action.kind) {
    case SystemAction::kRequest: {
      const int pos = goal_pos_of_domain(sys_turn.action.domain);
      if (pos >= 0) {
        const DomainGoal& dg = goal_.domains[static_cast<std::size_t>(pos)];
        auto it = dg.constraints.find(sys_turn.action.slot);
        if (it != dg.constraints.end()) {
          inform(pos, sys_turn.action.slot, it->second);
        } else {
          r.acts.push_back(UserAct{UserActType::kInformDontcare,
                                   sys_turn.action.domain,
                                   sys_turn.action.slot, -1});
        }
      }
      break;
    }
    case SystemAction::kOffer: {
      const int pos = goal_pos_of_domain(sys_turn.action.domain);
      if (pos >= 0 && sys_turn.entity_row >= 0) {
        const DomainGoal& dg = goal_.domains[static_cast<std::size_t>(pos)];
        DomainState& st = states_[static_cast<std::size_t>(pos)];
        const DbRow& row =
            world_.database.rows[static_cast<std::size_t>(sys_turn.entity_row)];
        // Check the entity against the true constraints; re-inform the first
        // mismatch (system misunderstanding recovery).
        int mismatch_slot = -1;
        for (const auto& [slot, value] : dg.constraints)
          if (row.values[static_cast<std::size_t>(slot)] != value) {
            mismatch_slot = slot;
            break;
          }
        if (mismatch_slot >= 0) {
          st.offer_ok = false;
          if (!changed_this_turn)
            inform(pos, mismatch_slot, dg.constraints.at(mismatch_slot));
        } else {
          st.offer_ok = true;
          // Accept answers for pending requests of this domain.
          for (const auto& [flat, value] : sys_turn.answers) {
            const auto& [fd, fs] = world_.flat_slots[flat];
            (void)value;
            if (fd == dg.domain && st.pending_requests.erase(fs) > 0)
              st.answered_requests.insert(fs);
          }
        }
      }
      break;
    }
    case SystemAction::kBook: {
      const int pos = goal_pos_of_domain(sys_turn.action.domain);
      if (pos >= 0) {
        DomainState& st = states_[static_cast<std::size_t>(pos)];
        if (st.offer_ok && st.book_needed) st.booked = true;
      }
      break;
    }
    case SystemAction::kBye: {
      r.acts.push_back(UserAct{UserActType::kGoodbye, -1, -1, -1});
      r.gold = make_gold(r.acts);
      r.terminated = true;
      ++turn_index_;
      return r;
    }
    default:
      break;  // hello / reqmore: agenda-driven below
  }

  // Agenda-driven continuation up to the act budget.
  const int budget = config_.max_acts_per_turn;
  const int active = current_domain();
  if (active >= 0) {
    DomainState& st = states_[static_cast<std::size_t>(active)];
    const int domain = goal_.domains[static_cast<std::size_t>(active)].domain;
    // Push pending constraints.
    while (static_cast<int>(r.acts.size()) < budget &&
           !st.pending_constraints.empty()) {
      auto [slot, value] = st.pending_constraints.front();
      inform(active, slot, value);
    }
    // Once a satisfying entity is on the table, issue requests / booking.
    if (st.pending_constraints.empty() && st.offer_ok) {
      while (static_cast<int>(r.acts.size()) < budget &&
             !st.pending_requests.empty()) {
        bool issued = false;
        for (int slot : st.pending_requests) {
          bool already = false;
          for (const UserAct& act : r.acts)
            if (act.type == UserActType::kRequest && act.slot == slot &&
                act.domain == domain)
              already = true;
          if (!already) {
            r.acts.push_back(UserAct{UserActType::kRequest, domain, slot, -1});
            issued = true;
            break;
          }
        }
        if (!issued) break;  // all pending requests already uttered this turn
      }
      if (static_cast<int>(r.acts.size()) < budget &&
          st.pending_requests.empty() && st.book_needed && !st.booked) {
        r.acts.push_back(UserAct{UserActType::kBookRequest, domain, -1, -1});
      }
    }
  } else {
    // Agenda empty: thank, then say goodbye.
    if (!thanked_) {
      r.acts.push_back(UserAct{UserActType::kThankYou, -1, -1, -1});
      thanked_ = true;
    } else {
      r.acts.push_back(UserAct{UserActType::kGoodbye, -1, -1, -1});
      r.terminated = true;
    }
  }

  r.gold = make_gold(r.acts);
  ++turn_index_;
  return r;
}

// ---------------------------------------------------------------------------
// Database helpers

std::vector<int> db_query_domain(
    const World& world, int domain,
    const std::map<std::size_t, int>& constraints) {
  std::vector<int> matches;
  for (int row_idx :
       world.database.rows_by_domain[static_cast<std::size_t>(domain)]) {
    const DbRow& row = world.database.rows[static_cast<std::size_t>(row_idx)];
    bool ok = true;
    for (const auto& [flat, value] : constraints) {
      const auto& [fd, fs] = world.flat_slots[flat];
      if (fd != domain) continue;
      // Constraint values are candidate indices (1..V); rows store 0..V-1.
      if (row.values[static_cast<std::size_t>(fs)] != value - 1) {
        ok = false;
        break;
      }
    }
    if (ok) matches.push_back(row_idx);
  }
  return matches;
}

std::array<double, 4> db_bucket(int match_count) {
  std::array<double, 4> bucket{0.0, 0.0, 0.0, 0.0};
  if (match_count <= 0)
    bucket[0] = 1.0;
  else if (match_count == 1)
    bucket[1] = 1.0;
  else if (match_count <= 3)
    bucket[2] = 1.0;
  else
    bucket[3] = 1.0;
  return bucket;
}

// ---------------------------------------------------------------------------
// Engine

DialogueRecord run_dialogue(const World& world, const UserGoal& goal,
                            const SystemCallback& system,
                            const EngineConfig& config, std::mt19937_64& rng) {
  DialogueRecord record;
  UserAgenda agenda(world, goal, config.user, rng);

  SystemTurn sys_turn;  // starts as hello
  for (int t = 0; t < config.max_turns; ++t) {
    TurnRecord turn;
    turn.sys = sys_turn;
    turn.sys_tokens = render_system_utterance(sys_turn, world);

    UserAgenda::Response response = agenda.respond(sys_turn);
    turn.user_acts = response.acts;
    turn.user_tokens =
        render_utterance(response.acts, world, config.noise_prob, rng);
    turn.gold = response.gold;
    record.turns.push_back(turn);
    if (response.terminated) {
      record.terminated = true;
      break;
    }

    SystemDecision decision =
        system(record.turns.back(), static_cast<int>(record.turns.size()) - 1);
    ActionSpace space{world.config.num_domains, world.config.slots_per_domain};
    SystemTurn next;
    next.action = space.decode(decision.action_index);
    if (next.action.kind == SystemAction::kOffer ||
        next.action.kind == SystemAction::kBook) {
      std::vector<int> matches =
          db_query_domain(world, next.action.domain, decision.constraints);
      next.match_count = static_cast<int>(matches.size());
      if (!matches.empty()) {
        next.entity_row = matches.front();
        if (next.action.kind == SystemAction::kOffer) {
          const DbRow& row =
              world.database.rows[static_cast<std::size_t>(next.entity_row)];
          for (std::size_t flat : decision.answer_slots) {
            const auto& [fd, fs] = world.flat_slots[flat];
            if (fd == next.action.domain)
              next.answers.emplace_back(
                  flat, row.values[static_cast<std::size_t>(fs)]);
          }
        }
      }
    }
    sys_turn = std::move(next);
  }

  record.goal = agenda.effective_goal();
  record.result = score_dialogue(world, record.goal, record.turns);
  return record;
}

DialogueResult score_dialogue(const World& world, const UserGoal& goal,
                              const std::vector<TurnRecord>& turns) {
  // Replay the transcript against the final goal: a request counts as
  // answered only while the offered entity satisfies every constraint of its
  // domain, and likewise for bookings.
  struct Fulfillment {
    std::set<int> answered;
    bool booked = false;
  };
  std::map<int, Fulfillment> by_domain;

  auto entity_satisfies = [&](int row_idx, const DomainGoal& dg) {
    if (row_idx < 0) return false;
    const DbRow& row = world.database.rows[static_cast<std::size_t>(row_idx)];
    if (row.domain != dg.domain) return false;
    for (const auto& [slot, value] : dg.constraints)
      if (row.values[static_cast<std::size_t>(slot)] != value) return false;
    return true;
  };
  auto goal_of_domain = [&](int domain) -> const DomainGoal* {
    for (const DomainGoal& dg : goal.domains)
      if (dg.domain == domain) return &dg;
    return nullptr;
  };

  for (const TurnRecord& turn : turns) {
    const SystemTurn& sys = turn.sys;
    if (sys.action.kind == SystemAction::kOffer) {
      const DomainGoal* dg = goal_of_domain(sys.action.domain);
      if (dg != nullptr && entity_satisfies(sys.entity_row, *dg)) {
        for (const auto& [flat, value] : sys.answers) {
          (void)value;
          const auto& [fd, fs] = world.flat_slots[flat];
          if (fd == dg->domain) by_domain[fd].answered.insert(fs);
        }
      }
    } else if (sys.action.kind == SystemAction::kBook) {
      const DomainGoal* dg = goal_of_domain(sys.action.domain);
      if (dg != nullptr && entity_satisfies(sys.entity_row, *dg))
        by_domain[dg->domain].booked = true;
    }
  }

  DialogueResult result;
  result.turns = static_cast<int>(turns.size());
  bool success = true;
  for (const DomainGoal& dg : goal.domains) {
    const Fulfillment& f = by_domain[dg.domain];
    for (int slot : dg.requests)
      if (f.answered.count(slot) == 0) success = false;
    if (dg.book && !f.booked) success = false;
  }
  result.success = success;
  result.reward = (success ? 80.0 : -40.0) - static_cast<double>(result.turns);
  return result;
}

// ---------------------------------------------------------------------------
// Scripted policy

ScriptedPolicy::ScriptedPolicy(const World& world)
    : world_(world),
      space_{world.config.num_domains, world.config.slots_per_domain} {}

void ScriptedPolicy::reset() { requested_.clear(); }

SystemDecision ScriptedPolicy::decide(const TurnRecord& turn, int turn_index) {
  (void)turn_index;
  const GoldLabels& gold = turn.gold;
  SystemDecision decision;
  // Oracle constraints: every informed slot participates.
  for (std::size_t flat = 0; flat < gold.slot_values.size(); ++flat)
    if (gold.slot_values[flat] > 0)
      decision.constraints[flat] = gold.slot_values[flat];
  for (std::size_t flat = 0; flat < gold.requested.size(); ++flat)
    if (gold.requested[flat]) decision.answer_slots.insert(flat);

  SystemAction action;
  if (gold.general_action == 2) {
    action.kind = SystemAction::kBye;
  } else if (gold.general_action == 1) {
    action.kind = SystemAction::kReqMore;
  } else {
    // Active domain focus (first active).
    int domain = 0;
    for (std::size_t d = 0; d < gold.active_domains.size(); ++d)
      if (gold.active_domains[d]) {
        domain = static_cast<int>(d);
        break;
      }
    // Book when asked; answer requests with an offer; otherwise request the
    // first unfilled, not-yet-requested slot; else offer.
    bool book_asked = false, request_seen = false;
    for (const UserAct& act : turn.user_acts) {
      if (act.type == UserActType::kBookRequest && act.domain == domain)
        book_asked = true;
      if (act.type == UserActType::kRequest && act.domain == domain)
        request_seen = true;
    }
    if (book_asked) {
      action.kind = SystemAction::kBook;
      action.domain = domain;
    } else if (request_seen) {
      action.kind = SystemAction::kOffer;
      action.domain = domain;
    } else {
      int ask_slot = -1;
      for (int s = 0; s < world_.config.slots_per_domain; ++s) {
        const std::size_t flat = world_.flat_index(domain, s);
        if (gold.slot_values[flat] == 0 && requested_.count(flat) == 0) {
          ask_slot = s;
          requested_.insert(flat);
          break;
        }
      }
      if (ask_slot >= 0) {
        action.kind = SystemAction::kRequest;
        action.domain = domain;
        action.slot = ask_slot;
      } else {
        action.kind = SystemAction::kOffer;
        action.domain = domain;
      }
    }
  }
  decision.action_index = space_.encode(action);
  return decision;
}

// ---------------------------------------------------------------------------
// Corpus generation

DialogueCorpus generate_corpus(const World& world, std::size_t n_dialogues,
                               const EngineConfig& config, std::uint64_t seed) {
  DialogueCorpus corpus;
  corpus.world_seed = world.seed;
  corpus.dialogues.reserve(n_dialogues);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n_dialogues; ++i) {
    UserGoal goal = sample_user_goal(world, rng);
    ScriptedPolicy policy(world);
    corpus.dialogues.push_back(run_dialogue(
        world, goal,
        [&policy](const TurnRecord& turn, int t) {
          return policy.decide(turn, t);
        },
        config, rng));
  }
  return corpus;
}

}  // namespace udst
