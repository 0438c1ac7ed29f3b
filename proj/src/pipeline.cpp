// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#include "udst/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

namespace udst {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Hashing

std::uint64_t fnv1a(const void* data, std::size_t n,
                    std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// JSON helpers for domain structs

json world_config_to_json(const WorldConfig& c) {
  return json{{"num_domains", c.num_domains},
              {"slots_per_domain", c.slots_per_domain},
              {"values_per_slot", c.values_per_slot},
              {"variants_per_value", c.variants_per_value},
              {"db_rows_per_domain", c.db_rows_per_domain},
              {"confusable_pairs", c.confusable_pairs}};
}

WorldConfig world_config_from_json(const json& j) {
  WorldConfig c;
  c.num_domains = j.at("num_domains").get<int>();
  c.slots_per_domain = j.at("slots_per_domain").get<int>();
  c.values_per_slot = j.at("values_per_slot").get<int>();
  c.variants_per_value = j.at("variants_per_value").get<int>();
  c.db_rows_per_domain = j.at("db_rows_per_domain").get<int>();
  c.confusable_pairs = j.at("confusable_pairs").get<int>();
  return c;
}

json tracker_config_to_json(const TrackerConfig& c) {
  return json{{"embed_dim", c.embed_dim},     {"hidden", c.hidden},
              {"heads", c.heads},             {"context_len", c.context_len},
              {"max_turn_len", c.max_turn_len}, {"logit_scale", c.logit_scale},
              {"dirichlet_head", c.dirichlet_head}};
}

TrackerConfig tracker_config_from_json(const json& j) {
  TrackerConfig c;
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.context_len = j.at("context_len").get<std::size_t>();
  c.max_turn_len = j.at("max_turn_len").get<std::size_t>();
  c.logit_scale = j.at("logit_scale").get<double>();
  c.dirichlet_head = j.at("dirichlet_head").get<bool>();
  return c;
}

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw std::invalid_argument("unknown config key '" + it.key() + "' in " +
                                  where);
    }
  }
}

// ---------------------------------------------------------------------------
// Corpus serialization

json goal_to_json(const UserGoal& g) {
  json domains = json::array();
  for (const auto& d : g.domains) {
    json cons = json::array();
    for (const auto& [slot, value] : d.constraints) cons.push_back({slot, value});
    domains.push_back(json{{"domain", d.domain},
                           {"constraints", cons},
                           {"requests", d.requests},
                           {"book", d.book}});
  }
  return json{{"domains", domains}};
}

UserGoal goal_from_json(const json& j) {
  UserGoal g;
  for (const auto& dj : j.at("domains")) {
    DomainGoal d;
    d.domain = dj.at("domain").get<int>();
    for (const auto& c : dj.at("constraints"))
      d.constraints[c.at(0).get<int>()] = c.at(1).get<int>();
    d.requests = dj.at("requests").get<std::vector<int>>();
    d.book = dj.at("book").get<bool>();
    g.domains.push_back(std::move(d));
  }
  return g;
}

json turn_to_json(const TurnRecord& t) {
  json answers = json::array();
  for (const auto& [flat, val] : t.sys.answers)
    answers.push_back({flat, val});
  json acts = json::array();
  for (const auto& a : t.user_acts)
    acts.push_back(json{{"type", static_cast<int>(a.type)},
                        {"domain", a.domain},
                        {"slot", a.slot},
                        {"value", a.value}});
  std::vector<int> requested(t.gold.requested.begin(), t.gold.requested.end());
  std::vector<int> active(t.gold.active_domains.begin(),
                          t.gold.active_domains.end());
  return json{
      {"sys",
       json{{"kind", static_cast<int>(t.sys.action.kind)},
            {"domain", t.sys.action.domain},
            {"slot", t.sys.action.slot},
            {"entity_row", t.sys.entity_row},
            {"answers", answers},
            {"match_count", t.sys.match_count}}},
      {"sys_tokens", t.sys_tokens},
      {"user_acts", acts},
      {"user_tokens", t.user_tokens},
      {"gold", json{{"slot_values", t.gold.slot_values},
                    {"requested", requested},
                    {"active_domains", active},
                    {"general_action", t.gold.general_action}}}};
}

TurnRecord turn_from_json(const json& j) {
  TurnRecord t;
  const json& s = j.at("sys");
  t.sys.action.kind = static_cast<SystemAction::Kind>(s.at("kind").get<int>());
  t.sys.action.domain = s.at("domain").get<int>();
  t.sys.action.slot = s.at("slot").get<int>();
  t.sys.entity_row = s.at("entity_row").get<int>();
  for (const auto& a : s.at("answers"))
    t.sys.answers.emplace_back(a.at(0).get<std::size_t>(), a.at(1).get<int>());
  t.sys.match_count = s.at("match_count").get<int>();
  t.sys_tokens = j.at("sys_tokens").get<std::vector<std::string>>();
  for (const auto& aj : j.at("user_acts")) {
    UserAct a;
    a.type = static_cast<UserActType>(aj.at("type").get<int>());
    a.domain = aj.at("domain").get<int>();
    a.slot = aj.at("slot").get<int>();
    a.value = aj.at("value").get<int>();
    t.user_acts.push_back(a);
  }
  t.user_tokens = j.at("user_tokens").get<std::vector<std::string>>();
  t.gold.slot_values = j.at("gold").at("slot_values").get<std::vector<int>>();
  for (int r : j.at("gold").at("requested").get<std::vector<int>>())
    t.gold.requested.push_back(r != 0);
  for (int a : j.at("gold").at("active_domains").get<std::vector<int>>())
    t.gold.active_domains.push_back(a != 0);
  t.gold.general_action = j.at("gold").at("general_action").get<int>();
  return t;
}

// ---------------------------------------------------------------------------
// Turn inputs

std::vector<TurnInput> dialogue_inputs(const World& world,
                                       const DialogueRecord& rec) {
  std::vector<TurnInput> inputs;
  inputs.reserve(rec.turns.size());
  for (const auto& t : rec.turns) {
    TurnInput in;
    in.system_tokens = world.token_ids(t.sys_tokens);
    in.user_tokens = world.token_ids(t.user_tokens);
    inputs.push_back(std::move(in));
  }
  return inputs;
}

}  // namespace

// ---------------------------------------------------------------------------
// Seeds and fingerprints

std::uint64_t stream_seed(std::uint64_t master, const std::string& name) {
  return splitmix64(master ^ fnv1a(name.data(), name.size()));
}

std::string world_fingerprint(const World& world) {
  json j;
  j["config"] = world_config_to_json(world.config);
  j["seed"] = world.seed;
  json vocab = json::array();
  for (std::size_t i = 0; i < world.vocab.size(); ++i)
    vocab.push_back(world.vocab.token(static_cast<int>(i)));
  j["vocab"] = vocab;
  json domains = json::array();
  for (const auto& d : world.ontology.domains) {
    json slots = json::array();
    for (const auto& s : d.slots) {
      json values = json::array();
      for (const auto& v : s.values)
        values.push_back(json{{"canonical", v.canonical},
                              {"variants", v.variants}});
      slots.push_back(json{{"name", s.name},
                           {"values", values},
                           {"description", s.description},
                           {"none_description", s.none_description}});
    }
    domains.push_back(json{{"name", d.name}, {"slots", slots}});
  }
  j["ontology"] = domains;
  json rows = json::array();
  for (const auto& r : world.database.rows)
    rows.push_back(json{{"domain", r.domain},
                        {"entity_name", r.entity_name},
                        {"values", r.values}});
  j["database"] = rows;
  const std::string text = j.dump();
  return hex64(fnv1a(text.data(), text.size()));
}

// ---------------------------------------------------------------------------
// Experiment configuration

std::string config_to_json_text(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["world"] = world_config_to_json(c.world);
  j["world_seed"] = c.world_seed;
  j["corpus"] = json{{"train_dialogues", c.train_dialogues},
                     {"test_dialogues", c.test_dialogues},
                     {"noise_prob", c.noise_prob},
                     {"goal_change_prob", c.goal_change_prob},
                     {"max_turns", c.max_turns}};
  json t = tracker_config_to_json(c.tracker);
  t.erase("dirichlet_head");  // derived from the training target, not config
  t["epochs"] = c.tracker_epochs;
  t["learning_rate"] = c.tracker_lr;
  t["label_epsilon"] = c.label_epsilon;
  j["tracker"] = t;
  j["ensemble"] = json{{"members", c.ensemble_members},
                       {"bagging_fraction", c.bagging_fraction}};
  j["distill"] = json{{"epochs", c.distill_epochs},
                      {"learning_rate", c.distill_lr},
                      {"temperature", c.distill_temperature},
                      {"anneal_fraction", c.anneal_fraction},
                      {"smoothing", c.distill_smoothing},
                      {"dialogues", c.distill_dialogues}};
  j["policy"] = json{{"hidden", c.policy.hidden},
                     {"clip", c.policy.clip},
                     {"gamma", c.policy.gamma},
                     {"lambda", c.policy.lambda},
                     {"inner_epochs", c.policy.inner_epochs},
                     {"entropy_bonus", c.policy.entropy_bonus},
                     {"value_coef", c.policy.value_coef},
                     {"learning_rate", c.policy.learning_rate},
                     {"pretrain_epochs", c.pretrain_epochs},
                     {"pretrain_lr", c.pretrain_lr},
                     {"ppo_iterations", c.ppo_iterations},
                     {"episodes_per_iteration", c.ppo_episodes_per_iteration},
                     {"oracle_pretrain", c.oracle_pretrain}};
  j["mode"] = c.mode;
  j["tracker_kind"] = c.tracker_kind;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  return j.dump(2) + "\n";
}

ExperimentConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") +
                                e.what());
  }
  check_keys(j,
             {"schema_version", "world", "world_seed", "corpus", "tracker",
              "ensemble", "distill", "policy", "mode", "tracker_kind", "seed",
              "out_dir"},
             "top level");
  ExperimentConfig c;
  if (j.contains("schema_version")) {
    c.schema_version = j.at("schema_version").get<int>();
    if (c.schema_version != 1)
      throw std::invalid_argument("unsupported config schema_version");
  }
  if (j.contains("world")) {
    check_keys(j["world"],
               {"num_domains", "slots_per_domain", "values_per_slot",
                "variants_per_value", "db_rows_per_domain",
                "confusable_pairs"},
               "world");
    WorldConfig d;  // fill defaults for absent keys
    json merged = world_config_to_json(d);
    merged.update(j["world"]);
    c.world = world_config_from_json(merged);
    if (c.world.num_domains < 1 || c.world.slots_per_domain < 1 ||
        c.world.values_per_slot < 2 || c.world.variants_per_value < 1 ||
        c.world.db_rows_per_domain < 1 || c.world.confusable_pairs < 0 ||
        c.world.confusable_pairs > c.world.values_per_slot / 2)
      throw std::invalid_argument("world config values out of range");
  }
  if (j.contains("world_seed")) c.world_seed = j.at("world_seed").get<std::uint64_t>();
  if (j.contains("corpus")) {
    const json& cj = j["corpus"];
    check_keys(cj,
               {"train_dialogues", "test_dialogues", "noise_prob",
                "goal_change_prob", "max_turns"},
               "corpus");
    if (cj.contains("train_dialogues"))
      c.train_dialogues = cj.at("train_dialogues").get<std::size_t>();
    if (cj.contains("test_dialogues"))
      c.test_dialogues = cj.at("test_dialogues").get<std::size_t>();
    if (cj.contains("noise_prob")) c.noise_prob = cj.at("noise_prob").get<double>();
    if (cj.contains("goal_change_prob"))
      c.goal_change_prob = cj.at("goal_change_prob").get<double>();
    if (cj.contains("max_turns")) c.max_turns = cj.at("max_turns").get<int>();
    if (c.noise_prob < 0.0 || c.noise_prob > 1.0 || c.goal_change_prob < 0.0 ||
        c.goal_change_prob > 1.0 || c.max_turns < 2)
      throw std::invalid_argument("corpus config values out of range");
  }
  if (j.contains("tracker")) {
    const json& tj = j["tracker"];
    check_keys(tj,
               {"embed_dim", "hidden", "heads", "context_len", "max_turn_len",
                "logit_scale", "epochs", "learning_rate", "label_epsilon"},
               "tracker");
    json merged = tracker_config_to_json(c.tracker);
    for (auto it = tj.begin(); it != tj.end(); ++it)
      if (it.key() != "epochs" && it.key() != "learning_rate" &&
          it.key() != "label_epsilon")
        merged[it.key()] = it.value();
    c.tracker = tracker_config_from_json(merged);
    if (tj.contains("epochs")) c.tracker_epochs = tj.at("epochs").get<int>();
    if (tj.contains("learning_rate"))
      c.tracker_lr = tj.at("learning_rate").get<double>();
    if (tj.contains("label_epsilon"))
      c.label_epsilon = tj.at("label_epsilon").get<double>();
    if (c.tracker.embed_dim < 1 || c.tracker.hidden < 2 ||
        c.tracker.hidden % 2 != 0 || c.tracker.heads < 1 ||
        c.tracker.hidden % c.tracker.heads != 0 || c.tracker.context_len < 1 ||
        c.tracker.max_turn_len < 4 || c.tracker_epochs < 1 ||
        c.tracker_lr <= 0.0 || c.label_epsilon < 0.0 || c.label_epsilon >= 1.0)
      throw std::invalid_argument("tracker config values out of range");
  }
  if (j.contains("ensemble")) {
    const json& ej = j["ensemble"];
    check_keys(ej, {"members", "bagging_fraction"}, "ensemble");
    if (ej.contains("members")) c.ensemble_members = ej.at("members").get<int>();
    if (ej.contains("bagging_fraction"))
      c.bagging_fraction = ej.at("bagging_fraction").get<double>();
    if (c.ensemble_members < 2 || c.bagging_fraction <= 0.0 ||
        c.bagging_fraction > 1.0)
      throw std::invalid_argument("ensemble config values out of range");
  }
  if (j.contains("distill")) {
    const json& dj = j["distill"];
    check_keys(dj,
               {"epochs", "learning_rate", "temperature", "anneal_fraction",
                "smoothing", "dialogues"},
               "distill");
    if (dj.contains("epochs")) c.distill_epochs = dj.at("epochs").get<int>();
    if (dj.contains("learning_rate"))
      c.distill_lr = dj.at("learning_rate").get<double>();
    if (dj.contains("temperature"))
      c.distill_temperature = dj.at("temperature").get<double>();
    if (dj.contains("anneal_fraction"))
      c.anneal_fraction = dj.at("anneal_fraction").get<double>();
    if (dj.contains("smoothing"))
      c.distill_smoothing = dj.at("smoothing").get<double>();
    if (dj.contains("dialogues"))
      c.distill_dialogues = dj.at("dialogues").get<std::size_t>();
    if (c.distill_epochs < 1 || c.distill_lr <= 0.0 ||
        c.distill_temperature < 1.0 || c.anneal_fraction < 0.0 ||
        c.anneal_fraction > 1.0 || c.distill_smoothing <= 0.0)
      throw std::invalid_argument("distill config values out of range");
  }
  if (j.contains("policy")) {
    const json& pj = j["policy"];
    check_keys(pj,
               {"hidden", "clip", "gamma", "lambda", "inner_epochs",
                "entropy_bonus", "value_coef", "learning_rate",
                "pretrain_epochs", "pretrain_lr", "ppo_iterations",
                "episodes_per_iteration", "oracle_pretrain"},
               "policy");
    if (pj.contains("hidden")) c.policy.hidden = pj.at("hidden").get<std::size_t>();
    if (pj.contains("clip")) c.policy.clip = pj.at("clip").get<double>();
    if (pj.contains("gamma")) c.policy.gamma = pj.at("gamma").get<double>();
    if (pj.contains("lambda")) c.policy.lambda = pj.at("lambda").get<double>();
    if (pj.contains("inner_epochs"))
      c.policy.inner_epochs = pj.at("inner_epochs").get<int>();
    if (pj.contains("entropy_bonus"))
      c.policy.entropy_bonus = pj.at("entropy_bonus").get<double>();
    if (pj.contains("value_coef"))
      c.policy.value_coef = pj.at("value_coef").get<double>();
    if (pj.contains("learning_rate"))
      c.policy.learning_rate = pj.at("learning_rate").get<double>();
    if (pj.contains("pretrain_epochs"))
      c.pretrain_epochs = pj.at("pretrain_epochs").get<int>();
    if (pj.contains("pretrain_lr"))
      c.pretrain_lr = pj.at("pretrain_lr").get<double>();
    if (pj.contains("ppo_iterations"))
      c.ppo_iterations = pj.at("ppo_iterations").get<int>();
    if (pj.contains("episodes_per_iteration"))
      c.ppo_episodes_per_iteration =
          pj.at("episodes_per_iteration").get<int>();
    if (pj.contains("oracle_pretrain"))
      c.oracle_pretrain = pj.at("oracle_pretrain").get<bool>();
    if (c.policy.hidden < 1 || c.policy.clip <= 0.0 || c.policy.gamma <= 0.0 ||
        c.policy.gamma > 1.0 || c.policy.lambda < 0.0 ||
        c.policy.lambda > 1.0 || c.policy.inner_epochs < 1 ||
        c.pretrain_epochs < 0 || c.ppo_iterations < 0 ||
        c.ppo_episodes_per_iteration < 1)
      throw std::invalid_argument("policy config values out of range");
  }
  if (j.contains("mode")) {
    c.mode = j.at("mode").get<std::string>();
    belief_mode_from_string(c.mode);  // validates
  }
  if (j.contains("tracker_kind")) {
    c.tracker_kind = j.at("tracker_kind").get<std::string>();
    if (c.tracker_kind != "single" && c.tracker_kind != "ensemble" &&
        c.tracker_kind != "end" && c.tracker_kind != "end2")
      throw std::invalid_argument("tracker_kind must be one of "
                                  "single|ensemble|end|end2");
  }
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  return config_from_json_text(read_file(path));
}

void save_config(const ExperimentConfig& config, const std::string& path) {
  write_file_atomic(path, config_to_json_text(config));
}

// ---------------------------------------------------------------------------
// Files

void write_file_atomic(const std::string& path, const std::string& contents) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// World and corpus persistence

void save_world(const World& world, const std::string& path) {
  json j;
  j["schema_version"] = 1;
  j["config"] = world_config_to_json(world.config);
  j["seed"] = world.seed;
  j["fingerprint"] = world_fingerprint(world);
  write_file_atomic(path, j.dump(2) + "\n");
}

World load_world(const std::string& path) {
  json j = json::parse(read_file(path));
  World world = build_world(world_config_from_json(j.at("config")),
                            j.at("seed").get<std::uint64_t>());
  const std::string expected = j.at("fingerprint").get<std::string>();
  const std::string actual = world_fingerprint(world);
  if (expected != actual)
    throw std::runtime_error("world fingerprint mismatch in " + path +
                             ": file " + expected + ", rebuilt " + actual);
  return world;
}

void save_corpus(const DialogueCorpus& corpus, const std::string& path) {
  json dialogues = json::array();
  for (const auto& d : corpus.dialogues) {
    json turns = json::array();
    for (const auto& t : d.turns) turns.push_back(turn_to_json(t));
    dialogues.push_back(json{{"goal", goal_to_json(d.goal)},
                             {"turns", turns},
                             {"terminated", d.terminated},
                             {"result", json{{"success", d.result.success},
                                             {"turns", d.result.turns},
                                             {"reward", d.result.reward}}}});
  }
  json j;
  j["schema_version"] = 1;
  j["world_seed"] = corpus.world_seed;
  j["dialogues"] = dialogues;
  write_file_atomic(path, j.dump() + "\n");
}

DialogueCorpus load_corpus(const std::string& path, const World& world) {
  json j = json::parse(read_file(path));
  DialogueCorpus corpus;
  corpus.world_seed = j.at("world_seed").get<std::uint64_t>();
  if (corpus.world_seed != world.seed)
    throw std::runtime_error("corpus " + path + " was generated for world seed " +
                             std::to_string(corpus.world_seed) +
                             ", not the loaded world");
  for (const auto& dj : j.at("dialogues")) {
    DialogueRecord d;
    d.goal = goal_from_json(dj.at("goal"));
    for (const auto& tj : dj.at("turns")) d.turns.push_back(turn_from_json(tj));
    d.terminated = dj.at("terminated").get<bool>();
    d.result.success = dj.at("result").at("success").get<bool>();
    d.result.turns = dj.at("result").at("turns").get<int>();
    d.result.reward = dj.at("result").at("reward").get<double>();
    corpus.dialogues.push_back(std::move(d));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::string& prefix, const ParamStore& params,
                     const std::map<std::string, std::string>& metadata) {
  std::string payload;
  json tensors = json::array();
  for (const std::string& name : params.names()) {
    const Tensor& t = params.at(name);
    tensors.push_back(json{{"name", name}, {"shape", t.shape}});
    const std::size_t bytes = t.data.size() * sizeof(double);
    const std::size_t offset = payload.size();
    payload.resize(offset + bytes);
    std::memcpy(payload.data() + offset, t.data.data(), bytes);
  }
  json manifest;
  manifest["schema_version"] = 1;
  manifest["tensors"] = tensors;
  manifest["payload_bytes"] = payload.size();
  manifest["checksum"] = hex64(fnv1a(payload.data(), payload.size()));
  manifest["metadata"] = metadata;
  write_file_atomic(prefix + ".bin", payload);
  write_file_atomic(prefix + ".json", manifest.dump(2) + "\n");
}

ParamStore load_checkpoint(const std::string& prefix,
                           std::map<std::string, std::string>* metadata,
                           const std::map<std::string, std::string>& expect) {
  json manifest = json::parse(read_file(prefix + ".json"));
  std::map<std::string, std::string> meta;
  for (auto it = manifest.at("metadata").begin();
       it != manifest.at("metadata").end(); ++it)
    meta[it.key()] = it.value().get<std::string>();
  for (const auto& [key, want] : expect) {
    auto found = meta.find(key);
    if (found == meta.end() || found->second != want)
      throw std::runtime_error(
          "checkpoint " + prefix + " metadata mismatch for '" + key +
          "': expected '" + want + "', found '" +
          (found == meta.end() ? std::string("<absent>") : found->second) + "'");
  }
  const std::string payload = read_file(prefix + ".bin");
  if (payload.size() != manifest.at("payload_bytes").get<std::size_t>())
    throw std::runtime_error("checkpoint " + prefix +
                             " payload size mismatch (truncated file?)");
  const std::string checksum = hex64(fnv1a(payload.data(), payload.size()));
  if (checksum != manifest.at("checksum").get<std::string>())
    throw std::runtime_error("checkpoint " + prefix + " checksum mismatch");
  ParamStore params;
  std::size_t offset = 0;
  for (const auto& tj : manifest.at("tensors")) {
    Tensor t(tj.at("shape").get<std::vector<std::size_t>>());
    const std::size_t bytes = t.data.size() * sizeof(double);
    if (offset + bytes > payload.size())
      throw std::runtime_error("checkpoint " + prefix +
                               " payload shorter than manifest (truncated?)");
    std::memcpy(t.data.data(), payload.data() + offset, bytes);
    offset += bytes;
    params.add(tj.at("name").get<std::string>(), std::move(t));
  }
  if (offset != payload.size())
    throw std::runtime_error("checkpoint " + prefix +
                             " payload longer than manifest");
  if (metadata) *metadata = std::move(meta);
  return params;
}

void assign_params(ParamStore& dst, const ParamStore& src) {
  for (const std::string& name : src.names()) {
    if (!dst.contains(name))
      throw std::runtime_error("parameter '" + name +
                               "' not present in destination store");
    Tensor& d = dst.at(name);
    const Tensor& s = src.at(name);
    if (d.shape != s.shape)
      throw std::runtime_error("parameter '" + name + "' shape mismatch");
    d.data = s.data;
  }
  if (dst.names().size() != src.names().size())
    throw std::runtime_error("parameter stores have different tensor sets");
}

void save_tracker(const Tracker& tracker, const std::string& prefix,
                  const std::map<std::string, std::string>& extra_metadata) {
  std::map<std::string, std::string> meta = extra_metadata;
  meta["tracker_config"] = tracker_config_to_json(tracker.config()).dump();
  meta["world_fingerprint"] = world_fingerprint(tracker.world());
  save_checkpoint(prefix, tracker.params(), meta);
}

Tracker load_tracker(const World& world, const std::string& prefix,
                     std::map<std::string, std::string>* metadata) {
  std::map<std::string, std::string> meta;
  ParamStore loaded = load_checkpoint(
      prefix, &meta, {{"world_fingerprint", world_fingerprint(world)}});
  TrackerConfig config =
      tracker_config_from_json(json::parse(meta.at("tracker_config")));
  Tracker tracker(world, config, 0);
  assign_params(tracker.params(), loaded);
  if (metadata) *metadata = std::move(meta);
  return tracker;
}

// ---------------------------------------------------------------------------
// Timing

void TimingLog::record(const std::string& stage, double total_ms,
                       std::size_t turns) {
  Row row;
  row.stage = stage;
  row.turns = turns;
  row.mean_ms_per_turn = turns == 0 ? 0.0 : total_ms / static_cast<double>(turns);
  rows.push_back(std::move(row));
}

std::string TimingLog::to_csv() const {
  std::string out = "stage,mean_ms_per_turn,turns\n";
  for (const Row& r : rows)
    out += r.stage + "," + format_double(r.mean_ms_per_turn) + "," +
           std::to_string(r.turns) + "\n";
  return out;
}

TimingLog TimingLog::from_csv(const std::string& text) {
  TimingLog log;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "stage,mean_ms_per_turn,turns")
    throw std::runtime_error("bad timing CSV header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw std::runtime_error("bad timing CSV row: " + line);
    Row row;
    row.stage = line.substr(0, c1);
    row.mean_ms_per_turn = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    row.turns = static_cast<std::size_t>(std::stoull(line.substr(c2 + 1)));
    log.rows.push_back(std::move(row));
  }
  return log;
}

// ---------------------------------------------------------------------------
// Training loops

double train_tracker(Tracker& tracker, const DialogueCorpus& corpus,
                     const std::vector<std::uint32_t>& dialogue_ids,
                     const TrainOptions& options, std::uint64_t shuffle_seed) {
  const World& world = tracker.world();
  const LossWeights weights;
  double final_epoch_loss = 0.0;
  std::vector<std::uint32_t> order = dialogue_ids;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::mt19937_64 rng(splitmix64(shuffle_seed + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t turn_count = 0;
    for (std::uint32_t id : order) {
      const DialogueRecord& rec = corpus.dialogues.at(id);
      if (rec.turns.empty()) continue;
      Tape tape;
      auto graph = tracker.begin_dialogue(tape);
      Tape::Var total{};
      bool first = true;
      const auto inputs = dialogue_inputs(world, rec);
      for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto fwd = tracker.forward_turn(graph, inputs[t]);
        const TurnLabels labels = labels_from_gold(rec.turns[t].gold);
        GoalSupervision sup;  // label smoothing
        auto loss = multitask_loss(tape, fwd, labels, sup, weights,
                                   options.label_epsilon);
        total = first ? loss : tape.add(total, loss);
        first = false;
      }
      auto mean = tape.scale(total, 1.0 / static_cast<double>(inputs.size()));
      loss_sum += tape.value(mean).data[0] * static_cast<double>(inputs.size());
      turn_count += inputs.size();
      auto grads = tape.backward(mean);
      adam_step(tracker.params(), grads, options.learning_rate);
    }
    if (epoch == options.epochs - 1 && turn_count > 0)
      final_epoch_loss = loss_sum / static_cast<double>(turn_count);
  }
  return final_epoch_loss;
}

std::vector<TrackerOutput> run_tracker_on_dialogue(
    const Tracker& tracker, const DialogueRecord& dialogue) {
  return tracker.track_dialogue(dialogue_inputs(tracker.world(), dialogue));
}

TrackerOutput combine_ensemble_outputs(
    const std::vector<TrackerOutput>& members) {
  if (members.empty())
    throw std::invalid_argument("cannot combine an empty ensemble");
  const double inv = 1.0 / static_cast<double>(members.size());
  TrackerOutput out = members.front();
  for (auto& g : out.goals) g.alphas.reset();
  for (std::size_t s = 0; s < out.goals.size(); ++s)
    for (std::size_t k = 0; k < out.goals[s].probs.size(); ++k) {
      double sum = 0.0;
      for (const auto& m : members) sum += m.goals[s].probs[k];
      out.goals[s].probs.probs[k] = sum * inv;
    }
  for (std::size_t s = 0; s < out.request_probs.size(); ++s) {
    double sum = 0.0;
    for (const auto& m : members) sum += m.request_probs[s];
    out.request_probs[s] = sum * inv;
  }
  for (std::size_t d = 0; d < out.domain_probs.size(); ++d) {
    double sum = 0.0;
    for (const auto& m : members) sum += m.domain_probs[d];
    out.domain_probs[d] = sum * inv;
  }
  for (std::size_t k = 0; k < out.general.size(); ++k) {
    double sum = 0.0;
    for (const auto& m : members) sum += m.general[k];
    out.general.probs[k] = sum * inv;
  }
  return out;
}

std::vector<std::unique_ptr<Tracker>> train_tracker_ensemble(
    const World& world, const TrackerConfig& config,
    const DialogueCorpus& corpus, int members, double fraction,
    const TrainOptions& options, std::uint64_t seed) {
  const auto plans =
      make_bagged_subsets(corpus.dialogues.size(),
                          static_cast<std::size_t>(members), fraction,
                          stream_seed(seed, "subsets"));
  std::vector<std::unique_ptr<Tracker>> trackers;
  for (int m = 0; m < members; ++m) {
    auto tracker = std::make_unique<Tracker>(
        world, config, stream_seed(seed, "init." + std::to_string(m)));
    train_tracker(*tracker, corpus, plans[static_cast<std::size_t>(m)].record_ids,
                  options, stream_seed(seed, "shuffle." + std::to_string(m)));
    trackers.push_back(std::move(tracker));
  }
  return trackers;
}

DistillTargets compute_distill_targets(const std::vector<Tracker*>& members,
                                       const DialogueCorpus& corpus,
                                       const std::vector<std::uint32_t>& ids,
                                       bool with_proxies, double smoothing) {
  if (members.empty())
    throw std::invalid_argument("distillation requires at least one member");
  DistillTargets targets;
  targets.dialogue_ids = ids;
  targets.posteriors.resize(ids.size());
  if (with_proxies) targets.proxies.resize(ids.size());
  const std::size_t num_slots = members.front()->world().num_slots();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const DialogueRecord& rec = corpus.dialogues.at(ids[i]);
    std::vector<std::vector<TrackerOutput>> outputs;  // per member, per turn
    outputs.reserve(members.size());
    for (const Tracker* m : members)
      outputs.push_back(run_tracker_on_dialogue(*m, rec));
    const std::size_t turns = rec.turns.size();
    targets.posteriors[i].resize(turns);
    if (with_proxies) targets.proxies[i].resize(turns);
    for (std::size_t t = 0; t < turns; ++t) {
      targets.posteriors[i][t].resize(num_slots);
      if (with_proxies) targets.proxies[i][t].resize(num_slots);
      for (std::size_t s = 0; s < num_slots; ++s) {
        EnsemblePrediction e;
        e.members.reserve(members.size());
        for (const auto& mo : outputs) e.members.push_back(mo[t].goals[s].probs);
        targets.posteriors[i][t][s] = predictive_posterior(e);
        if (with_proxies)
          targets.proxies[i][t][s] = proxy_dirichlet_target(e, smoothing);
      }
    }
  }
  return targets;
}

double distill_tracker(Tracker& student, const DialogueCorpus& corpus,
                       const DistillTargets& targets, GoalLossMode mode,
                       const TrainOptions& options, double base_temperature,
                       double anneal_fraction, std::uint64_t shuffle_seed) {
  if (mode == GoalLossMode::kLabelSmoothing)
    throw std::invalid_argument("distill_tracker expects EnD or EnD2 mode");
  if (mode == GoalLossMode::kEnD2 && targets.proxies.empty())
    throw std::invalid_argument("EnD2 distillation needs proxy targets");
  const World& world = student.world();
  const LossWeights weights;
  const std::size_t n = targets.dialogue_ids.size();
  const double total_steps =
      static_cast<double>(options.epochs) * static_cast<double>(n);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  double final_epoch_loss = 0.0;
  std::size_t step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::mt19937_64 rng(splitmix64(shuffle_seed + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t turn_count = 0;
    for (std::size_t i : order) {
      const DialogueRecord& rec =
          corpus.dialogues.at(targets.dialogue_ids[i]);
      if (rec.turns.empty()) {
        ++step;
        continue;
      }
      const double progress = static_cast<double>(step) / total_steps;
      const double temperature =
          annealed_temperature(base_temperature, progress, anneal_fraction);
      Tape tape;
      auto graph = student.begin_dialogue(tape);
      Tape::Var total{};
      bool first = true;
      const auto inputs = dialogue_inputs(world, rec);
      for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto fwd = student.forward_turn(graph, inputs[t]);
        const TurnLabels labels = labels_from_gold(rec.turns[t].gold);
        GoalSupervision sup;
        sup.mode = mode;
        if (mode == GoalLossMode::kEnD) {
          sup.posteriors = targets.posteriors[i][t];
          sup.temperature = temperature;
        } else {
          sup.proxies = targets.proxies[i][t];
        }
        auto loss = multitask_loss(tape, fwd, labels, sup, weights,
                                   options.label_epsilon);
        total = first ? loss : tape.add(total, loss);
        first = false;
      }
      auto mean = tape.scale(total, 1.0 / static_cast<double>(inputs.size()));
      loss_sum += tape.value(mean).data[0] * static_cast<double>(inputs.size());
      turn_count += inputs.size();
      auto grads = tape.backward(mean);
      adam_step(student.params(), grads, options.learning_rate);
      ++step;
    }
    if (epoch == options.epochs - 1 && turn_count > 0)
      final_epoch_loss = loss_sum / static_cast<double>(turn_count);
  }
  return final_epoch_loss;
}

// ---------------------------------------------------------------------------
// Calibration evaluation

std::vector<TurnEvaluation> calibration_evals(
    const std::vector<std::vector<TrackerOutput>>& outputs_per_dialogue,
    const DialogueCorpus& test) {
  if (outputs_per_dialogue.size() != test.dialogues.size())
    throw std::invalid_argument("outputs/corpus dialogue count mismatch");
  std::vector<TurnEvaluation> evals;
  for (std::size_t d = 0; d < test.dialogues.size(); ++d) {
    const auto& rec = test.dialogues[d];
    const auto& outputs = outputs_per_dialogue[d];
    if (outputs.size() != rec.turns.size())
      throw std::invalid_argument("outputs/corpus turn count mismatch");
    for (std::size_t t = 0; t < rec.turns.size(); ++t) {
      TurnEvaluation ev;
      for (const auto& g : outputs[t].goals) ev.slot_predictions.push_back(g.probs);
      for (int v : rec.turns[t].gold.slot_values)
        ev.gold_values.push_back(static_cast<std::size_t>(v));
      evals.push_back(std::move(ev));
    }
  }
  return evals;
}

CalibrationMetrics calibration_metrics(
    const std::vector<TurnEvaluation>& evals) {
  CalibrationMetrics m;
  m.jga = joint_goal_accuracy(evals);
  m.l2 = l2_error(evals);
  m.ece = ece(evals, 10);
  return m;
}

// ---------------------------------------------------------------------------
// CLI

namespace {

struct PipelineError {
  int code;
  json detail;
};

PipelineError dependency_error(const std::string& what,
                               const std::string& expected_path) {
  return PipelineError{3, json{{"error", "missing artifact dependency: " + what},
                               {"expected_path", expected_path}}};
}

struct Paths {
  fs::path out;
  explicit Paths(const std::string& out_dir) : out(out_dir) {}
  std::string config() const { return (out / "config.json").string(); }
  std::string world() const { return (out / "world.json").string(); }
  std::string corpus_train() const { return (out / "corpus_train.json").string(); }
  std::string corpus_test() const { return (out / "corpus_test.json").string(); }
  std::string member(int m) const {
    return (out / ("ensemble_member_" + std::to_string(m))).string();
  }
  std::string distilled(const std::string& kind) const {
    return (out / ("distilled_" + kind)).string();
  }
  std::string policy(const std::string& mode, const std::string& kind) const {
    return (out / ("policy_" + mode + "_" + kind)).string();
  }
  std::string metrics_calibration(const std::string& kind) const {
    return (out / ("metrics_calibration_" + kind + ".csv")).string();
  }
  std::string reliability(const std::string& kind) const {
    return (out / ("reliability_" + kind + ".csv")).string();
  }
  std::string timing(const std::string& kind) const {
    return (out / ("timing_calibration_" + kind + ".csv")).string();
  }
  std::string metrics_policy(const std::string& mode,
                             const std::string& kind) const {
    return (out / ("metrics_policy_" + mode + "_" + kind + ".csv")).string();
  }
  std::string train_policy_log(const std::string& mode,
                               const std::string& kind) const {
    return (out / ("train_policy_" + mode + "_" + kind + ".csv")).string();
  }
  std::string summary() const { return (out / "summary.json").string(); }
};

void require_file(const std::string& what, const std::string& path) {
  if (!fs::exists(path)) throw dependency_error(what, path);
}

World load_world_dep(const Paths& paths) {
  require_file("world (run gen-world)", paths.world());
  return load_world(paths.world());
}

EngineConfig engine_config(const ExperimentConfig& c) {
  EngineConfig e;
  e.noise_prob = c.noise_prob;
  e.max_turns = c.max_turns;
  e.user.goal_change_prob = c.goal_change_prob;
  return e;
}

int member_count(const ExperimentConfig& c) { return c.ensemble_members; }

void require_members(const ExperimentConfig& c, const Paths& paths) {
  for (int m = 0; m < member_count(c); ++m)
    require_file("trained ensemble (run train-ensemble)",
                 paths.member(m) + ".json");
}

/// Loads the single tracker backing a tracker kind (single = member 0,
/// end/end2 = distilled student). "ensemble" has no single backing tracker.
Tracker load_kind_tracker(const ExperimentConfig& c, const Paths& paths,
                          const World& world, const std::string& kind) {
  if (kind == "single") {
    require_file("trained ensemble (run train-ensemble)",
                 paths.member(0) + ".json");
    return load_tracker(world, paths.member(0));
  }
  if (kind == "end" || kind == "end2") {
    require_file("distilled tracker (run distill)",
                 paths.distilled(kind) + ".json");
    return load_tracker(world, paths.distilled(kind));
  }
  throw PipelineError{
      4, json{{"error", "tracker kind '" + kind +
                            "' does not name a single tracker checkpoint"}}};
}

std::string metrics_csv(const CalibrationMetrics& m, std::size_t turns) {
  return "jga,l2,ece,turns\n" + format_double(m.jga) + "," +
         format_double(m.l2) + "," + format_double(m.ece) + "," +
         std::to_string(turns) + "\n";
}

std::string reliability_csv(const std::vector<ReliabilityBin>& table) {
  std::string out = "bin,mean_confidence,accuracy,count\n";
  for (std::size_t b = 0; b < table.size(); ++b)
    out += std::to_string(b) + "," + format_double(table[b].mean_confidence) +
           "," + format_double(table[b].accuracy) + "," +
           std::to_string(table[b].count) + "\n";
  return out;
}

std::string policy_metrics_csv(const EvaluationSummary& s) {
  return "success_rate,mean_reward,mean_turns,episodes\n" +
         format_double(s.success_rate) + "," + format_double(s.mean_reward) +
         "," + format_double(s.mean_turns) + "," +
         std::to_string(s.episodes) + "\n";
}

json parse_one_row_csv(const std::string& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string header, row;
  if (!std::getline(in, header) || !std::getline(in, row))
    throw std::runtime_error("bad metrics CSV: " + path);
  json out;
  std::istringstream hs(header), rs(row);
  std::string key, value;
  while (std::getline(hs, key, ',')) {
    if (!std::getline(rs, value, ','))
      throw std::runtime_error("bad metrics CSV: " + path);
    out[key] = std::stod(value);
  }
  return out;
}

// ----- subcommand bodies ---------------------------------------------------

void run_gen_world(const ExperimentConfig& c) {
  const Paths paths(c.out_dir);
  const World world = build_world(c.world, c.world_seed);
  save_world(world, paths.world());
  save_config(c, paths.config());
}

void run_gen_corpus(const ExperimentConfig& c) {
  const Paths paths(c.out_dir);
  const World world = load_world_dep(paths);
  const EngineConfig engine = engine_config(c);
  const DialogueCorpus train = generate_corpus(
      world, c.train_dialogues, engine, stream_seed(c.seed, "corpus.train"));
  const DialogueCorpus test = generate_corpus(
      world, c.test_dialogues, engine, stream_seed(c.seed, "corpus.test"));
  save_corpus(train, paths.corpus_train());
  save_corpus(test, paths.corpus_test());
  save_config(c, paths.config());
}

void run_train_ensemble(const ExperimentConfig& c) {
  const Paths paths(c.out_dir);
  const World world = load_world_dep(paths);
  require_file("training corpus (run gen-corpus)", paths.corpus_train());
  const DialogueCorpus train = load_corpus(paths.corpus_train(), world);
  TrackerConfig member_config = c.tracker;
  member_config.dirichlet_head = false;
  TrainOptions options{c.tracker_epochs, c.tracker_lr, c.label_epsilon};
  auto members =
      train_tracker_ensemble(world, member_config, train, c.ensemble_members,
                             c.bagging_fraction, options, c.seed);
  for (int m = 0; m < c.ensemble_members; ++m)
    save_tracker(*members[static_cast<std::size_t>(m)], paths.member(m),
                 {{"kind", "member"}, {"member", std::to_string(m)}});
  save_config(c, paths.config());
}

void run_distill(const ExperimentConfig& c, const std::string& kind) {
  if (kind != "end" && kind != "end2")
    throw PipelineError{4, json{{"error",
                                 "distill target must be end or end2, got '" +
                                     kind + "'"}}};
  const Paths paths(c.out_dir);
  const World world = load_world_dep(paths);
  require_file("training corpus (run gen-corpus)", paths.corpus_train());
  require_members(c, paths);
  const DialogueCorpus train = load_corpus(paths.corpus_train(), world);

  std::vector<Tracker> members;
  members.reserve(static_cast<std::size_t>(c.ensemble_members));
  for (int m = 0; m < c.ensemble_members; ++m)
    members.push_back(load_tracker(world, paths.member(m)));
  std::vector<Tracker*> member_ptrs;
  for (auto& m : members) member_ptrs.push_back(&m);

  std::size_t n = train.dialogues.size();
  if (c.distill_dialogues > 0 && c.distill_dialogues < n)
    n = c.distill_dialogues;
  std::vector<std::uint32_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::uint32_t>(i);

  const bool end2 = kind == "end2";
  const DistillTargets targets = compute_distill_targets(
      member_ptrs, train, ids, end2, c.distill_smoothing);

  TrackerConfig student_config = c.tracker;
  student_config.dirichlet_head = end2;
  Tracker student(world, student_config,
                  stream_seed(c.seed, "distill.init." + kind));
  TrainOptions options{c.distill_epochs, c.distill_lr, c.label_epsilon};
  distill_tracker(student, train, targets,
                  end2 ? GoalLossMode::kEnD2 : GoalLossMode::kEnD, options,
                  c.distill_temperature, c.anneal_fraction,
                  stream_seed(c.seed, "distill.shuffle." + kind));
  save_tracker(student, paths.distilled(kind), {{"kind", kind}});
  save_config(c, paths.config());
}

void run_eval_calibration(const ExperimentConfig& c, const std::string& kind) {
  const Paths paths(c.out_dir);
  const World world = load_world_dep(paths);
  require_file("test corpus (run gen-corpus)", paths.corpus_test());
  const DialogueCorpus test = load_corpus(paths.corpus_test(), world);

  using clock = std::chrono::steady_clock;
  TimingLog timing;
  std::size_t total_turns = 0;
  for (const auto& d : test.dialogues) total_turns += d.turns.size();

  std::vector<std::vector<TrackerOutput>> outputs(test.dialogues.size());
  if (kind == "ensemble") {
    require_members(c, paths);
    std::vector<Tracker> members;
    for (int m = 0; m < c.ensemble_members; ++m)
      members.push_back(load_tracker(world, paths.member(m)));
    // Time one member alone for the single-vs-ensemble latency ratio.
    const auto t0 = clock::now();
    std::vector<std::vector<TrackerOutput>> first_member(test.dialogues.size());
    for (std::size_t d = 0; d < test.dialogues.size(); ++d)
      first_member[d] = run_tracker_on_dialogue(members[0], test.dialogues[d]);
    const auto t1 = clock::now();
    timing.record("track_single",
                  std::chrono::duration<double, std::milli>(t1 - t0).count(),
                  total_turns);
    const auto t2 = clock::now();
    for (std::size_t d = 0; d < test.dialogues.size(); ++d) {
      std::vector<std::vector<TrackerOutput>> per_member(members.size());
      per_member[0] = std::move(first_member[d]);
      for (std::size_t m = 1; m < members.size(); ++m)
        per_member[m] = run_tracker_on_dialogue(members[m], test.dialogues[d]);
      const std::size_t turns = test.dialogues[d].turns.size();
      outputs[d].resize(turns);
      for (std::size_t t = 0; t < turns; ++t) {
        std::vector<TrackerOutput> at_turn;
        at_turn.reserve(members.size());
        for (std::size_t m = 0; m < members.size(); ++m)
          at_turn.push_back(std::move(per_member[m][t]));
        outputs[d][t] = combine_ensemble_outputs(at_turn);
      }
    }
    const auto t3 = clock::now();
    // The ensemble redoes member 0's work above, so this span is the full
    // M-member cost.
    timing.record("track_ensemble",
                  std::chrono::duration<double, std::milli>(t3 - t2).count() +
                      std::chrono::duration<double, std::milli>(t1 - t0).count(),
                  total_turns);
  } else {
    Tracker tracker = load_kind_tracker(c, paths, world, kind);
    const auto t0 = clock::now();
    for (std::size_t d = 0; d < test.dialogues.size(); ++d)
      outputs[d] = run_tracker_on_dialogue(tracker, test.dialogues[d]);
    const auto t1 = clock::now();
    timing.record("track_" + kind,
                  std::chrono::duration<double, std::milli>(t1 - t0).count(),
                  total_turns);
  }

  const auto evals = calibration_evals(outputs, test);
  const CalibrationMetrics metrics = calibration_metrics(evals);
  write_file_atomic(paths.metrics_calibration(kind),
                    metrics_csv(metrics, evals.size()));
  write_file_atomic(paths.reliability(kind),
                    reliability_csv(reliability_table(evals, 10)));
  write_file_atomic(paths.timing(kind), timing.to_csv());
  save_config(c, paths.config());
}

void run_train_policy(const ExperimentConfig& c, const std::string& kind) {
  const Paths paths(c.out_dir);
  const World world = load_world_dep(paths);
  require_file("training corpus (run gen-corpus)", paths.corpus_train());
  const DialogueCorpus train = load_corpus(paths.corpus_train(), world);
  const BeliefMode mode = belief_mode_from_string(c.mode);
  Tracker tracker = load_kind_tracker(c, paths, world, kind);
  if (mode == BeliefMode::kKnowledgeUnc && !tracker.config().dirichlet_head)
    throw PipelineError{
        4, json{{"error", "knowledge_unc mode requires an end2 tracker "
                          "(Dirichlet head); got '" + kind + "'"}}};

  const PretrainData data =
      pretrain_data_from_corpus(train, tracker, mode, c.oracle_pretrain);
  PolicyNet policy(belief_feature_size(world, mode),
                   static_cast<std::size_t>(
                       ActionSpace{world.config.num_domains,
                                   world.config.slots_per_domain}
                           .size()),
                   c.policy, stream_seed(c.seed, "policy.init"));
  const PretrainResult pretrain = pretrain_supervised(
      policy, data.states, data.actions, c.pretrain_epochs, c.pretrain_lr);

  std::string log = "phase,iteration,value\n";
  log += "pretrain_accuracy,0," + format_double(pretrain.accuracy) + "\n";
  for (std::size_t e = 0; e < pretrain.epoch_losses.size(); ++e)
    log += "pretrain_loss," + std::to_string(e) + "," +
           format_double(pretrain.epoch_losses[e]) + "\n";

  const EngineConfig engine = engine_config(c);
  std::mt19937_64 rng(stream_seed(c.seed, "rollout"));
  for (int it = 0; it < c.ppo_iterations; ++it) {
    std::vector<Trajectory> batch;
    for (int e = 0; e < c.ppo_episodes_per_iteration; ++e)
      batch.push_back(
          run_episode(world, tracker, policy, mode, engine, rng, false)
              .trajectory);
    const PpoDiagnostics diag = ppo_update(policy, batch);
    log += "ppo_policy_loss," + std::to_string(it) + "," +
           format_double(diag.policy_loss) + "\n";
    log += "ppo_value_loss," + std::to_string(it) + "," +
           format_double(diag.value_loss) + "\n";
  }

  save_checkpoint(
      paths.policy(c.mode, kind), policy.params(),
      {{"kind", "policy"},
       {"belief_mode", c.mode},
       {"tracker_kind", kind},
       {"world_fingerprint", world_fingerprint(world)},
       {"feature_dim", std::to_string(policy.feature_dim())},
       {"num_actions", std::to_string(policy.num_actions())}});
  write_file_atomic(paths.train_policy_log(c.mode, kind), log);
  save_config(c, paths.config());
}

void run_eval_policy(const ExperimentConfig& c, const std::string& kind) {
  const Paths paths(c.out_dir);
  const World world = load_world_dep(paths);
  const BeliefMode mode = belief_mode_from_string(c.mode);
  Tracker tracker = load_kind_tracker(c, paths, world, kind);
  require_file("trained policy (run train-policy)",
               paths.policy(c.mode, kind) + ".json");
  std::map<std::string, std::string> meta;
  const ParamStore loaded =
      load_checkpoint(paths.policy(c.mode, kind), &meta,
                      {{"kind", "policy"},
                       {"belief_mode", c.mode},
                       {"tracker_kind", kind},
                       {"world_fingerprint", world_fingerprint(world)}});
  PolicyNet policy(static_cast<std::size_t>(std::stoull(meta.at("feature_dim"))),
                   static_cast<std::size_t>(std::stoull(meta.at("num_actions"))),
                   c.policy, 0);
  assign_params(policy.params(), loaded);

  const EvaluationSummary summary =
      evaluate_policy(world, tracker, policy, mode, engine_config(c),
                      c.test_dialogues, stream_seed(c.seed, "eval.rollout"));
  write_file_atomic(paths.metrics_policy(c.mode, kind),
                    policy_metrics_csv(summary));
  save_config(c, paths.config());
}

void run_report(const ExperimentConfig& c) {
  const Paths paths(c.out_dir);
  json summary;
  summary["schema_version"] = 1;

  json calibration = json::object();
  for (const std::string kind : {"single", "ensemble", "end", "end2"}) {
    const std::string path = paths.metrics_calibration(kind);
    if (fs::exists(path)) calibration[kind] = parse_one_row_csv(path);
  }
  if (!calibration.empty()) summary["calibration"] = calibration;

  json policy = json::object();
  for (const std::string mode :
       {"binary", "confidence", "total_unc", "knowledge_unc"}) {
    json per_kind = json::object();
    for (const std::string kind : {"single", "end", "end2"}) {
      const std::string path = paths.metrics_policy(mode, kind);
      if (fs::exists(path)) per_kind[kind] = parse_one_row_csv(path);
    }
    if (!per_kind.empty()) policy[mode] = per_kind;
  }
  if (!policy.empty()) summary["policy"] = policy;

  const std::string timing_path = paths.timing("ensemble");
  if (fs::exists(timing_path)) {
    const TimingLog timing = TimingLog::from_csv(read_file(timing_path));
    double single_ms = 0.0, ensemble_ms = 0.0;
    for (const auto& row : timing.rows) {
      if (row.stage == "track_single") single_ms = row.mean_ms_per_turn;
      if (row.stage == "track_ensemble") ensemble_ms = row.mean_ms_per_turn;
    }
    if (single_ms > 0.0 && ensemble_ms > 0.0) {
      summary["timing"] = json{
          {"single_ms_per_turn", single_ms},
          {"ensemble_ms_per_turn", ensemble_ms},
          {"ensemble_over_single_ratio", ensemble_ms / single_ms}};
    }
  }

  write_file_atomic(paths.summary(), summary.dump(2) + "\n");
}

}  // namespace

int cmd(const std::vector<std::string>& argv) {
  CLI::App app{"uncertainty-aware dialogue state tracking laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir, mode, tracker_kind;
  std::uint64_t seed = 0;
  bool seed_set = false, out_set = false, mode_set = false, tracker_set = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config JSON");
    sub->add_option("--seed", seed, "master seed (overrides config)")
        ->each([&](const std::string&) { seed_set = true; });
    sub->add_option("--out", out_dir, "artifact directory (overrides config)")
        ->each([&](const std::string&) { out_set = true; });
    sub->add_option("--mode", mode,
                    "belief-state mode "
                    "{binary|confidence|total_unc|knowledge_unc}; for "
                    "distill, the target {end|end2}")
        ->each([&](const std::string&) { mode_set = true; });
    sub->add_option("--tracker", tracker_kind,
                    "tracker kind {single|ensemble|end|end2}")
        ->each([&](const std::string&) { tracker_set = true; });
    return sub;
  };

  const std::vector<std::string> names = {
      "gen-world",     "gen-corpus",  "train-ensemble", "distill",
      "eval-calibration", "train-policy", "eval-policy",    "report"};
  for (const auto& name : names) add_common(app.add_subcommand(name));

  std::vector<std::string> args(argv.rbegin(), argv.rend());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", e.what()}}.dump() << "\n";
    return 2;
  }

  try {
    ExperimentConfig config;
    if (!config_path.empty()) config = load_config(config_path);
    if (seed_set) config.seed = seed;
    if (out_set) config.out_dir = out_dir;
    if (mode_set && mode != "end" && mode != "end2") {
      belief_mode_from_string(mode);  // validates
      config.mode = mode;
    }
    if (tracker_set) {
      if (tracker_kind != "single" && tracker_kind != "ensemble" &&
          tracker_kind != "end" && tracker_kind != "end2")
        throw std::invalid_argument(
            "tracker kind must be one of single|ensemble|end|end2");
      config.tracker_kind = tracker_kind;
    }

    const std::string sub = app.get_subcommands().front()->get_name();
    if (sub == "gen-world") {
      run_gen_world(config);
    } else if (sub == "gen-corpus") {
      run_gen_corpus(config);
    } else if (sub == "train-ensemble") {
      run_train_ensemble(config);
    } else if (sub == "distill") {
      std::string target = config.tracker_kind;
      if (mode_set && (mode == "end" || mode == "end2")) target = mode;
      if (tracker_set) target = tracker_kind;
      run_distill(config, target);
    } else if (sub == "eval-calibration") {
      run_eval_calibration(config, config.tracker_kind);
    } else if (sub == "train-policy") {
      run_train_policy(config, config.tracker_kind);
    } else if (sub == "eval-policy") {
      run_eval_policy(config, config.tracker_kind);
    } else if (sub == "report") {
      run_report(config);
    }
    return 0;
  } catch (const PipelineError& e) {
    std::cerr << e.detail.dump() << "\n";
    return e.code;
  } catch (const std::invalid_argument& e) {
    std::cerr << json{{"error", e.what()}}.dump() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
}

}  // namespace udst
