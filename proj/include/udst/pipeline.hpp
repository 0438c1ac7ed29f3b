// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef UDST_PIPELINE_HPP
#define UDST_PIPELINE_HPP

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "udst/calib.hpp"
#include "udst/dialoguesim.hpp"
#include "udst/ensemble.hpp"
#include "udst/policy.hpp"
#include "udst/tracker.hpp"

// Orchestration: experiment configuration, persistence (worlds, corpora,
// checkpoints), tracker/ensemble/distillation training loops, calibration
// evaluation, policy training, timing logs and the command-line front end.

namespace udst {

// ---------------------------------------------------------------------------
// Seeds and fingerprints

/// Named deterministic random stream derived from one master seed.
std::uint64_t stream_seed(std::uint64_t master, const std::string& name);

/// Hex fingerprint of (world config, seed, vocabulary, database).
std::string world_fingerprint(const World& world);

// ---------------------------------------------------------------------------
// Experiment configuration

struct ExperimentConfig {
  int schema_version = 1;
  WorldConfig world;
  std::uint64_t world_seed = 1;

  // Corpus.
  std::size_t train_dialogues = 2000;
  std::size_t test_dialogues = 500;
  double noise_prob = 0.2;
  double goal_change_prob = 0.1;
  int max_turns = 20;

  // Tracker and training.
  TrackerConfig tracker;
  int tracker_epochs = 2;
  double tracker_lr = 1e-3;
  double label_epsilon = 0.05;

  // Ensemble.
  int ensemble_members = 10;
  double bagging_fraction = 0.7;

  // Distillation.
  int distill_epochs = 2;
  double distill_lr = 1e-3;
  double distill_temperature = 2.5;
  double anneal_fraction = 0.1;
  double distill_smoothing = 1e-4;
  std::size_t distill_dialogues = 0;  // 0 = all training dialogues

  // Policy.
  PolicyConfig policy;
  int pretrain_epochs = 10;
  double pretrain_lr = 1e-3;
  int ppo_iterations = 0;
  int ppo_episodes_per_iteration = 16;
  bool oracle_pretrain = false;

  std::string mode = "confidence";        // belief-state mode
  std::string tracker_kind = "single";    // single | ensemble | end | end2
  std::uint64_t seed = 0;                 // master seed
  std::string out_dir = "out";
};

ExperimentConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const ExperimentConfig& config);
ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& config, const std::string& path);

// ---------------------------------------------------------------------------
// Persistence

/// Atomic write (temp file + rename).
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

/// World files record (config, seed, fingerprint); the world itself is
/// rebuilt deterministically and verified against the fingerprint.
void save_world(const World& world, const std::string& path);
World load_world(const std::string& path);

void save_corpus(const DialogueCorpus& corpus, const std::string& path);
DialogueCorpus load_corpus(const std::string& path, const World& world);

/// Checkpoints: <prefix>.json manifest (tensor names/shapes/counts, checksum,
/// metadata) plus <prefix>.bin flat little-endian f64 payload. Round trips
/// are bit-exact. Throws on checksum or metadata mismatch at load.
void save_checkpoint(const std::string& prefix, const ParamStore& params,
                     const std::map<std::string, std::string>& metadata);
ParamStore load_checkpoint(const std::string& prefix,
                           std::map<std::string, std::string>* metadata,
                           const std::map<std::string, std::string>& expect);

/// Copies every tensor of `src` into the same-named tensor of `dst`.
/// Throws if a name is missing or a shape differs.
void assign_params(ParamStore& dst, const ParamStore& src);

/// Tracker checkpoints carry the tracker config and world fingerprint in
/// their metadata; load reconstructs the tracker and verifies both.
void save_tracker(const Tracker& tracker, const std::string& prefix,
                  const std::map<std::string, std::string>& extra_metadata);
Tracker load_tracker(const World& world, const std::string& prefix,
                     std::map<std::string, std::string>* metadata = nullptr);

// ---------------------------------------------------------------------------
// Timing

struct TimingLog {
  struct Row {
    std::string stage;
    double mean_ms_per_turn = 0.0;
    std::size_t turns = 0;
  };
  std::vector<Row> rows;
  void record(const std::string& stage, double total_ms, std::size_t turns);
  std::string to_csv() const;
  static TimingLog from_csv(const std::string& text);
};

// ---------------------------------------------------------------------------
// Training loops

struct TrainOptions {
  int epochs = 1;
  double learning_rate = 1e-3;
  double label_epsilon = 0.05;
};

/// Supervised training (label smoothing) over the given dialogues; one Adam
/// step per dialogue (gradient accumulated across its turns). Returns the
/// final epoch's mean per-turn loss.
double train_tracker(Tracker& tracker, const DialogueCorpus& corpus,
                     const std::vector<std::uint32_t>& dialogue_ids,
                     const TrainOptions& options, std::uint64_t shuffle_seed);

/// All turn outputs of one tracker over one recorded dialogue.
std::vector<TrackerOutput> run_tracker_on_dialogue(
    const Tracker& tracker, const DialogueRecord& dialogue);

/// Elementwise-mean combination of member outputs (goal distributions become
/// the ensemble predictive posterior; no Dirichlet parameters).
TrackerOutput combine_ensemble_outputs(
    const std::vector<TrackerOutput>& members);

/// Bagged ensemble training: M trackers with distinct init seeds on
/// make_bagged_subsets subsets.
std::vector<std::unique_ptr<Tracker>> train_tracker_ensemble(
    const World& world, const TrackerConfig& config,
    const DialogueCorpus& corpus, int members, double fraction,
    const TrainOptions& options, std::uint64_t seed);

/// Per-dialogue, per-turn, per-slot distillation targets from ensemble
/// member outputs (indexed like `dialogue_ids`).
struct DistillTargets {
  std::vector<std::uint32_t> dialogue_ids;
  std::vector<std::vector<std::vector<Categorical>>> posteriors;
  std::vector<std::vector<std::vector<ProxyDirichletTarget>>> proxies;
};
DistillTargets compute_distill_targets(const std::vector<Tracker*>& members,
                                       const DialogueCorpus& corpus,
                                       const std::vector<std::uint32_t>& ids,
                                       bool with_proxies, double smoothing);

/// Distillation training (EnD or EnD^2) against precomputed targets, with
/// temperature annealed from `base_temperature` to 1 over the first
/// `anneal_fraction` of training. Returns the final epoch's mean loss.
double distill_tracker(Tracker& student, const DialogueCorpus& corpus,
                       const DistillTargets& targets, GoalLossMode mode,
                       const TrainOptions& options, double base_temperature,
                       double anneal_fraction, std::uint64_t shuffle_seed);

// ---------------------------------------------------------------------------
// Calibration evaluation

/// Turn evaluations (goal distributions vs gold) over a test corpus; one
/// entry per turn, slots in flat order.
std::vector<TurnEvaluation> calibration_evals(
    const std::vector<std::vector<TrackerOutput>>& outputs_per_dialogue,
    const DialogueCorpus& test);

struct CalibrationMetrics {
  double jga = 0.0;  // percent
  double l2 = 0.0;
  double ece = 0.0;  // percent
};
CalibrationMetrics calibration_metrics(const std::vector<TurnEvaluation>& evals);

// ---------------------------------------------------------------------------
// CLI

/// Subcommands: gen-world, gen-corpus, train-ensemble, distill,
/// eval-calibration, train-policy, eval-policy, report. Returns the process
/// exit code; errors are reported as single-line JSON on stderr.
int cmd(const std::vector<std::string>& argv);

}  // namespace udst

#endif  // UDST_PIPELINE_HPP
