// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance gate: nine numbered criteria, each printing one pass/fail line.
// Run as `acceptance --criterion N`. Expensive artifacts (trained ensembles,
// distilled students, policies) are cached under acceptance_cache/ in the
// working directory and shared between criteria 4-7.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "udst/calib.hpp"
#include "udst/dialoguesim.hpp"
#include "udst/diffnet.hpp"
#include "udst/distill.hpp"
#include "udst/ensemble.hpp"
#include "udst/pipeline.hpp"
#include "udst/policy.hpp"
#include "udst/tracker.hpp"
#include "udst/uncmath.hpp"

using namespace udst;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Experiment profile shared by criteria 4-7 (chosen to fit a single core).

constexpr std::uint64_t kMasterSeeds[5] = {11, 12, 13, 14, 15};
constexpr std::uint64_t kWorldSeed = 1;
constexpr int kEnsembleMembers = 10;
constexpr double kBaggingFraction = 0.7;
constexpr std::size_t kTrainDialogues = 2000;
constexpr std::size_t kTestDialogues = 500;
constexpr double kNoiseProb = 0.2;
constexpr int kTrackerEpochs = 3;
constexpr int kDistillEpochs = 3;
constexpr double kLogitScale = 8.0;
constexpr int kPretrainEpochs = 6;
constexpr int kPpoIterations = 5;
constexpr int kPpoEpisodes = 16;

struct Check {
  bool pass = true;
  std::string detail;
  void fail(const std::string& why) {
    pass = false;
    if (!detail.empty()) detail += "; ";
    detail += why;
  }
};

ExperimentConfig profile(std::uint64_t master_seed) {
  ExperimentConfig c;
  c.world_seed = kWorldSeed;
  c.train_dialogues = kTrainDialogues;
  c.test_dialogues = kTestDialogues;
  c.noise_prob = kNoiseProb;
  c.tracker.logit_scale = kLogitScale;
  c.tracker_epochs = kTrackerEpochs;
  c.distill_epochs = kDistillEpochs;
  c.ensemble_members = kEnsembleMembers;
  c.bagging_fraction = kBaggingFraction;
  c.pretrain_epochs = kPretrainEpochs;
  c.ppo_iterations = kPpoIterations;
  c.ppo_episodes_per_iteration = kPpoEpisodes;
  c.seed = master_seed;
  c.out_dir = "acceptance_cache/seed" + std::to_string(master_seed);
  return c;
}

/// Per-seed artifacts; trained pieces are cached as checkpoints on disk.
struct SeedArtifacts {
  ExperimentConfig cfg;
  World world;
  DialogueCorpus train;
  DialogueCorpus test;
  std::vector<Tracker> members_;

  explicit SeedArtifacts(std::uint64_t master_seed)
      : cfg(profile(master_seed)),
        world(build_world(cfg.world, cfg.world_seed)) {
    EngineConfig engine;
    engine.noise_prob = cfg.noise_prob;
    engine.max_turns = cfg.max_turns;
    engine.user.goal_change_prob = cfg.goal_change_prob;
    train = generate_corpus(world, cfg.train_dialogues, engine,
                            stream_seed(cfg.seed, "corpus.train"));
    test = generate_corpus(world, cfg.test_dialogues, engine,
                           stream_seed(cfg.seed, "corpus.test"));
    fs::create_directories(cfg.out_dir);
  }

  EngineConfig engine() const {
    EngineConfig e;
    e.noise_prob = cfg.noise_prob;
    e.max_turns = cfg.max_turns;
    e.user.goal_change_prob = cfg.goal_change_prob;
    return e;
  }

  std::string member_prefix(int m) const {
    return cfg.out_dir + "/ensemble_member_" + std::to_string(m);
  }
  std::string distilled_prefix(const std::string& kind) const {
    return cfg.out_dir + "/distilled_" + kind;
  }
  std::string policy_prefix(const std::string& name) const {
    return cfg.out_dir + "/policy_" + name;
  }

  const std::vector<Tracker>& members() {
    if (!members_.empty()) return members_;
    if (fs::exists(member_prefix(kEnsembleMembers - 1) + ".json")) {
      for (int m = 0; m < kEnsembleMembers; ++m)
        members_.push_back(load_tracker(world, member_prefix(m)));
      return members_;
    }
    TrackerConfig member_config = cfg.tracker;
    member_config.dirichlet_head = false;
    TrainOptions options{cfg.tracker_epochs, cfg.tracker_lr, cfg.label_epsilon};
    auto trained =
        train_tracker_ensemble(world, member_config, train, kEnsembleMembers,
                               cfg.bagging_fraction, options, cfg.seed);
    for (int m = 0; m < kEnsembleMembers; ++m) {
      save_tracker(*trained[static_cast<std::size_t>(m)], member_prefix(m),
                   {{"kind", "member"}});
      members_.push_back(load_tracker(world, member_prefix(m)));
    }
    return members_;
  }

  Tracker distilled(const std::string& kind) {
    const std::string prefix = distilled_prefix(kind);
    if (fs::exists(prefix + ".json")) return load_tracker(world, prefix);
    const auto& ms = members();
    std::vector<Tracker*> ptrs;
    for (const Tracker& m : ms) ptrs.push_back(const_cast<Tracker*>(&m));
    std::vector<std::uint32_t> ids(train.dialogues.size());
    for (std::size_t i = 0; i < ids.size(); ++i)
      ids[i] = static_cast<std::uint32_t>(i);
    const bool end2 = kind == "end2";
    const DistillTargets targets = compute_distill_targets(
        ptrs, train, ids, end2, cfg.distill_smoothing);
    TrackerConfig student_config = cfg.tracker;
    student_config.dirichlet_head = end2;
    Tracker student(world, student_config,
                    stream_seed(cfg.seed, "distill.init." + kind));
    TrainOptions options{cfg.distill_epochs, cfg.distill_lr, cfg.label_epsilon};
    distill_tracker(student, train, targets,
                    end2 ? GoalLossMode::kEnD2 : GoalLossMode::kEnD, options,
                    cfg.distill_temperature, cfg.anneal_fraction,
                    stream_seed(cfg.seed, "distill.shuffle." + kind));
    save_tracker(student, prefix, {{"kind", kind}});
    return load_tracker(world, prefix);
  }

  /// Pretrained (+ PPO fine-tuned) policy for one mode/tracker combination.
  PolicyNet policy(const Tracker& tracker, BeliefMode mode,
                   const std::string& cache_name, bool oracle_pretrain,
                   int ppo_iterations) {
    const std::string prefix = policy_prefix(cache_name);
    const std::size_t features = belief_feature_size(world, mode);
    const std::size_t actions = static_cast<std::size_t>(
        ActionSpace{world.config.num_domains, world.config.slots_per_domain}
            .size());
    PolicyNet net(features, actions, cfg.policy,
                  stream_seed(cfg.seed, "policy.init." + cache_name));
    if (fs::exists(prefix + ".json")) {
      const ParamStore loaded = load_checkpoint(prefix, nullptr, {});
      assign_params(net.params(), loaded);
      return net;
    }
    const PretrainData data =
        pretrain_data_from_corpus(train, tracker, mode, oracle_pretrain);
    pretrain_supervised(net, data.states, data.actions, cfg.pretrain_epochs,
                        cfg.pretrain_lr);
    if (ppo_iterations > 0) {
      const EngineConfig eng = engine();
      std::mt19937_64 rng(stream_seed(cfg.seed, "rollout." + cache_name));
      for (int it = 0; it < ppo_iterations; ++it) {
        std::vector<Trajectory> batch;
        for (int e = 0; e < cfg.ppo_episodes_per_iteration; ++e)
          batch.push_back(
              run_episode(world, tracker, net, mode, eng, rng, false)
                  .trajectory);
        ppo_update(net, batch);
      }
    }
    save_checkpoint(prefix, net.params(), {{"kind", "policy"}});
    return net;
  }
};

// ---------------------------------------------------------------------------
// Statistics helpers

struct RunningStats {
  std::size_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;
  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  double variance() const {
    return n < 2 ? 0.0 : m2 / static_cast<double>(n - 1);
  }
  double se() const { return std::sqrt(variance() / static_cast<double>(n)); }
};

/// One-sided Welch z statistic for mean(a) > mean(b); compare to 1.645.
double welch_z(const RunningStats& a, const RunningStats& b) {
  const double denom = std::sqrt(a.variance() / static_cast<double>(a.n) +
                                 b.variance() / static_cast<double>(b.n));
  return denom == 0.0 ? 0.0 : (a.mean - b.mean) / denom;
}

/// One-sided two-proportion pooled z for p1 > p2; compare to 1.645.
double two_proportion_z(std::size_t success1, std::size_t n1,
                        std::size_t success2, std::size_t n2) {
  const double p1 = static_cast<double>(success1) / static_cast<double>(n1);
  const double p2 = static_cast<double>(success2) / static_cast<double>(n2);
  const double pooled = static_cast<double>(success1 + success2) /
                        static_cast<double>(n1 + n2);
  const double denom =
      std::sqrt(pooled * (1.0 - pooled) *
                (1.0 / static_cast<double>(n1) + 1.0 / static_cast<double>(n2)));
  return denom == 0.0 ? 0.0 : (p1 - p2) / denom;
}

constexpr double kZ05 = 1.6448536269514722;  // one-sided 5% normal quantile

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Dirichlet sampling for Monte-Carlo oracles

DirichletParams random_alpha(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> kdist(2, 6);
  std::uniform_real_distribution<double> log_alpha(-1.2, 1.5);
  std::vector<double> a(kdist(rng));
  for (double& v : a) v = std::exp(log_alpha(rng));
  return DirichletParams(std::move(a));
}

Categorical sample_dirichlet(const DirichletParams& d, std::mt19937_64& rng) {
  std::vector<double> g(d.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < d.size(); ++k) {
    std::gamma_distribution<double> gamma(d.alphas[k], 1.0);
    g[k] = gamma(rng);
    sum += g[k];
  }
  if (sum <= 0.0) sum = 1e-300;
  for (double& v : g) v /= sum;
  return Categorical(std::move(g));
}

double dirichlet_log_pdf(const DirichletParams& d, const Categorical& p) {
  double lp = log_gamma(d.alpha0);
  for (std::size_t k = 0; k < d.size(); ++k) {
    lp -= log_gamma(d.alphas[k]);
    // No probability floor: tail samples with alpha < 1 carry real mass and
    // flooring them would bias the Monte-Carlo estimate.
    lp += (d.alphas[k] - 1.0) * std::log(std::max(p[k], 1e-300));
  }
  return lp;
}

EnsemblePrediction random_ensemble(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> mdist(2, 10);
  const std::size_t members = mdist(rng);
  const DirichletParams prior = random_alpha(rng);
  EnsemblePrediction e;
  for (std::size_t m = 0; m < members; ++m)
    e.members.push_back(sample_dirichlet(prior, rng));
  return e;
}

// ---------------------------------------------------------------------------
// Criterion 1: Monte-Carlo oracles for the Dirichlet uncertainty math.

Check criterion1() {
  Check check;
  std::mt19937_64 rng(2002);
  const std::size_t samples = 100000;
  for (int trial = 0; trial < 100; ++trial) {
    const DirichletParams a = random_alpha(rng);
    DirichletParams b = random_alpha(rng);
    while (b.size() != a.size()) b = random_alpha(rng);
    const std::size_t K = a.size();

    RunningStats ent;      // per-sample entropy
    RunningStats kl;       // per-sample log density ratio
    std::vector<double> mean_p(K, 0.0);
    std::vector<double> cov(K * K, 0.0);  // accumulated outer products
    std::vector<Categorical> kept;
    kept.reserve(samples);
    for (std::size_t s = 0; s < samples; ++s) {
      const Categorical p = sample_dirichlet(a, rng);
      ent.add(entropy(p));
      kl.add(dirichlet_log_pdf(a, p) - dirichlet_log_pdf(b, p));
      for (std::size_t k = 0; k < K; ++k) mean_p[k] += p[k];
      kept.push_back(p);
    }
    for (double& v : mean_p) v /= static_cast<double>(samples);
    for (const Categorical& p : kept)
      for (std::size_t i = 0; i < K; ++i)
        for (std::size_t j = 0; j < K; ++j)
          cov[i * K + j] += (p[i] - mean_p[i]) * (p[j] - mean_p[j]);
    for (double& v : cov) v /= static_cast<double>(samples - 1);

    // dirichlet_expected_entropy vs the sample mean entropy.
    const double analytic_ent = dirichlet_expected_entropy(a);
    if (std::abs(analytic_ent - ent.mean) > 3.0 * ent.se() + 1e-9)
      check.fail("expected entropy off at trial " + std::to_string(trial) +
                 " (analytic " + fmt(analytic_ent) + ", mc " + fmt(ent.mean) +
                 " +- " + fmt(ent.se()) + ")");

    // kl_dirichlet vs the sample mean log ratio.
    const double analytic_kl = kl_dirichlet(a, b);
    if (std::abs(analytic_kl - kl.mean) > 3.0 * kl.se() + 1e-9)
      check.fail("kl off at trial " + std::to_string(trial) + " (analytic " +
                 fmt(analytic_kl) + ", mc " + fmt(kl.mean) + " +- " +
                 fmt(kl.se()) + ")");

    // dirichlet_decompose: total vs entropy of the sample mean (delta-method
    // standard error), data = expected entropy, knowledge = difference.
    const UncertaintyDecomposition dec = dirichlet_decompose(a);
    const Categorical hat{std::vector<double>(mean_p)};
    double var_total = 0.0;
    std::vector<double> grad(K);
    for (std::size_t k = 0; k < K; ++k)
      grad[k] = -(std::log(std::max(mean_p[k], kProbFloor)) + 1.0);
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j)
        var_total += grad[i] * cov[i * K + j] * grad[j];
    const double se_total =
        std::sqrt(std::max(var_total, 0.0) / static_cast<double>(samples));
    // Second-order (1/N) bias of H(sample mean): d2H/dp2 = -1/p.
    double bias = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      bias += 0.5 * cov[k * K + k] /
              (static_cast<double>(samples) * std::max(mean_p[k], kProbFloor));
    const double total_mc = entropy(hat) + bias;
    if (std::abs(dec.total - total_mc) > 3.0 * se_total + 1e-9)
      check.fail("decompose total off at trial " + std::to_string(trial) +
                 " (analytic " + fmt(dec.total) + ", mc " + fmt(total_mc) +
                 " +- " + fmt(se_total) + ")");
    if (std::abs(dec.data - ent.mean) > 3.0 * ent.se() + 1e-9)
      check.fail("decompose data off at trial " + std::to_string(trial));
    const double knowledge_mc = total_mc - ent.mean;
    if (std::abs(dec.knowledge - knowledge_mc) >
        3.0 * (se_total + ent.se()) + 1e-9)
      check.fail("decompose knowledge off at trial " + std::to_string(trial));
  }

  // ensemble_decompose: exact additivity and non-negative knowledge.
  for (int trial = 0; trial < 10000; ++trial) {
    const EnsemblePrediction e = random_ensemble(rng);
    const UncertaintyDecomposition d = ensemble_decompose(e);
    if (std::abs(d.total - (d.data + d.knowledge)) > 1e-12)
      check.fail("additivity violated at ensemble trial " +
                 std::to_string(trial));
    if (d.knowledge < -1e-12)
      check.fail("negative knowledge at ensemble trial " +
                 std::to_string(trial));
  }
  return check;
}

// ---------------------------------------------------------------------------
// Criterion 2: Proxy Dirichlet correctness.

Check criterion2() {
  Check check;
  std::mt19937_64 rng(2002);
  for (int trial = 0; trial < 10000; ++trial) {
    const EnsemblePrediction e = random_ensemble(rng);
    const ProxyDirichletTarget proxy = proxy_dirichlet_target(e, 1e-4);
    if (!(proxy.beta_tilde0 > 0.0) || !std::isfinite(proxy.beta_tilde0))
      check.fail("beta_tilde0 not positive/finite at trial " +
                 std::to_string(trial));
    for (double b : proxy.beta.alphas)
      if (b < 1.0) check.fail("beta_k < 1 at trial " + std::to_string(trial));
    std::size_t beta_argmax = 0;
    for (std::size_t k = 1; k < proxy.beta.size(); ++k)
      if (proxy.beta.alphas[k] > proxy.beta.alphas[beta_argmax]) beta_argmax = k;
    if (beta_argmax != proxy.pi_hat.argmax())
      check.fail("argmax(beta) != argmax(pi_hat) at trial " +
                 std::to_string(trial));
  }

  EnsemblePrediction hand;
  hand.members = {Categorical({0.8, 0.2}), Categorical({0.6, 0.4})};
  const ProxyDirichletTarget proxy = proxy_dirichlet_target(hand, 1e-4);
  const double expected[2] = {15.06, 7.03};
  for (int k = 0; k < 2; ++k) {
    const double rel =
        std::abs(proxy.beta.alphas[static_cast<std::size_t>(k)] - expected[k]) /
        expected[k];
    if (rel > 5e-3)
      check.fail("hand example beta_" + std::to_string(k) + " = " +
                 fmt(proxy.beta.alphas[static_cast<std::size_t>(k)]) +
                 " not within 3 significant figures of " + fmt(expected[k]));
  }
  return check;
}

// ---------------------------------------------------------------------------
// Criterion 3: gradient suite.

ParamStore layer_zoo_params() {
  ParamStore ps;
  ps.add("w", init_uniform({3, 4}, 4, 100));
  ps.add("w2", init_uniform({3, 4}, 4, 101));
  ps.add("b", init_uniform({3}, 3, 102));
  add_gru_params(ps, "gru", 4, 3, 103);
  add_attention_params(ps, "attn", 4, 120);
  ps.add("conv_w", init_uniform({3, 2, 4}, 12, 130));
  ps.add("conv_b", init_uniform({2}, 2, 131));
  ps.add("table", init_uniform({5, 4}, 4, 140));
  return ps;
}

Tape::Var layer_zoo_graph(Tape& t, const ParamStore& ps, int kind) {
  Tensor x = Tensor::mat(3, 4);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    x.data[i] = 0.1 * static_cast<double>(i % 7) - 0.25;
  Tape::Var input = t.input(std::move(x));
  switch (kind) {
    case 0:  // affine + softmax + cross entropy
      return t.cross_entropy_const(
          {0.2, 0.5, 0.3}, t.softmax_vec(t.affine(t.param(ps, "w"),
                                                  t.row(input, 0),
                                                  t.param(ps, "b"))));
    case 1: {  // GRU over 3 steps
      GruParams p = gru_params(t, ps, "gru");
      Tape::Var h = t.input(Tensor::vec(3));
      for (std::size_t step = 0; step < 3; ++step)
        h = gru_cell(t, p, t.row(input, step), h);
      return t.dot(h, h);
    }
    case 2: {  // multi-head attention
      Tape::Var y = attention(t, ps, "attn", input, input, 2);
      return t.sum(t.mul(y, y));
    }
    case 3: {  // conv1d(3) + tanh + mean pool
      Tape::Var y =
          t.conv1d3(input, t.param(ps, "conv_w"), t.param(ps, "conv_b"));
      Tape::Var pooled = t.mean_rows(t.tanh_(y));
      return t.dot(pooled, pooled);
    }
    case 4: {  // embedding + sigmoid head
      Tape::Var e = t.embed(t.param(ps, "table"), {1, 3, 1, 0});
      return t.sum(t.sigmoid(t.mean_rows(e)));
    }
    case 5: {  // cosine similarity head
      Tape::Var va = t.matvec(t.param(ps, "w"), t.row(input, 0));
      Tape::Var vb = t.matvec(t.param(ps, "w2"), t.row(input, 1));
      Tape::Var c = t.cosine(va, vb);
      return t.mul(c, c);
    }
    default:
      throw std::logic_error("unknown layer kind");
  }
}

bool finite_diff_graph(
    const std::function<Tape::Var(Tape&, const ParamStore&)>& build,
    ParamStore& ps, std::string* why) {
  Tape t;
  Grads grads = t.backward(build(t, ps));
  auto loss_fn = [&](const ParamStore& p) {
    Tape tape;
    return tape.value(build(tape, p)).data[0];
  };
  const FiniteDiffReport report = finite_diff_check(loss_fn, ps, grads, 1e-4);
  if (!report.pass && why) {
    for (const auto& e : report.entries)
      if (e.max_rel_error > 1e-4)
        *why += " " + e.name + " rel " + fmt(e.max_rel_error);
  }
  return report.pass;
}

Check criterion3() {
  Check check;
  std::string why;

  // Every layer kind.
  for (int kind = 0; kind <= 5; ++kind) {
    ParamStore ps = layer_zoo_params();
    why.clear();
    if (!finite_diff_graph(
            [kind](Tape& t, const ParamStore& p) {
              return layer_zoo_graph(t, p, kind);
            },
            ps, &why))
      check.fail("layer kind " + std::to_string(kind) + " failed:" + why);
  }

  // Label smoothing loss through a softmax head.
  {
    ParamStore ps;
    ps.add("logits", init_uniform({4}, 1, 200));
    const SmoothedTarget target = smooth_labels(2, 4, 0.05);
    auto build = [&](Tape& t, const ParamStore& p) {
      return t.cross_entropy_const(target.probs.probs,
                                   t.softmax_vec(t.param(p, "logits")));
    };
    why.clear();
    if (!finite_diff_graph(build, ps, &why))
      check.fail("label smoothing loss failed:" + why);
  }

  // EnD loss on logits.
  {
    ParamStore ps;
    ps.add("logits", init_uniform({4}, 1, 201));
    const Categorical posterior({0.4, 0.3, 0.2, 0.1});
    auto build = [&](Tape& t, const ParamStore& p) {
      return end_loss_on_logits(t, t.param(p, "logits"), posterior, 2.0);
    };
    why.clear();
    if (!finite_diff_graph(build, ps, &why))
      check.fail("EnD loss failed:" + why);
  }

  // EnD2 loss against a real proxy target.
  {
    ParamStore ps;
    ps.add("logits", init_uniform({3}, 1, 202));
    EnsemblePrediction e;
    e.members = {Categorical({0.7, 0.2, 0.1}), Categorical({0.5, 0.3, 0.2}),
                 Categorical({0.6, 0.25, 0.15})};
    const ProxyDirichletTarget proxy = proxy_dirichlet_target(e, 1e-4);
    auto build = [&](Tape& t, const ParamStore& p) {
      return end2_loss(t, t.param(p, "logits"), proxy);
    };
    why.clear();
    if (!finite_diff_graph(build, ps, &why))
      check.fail("EnD2 loss failed:" + why);
  }

  // PPO surrogate (policy + value + entropy terms), unclipped branch active.
  {
    PolicyConfig pcfg;
    PolicyNet policy(3, 2, pcfg, 19);
    std::vector<std::vector<double>> features = {
        {0.1, -0.2, 0.3}, {0.0, 0.4, -0.1}, {-0.3, 0.2, 0.1}};
    std::vector<int> actions = {0, 1, 0};
    std::vector<double> old_log_probs(3), advantages = {0.7, -0.4, 0.2},
                        returns = {1.0, -0.5, 0.25};
    for (std::size_t i = 0; i < 3; ++i)
      old_log_probs[i] = std::log(
          policy.action_probs(features[i])[static_cast<std::size_t>(actions[i])]);
    auto build = [&](Tape& t, const ParamStore& ps) {
      Tape::Var loss = t.constant(0.0);
      const double inv_n = 1.0 / 3.0;
      for (std::size_t i = 0; i < 3; ++i) {
        Tensor x = Tensor::vec(3);
        x.data = features[i];
        Tape::Var xin = t.input(std::move(x));
        Tape::Var probs = t.softmax_vec(policy.logits(t, ps, xin));
        std::vector<double> onehot(2, 0.0);
        onehot[static_cast<std::size_t>(actions[i])] = 1.0;
        Tape::Var log_prob = t.neg(t.cross_entropy_const(onehot, probs));
        Tape::Var ratio =
            t.exp_clamped(t.add_const(log_prob, -old_log_probs[i]));
        loss = t.add(loss, t.scale(ratio, -advantages[i] * inv_n));
        Tape::Var v = policy.value(t, ps, xin);
        Tape::Var diff = t.add_const(v, -returns[i]);
        loss = t.add(loss, t.scale(t.mul(diff, diff), pcfg.value_coef * inv_n));
        loss = t.add(loss, t.scale(t.dot(probs, t.log_(probs)),
                                   pcfg.entropy_bonus * inv_n));
      }
      return loss;
    };
    why.clear();
    if (!finite_diff_graph(build, policy.params(), &why))
      check.fail("PPO surrogate failed:" + why);
  }

  // End-to-end 2-slot tracker through the multitask loss.
  {
    const World w = build_world(WorldConfig{1, 2, 2, 1, 4}, 3);
    TrackerConfig tcfg;
    tcfg.embed_dim = 4;
    tcfg.hidden = 4;
    tcfg.heads = 2;
    Tracker tracker(w, tcfg, 31);
    TurnInput turn;
    turn.system_tokens = w.token_ids({"sys_hello"});
    turn.user_tokens = w.token_ids({"inform", "d0_s0", "d0_s0_v1"});
    TurnLabels labels;
    labels.goal = {2, 0};
    labels.requested = {false, false};
    labels.active = {true};
    labels.general = 0;
    const GoalSupervision sup;
    const LossWeights weights;
    auto build = [&](Tape& t, const ParamStore& ps) {
      Tracker probe(w, tcfg, 31);
      for (const std::string& name : ps.names())
        probe.params().at(name) = ps.at(name);
      Tracker::DialogueGraph g = probe.begin_dialogue(t);
      TurnForward fwd = probe.forward_turn(g, turn);
      return multitask_loss(t, fwd, labels, sup, weights, 0.05);
    };
    why.clear();
    if (!finite_diff_graph(build, tracker.params(), &why))
      check.fail("2-slot tracker failed:" + why);
  }
  return check;
}

// ---------------------------------------------------------------------------
// Criterion 4: calibration ordering across 5 master seeds.

std::vector<TurnEvaluation> evals_for(
    const Tracker& tracker, const DialogueCorpus& test) {
  std::vector<std::vector<TrackerOutput>> outputs;
  for (const auto& d : test.dialogues)
    outputs.push_back(run_tracker_on_dialogue(tracker, d));
  return calibration_evals(outputs, test);
}

Check criterion4() {
  Check check;
  int ens_better = 0, end_better = 0, end2_better = 0;
  int end_close = 0, end2_close = 0;
  for (std::uint64_t seed : kMasterSeeds) {
    SeedArtifacts art(seed);
    const auto& members = art.members();

    std::vector<std::vector<std::vector<TrackerOutput>>> per_member(
        members.size());
    for (std::size_t m = 0; m < members.size(); ++m)
      for (const auto& d : art.test.dialogues)
        per_member[m].push_back(run_tracker_on_dialogue(members[m], d));

    double mean_single_ece = 0.0;
    for (std::size_t m = 0; m < members.size(); ++m)
      mean_single_ece +=
          calibration_metrics(calibration_evals(per_member[m], art.test)).ece /
          static_cast<double>(members.size());

    std::vector<std::vector<TrackerOutput>> combined(art.test.dialogues.size());
    for (std::size_t d = 0; d < art.test.dialogues.size(); ++d) {
      const std::size_t turns = art.test.dialogues[d].turns.size();
      combined[d].resize(turns);
      for (std::size_t t = 0; t < turns; ++t) {
        std::vector<TrackerOutput> at_turn;
        for (std::size_t m = 0; m < members.size(); ++m)
          at_turn.push_back(per_member[m][d][t]);
        combined[d][t] = combine_ensemble_outputs(at_turn);
      }
    }
    const CalibrationMetrics ens =
        calibration_metrics(calibration_evals(combined, art.test));
    const CalibrationMetrics end_m =
        calibration_metrics(evals_for(art.distilled("end"), art.test));
    const CalibrationMetrics end2_m =
        calibration_metrics(evals_for(art.distilled("end2"), art.test));

    if (ens.ece < mean_single_ece) ++ens_better;
    if (end_m.ece < mean_single_ece) ++end_better;
    if (end2_m.ece < mean_single_ece) ++end2_better;
    if (std::abs(end_m.jga - ens.jga) <= 3.0) ++end_close;
    if (std::abs(end2_m.jga - ens.jga) <= 3.0) ++end2_close;
    std::fprintf(stderr,
                 "  seed %llu: mean single ECE %.3f, ensemble ECE %.3f (JGA "
                 "%.2f), EnD ECE %.3f (JGA %.2f), EnD2 ECE %.3f (JGA %.2f)\n",
                 static_cast<unsigned long long>(seed), mean_single_ece,
                 ens.ece, ens.jga, end_m.ece, end_m.jga, end2_m.ece,
                 end2_m.jga);
  }
  if (ens_better < 4)
    check.fail("ensemble ECE < mean single ECE in only " +
               std::to_string(ens_better) + "/5 seeds");
  if (end_better < 4)
    check.fail("EnD ECE < mean single ECE in only " +
               std::to_string(end_better) + "/5 seeds");
  if (end2_better < 4)
    check.fail("EnD2 ECE < mean single ECE in only " +
               std::to_string(end2_better) + "/5 seeds");
  if (end_close < 4)
    check.fail("EnD JGA within 3 points of ensemble in only " +
               std::to_string(end_close) + "/5 seeds");
  if (end2_close < 4)
    check.fail("EnD2 JGA within 3 points of ensemble in only " +
               std::to_string(end2_close) + "/5 seeds");
  return check;
}

// ---------------------------------------------------------------------------
// Criterion 5: knowledge uncertainty on variant-noised vs canonical turns.

bool has_variant_token(const std::vector<std::string>& tokens) {
  for (const std::string& tok : tokens)
    if (tok.rfind("var_", 0) == 0) return true;
  return false;
}

Check criterion5() {
  Check check;
  SeedArtifacts art(kMasterSeeds[0]);
  const Tracker end2 = art.distilled("end2");
  RunningStats noised, canonical;
  for (const auto& d : art.test.dialogues) {
    const auto outputs = run_tracker_on_dialogue(end2, d);
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
      double mean_knowledge = 0.0;
      for (const auto& g : outputs[t].goals) {
        if (!g.alphas.has_value()) {
          check.fail("EnD2 tracker produced no Dirichlet parameters");
          return check;
        }
        mean_knowledge += dirichlet_decompose(*g.alphas).knowledge /
                          static_cast<double>(outputs[t].goals.size());
      }
      (has_variant_token(d.turns[t].user_tokens) ? noised : canonical)
          .add(mean_knowledge);
    }
  }
  const std::size_t total = noised.n + canonical.n;
  std::fprintf(stderr,
               "  turns: %zu noised (mean %.5f), %zu canonical (mean %.5f)\n",
               noised.n, noised.mean, canonical.n, canonical.mean);
  if (total < 500)
    check.fail("only " + std::to_string(total) + " turns (< 500)");
  if (noised.n < 30 || canonical.n < 30)
    check.fail("a partition has fewer than 30 turns");
  const double z = welch_z(noised, canonical);
  if (!(z > kZ05))
    check.fail("one-sided z = " + fmt(z) + " <= " + fmt(kZ05) +
               " (noised mean " + fmt(noised.mean) + ", canonical mean " +
               fmt(canonical.mean) + ")");
  return check;
}

// ---------------------------------------------------------------------------
// Criteria 6 & 7: downstream policy orderings.

struct ModeResult {
  std::size_t successes = 0;
  std::size_t episodes = 0;
  double rate() const {
    return episodes == 0
               ? 0.0
               : 100.0 * static_cast<double>(successes) /
                     static_cast<double>(episodes);
  }
};

/// Evaluates one mode for one seed, training the policy if uncached.
EvaluationSummary eval_mode(SeedArtifacts& art, const std::string& mode_name,
                            bool oracle_pretrain, int ppo_iterations) {
  const BeliefMode mode = belief_mode_from_string(mode_name);
  const std::string tracker_kind =
      mode == BeliefMode::kKnowledgeUnc ? "end2" : "end";
  const Tracker tracker = art.distilled(tracker_kind);
  const std::string cache_name =
      mode_name + "_" + tracker_kind + (oracle_pretrain ? "_oracle" : "");
  PolicyNet policy =
      art.policy(tracker, mode, cache_name, oracle_pretrain, ppo_iterations);
  return evaluate_policy(art.world, tracker, policy, mode, art.engine(),
                         kTestDialogues,
                         stream_seed(art.cfg.seed, "acc.eval." + cache_name));
}

Check criterion6() {
  Check check;
  const std::vector<std::string> modes = {"binary", "confidence", "total_unc",
                                          "knowledge_unc"};
  std::map<std::string, ModeResult> pooled;
  for (std::uint64_t seed : kMasterSeeds) {
    SeedArtifacts art(seed);
    for (const std::string& mode : modes) {
      const EvaluationSummary s = eval_mode(art, mode, false, kPpoIterations);
      pooled[mode].successes += static_cast<std::size_t>(
          std::lround(s.success_rate / 100.0 * static_cast<double>(s.episodes)));
      pooled[mode].episodes += s.episodes;
      std::fprintf(stderr, "  seed %llu %s: success %.1f%%\n",
                   static_cast<unsigned long long>(seed), mode.c_str(),
                   s.success_rate);
    }
  }
  for (const std::string& mode : modes)
    std::fprintf(stderr, "  pooled %s: %zu/%zu = %.2f%%\n", mode.c_str(),
                 pooled[mode].successes, pooled[mode].episodes,
                 pooled[mode].rate());

  const ModeResult& conf = pooled["confidence"];
  const ModeResult& bin = pooled["binary"];
  if (!(conf.rate() > bin.rate()))
    check.fail("success(confidence) " + fmt(conf.rate()) +
               "% <= success(binary) " + fmt(bin.rate()) + "%");
  const double z = two_proportion_z(conf.successes, conf.episodes,
                                    bin.successes, bin.episodes);
  if (!(z > kZ05))
    check.fail("confidence vs binary z = " + fmt(z) + " <= " + fmt(kZ05));
  const double best_unc =
      std::max(pooled["total_unc"].rate(), pooled["knowledge_unc"].rate());
  if (!(best_unc >= conf.rate()))
    check.fail("success(confidence + uncertainty) " + fmt(best_unc) +
               "% < success(confidence) " + fmt(conf.rate()) + "%");
  return check;
}

Check criterion7() {
  Check check;
  int predicted_wins = 0;
  for (std::uint64_t seed : kMasterSeeds) {
    SeedArtifacts art(seed);
    // Pretraining-only comparison: predicted vs oracle belief states, both
    // evaluated with the predicted-state tracker.
    const EvaluationSummary predicted = eval_mode(art, "confidence", false, 0);
    const EvaluationSummary oracle = eval_mode(art, "confidence", true, 0);
    std::fprintf(stderr, "  seed %llu: predicted %.1f%%, oracle %.1f%%\n",
                 static_cast<unsigned long long>(seed), predicted.success_rate,
                 oracle.success_rate);
    if (predicted.success_rate >= oracle.success_rate) ++predicted_wins;
  }
  if (predicted_wins < 4)
    check.fail("predicted-state pretraining >= oracle-state in only " +
               std::to_string(predicted_wins) + "/5 seeds");
  return check;
}

// ---------------------------------------------------------------------------
// Criterion 8: metric oracles.

TurnEvaluation oracle_turn(double confidence, bool correct) {
  TurnEvaluation e;
  e.slot_predictions = {Categorical({confidence, 1.0 - confidence})};
  e.gold_values = {correct ? std::size_t{0} : std::size_t{1}};
  return e;
}

Check criterion8() {
  Check check;
  // ECE hand example with 2 bins:
  // (2/3)|0.85 - 0.5| + (1/3)|0.3 - 0| = 1/3 -> 33.33%.
  {
    std::vector<TurnEvaluation> evals = {oracle_turn(0.9, true),
                                         oracle_turn(0.8, false)};
    TurnEvaluation low;  // joint confidence 0.3 via two slots
    low.slot_predictions = {Categorical({0.5, 0.5}), Categorical({0.6, 0.4})};
    low.gold_values = {0, 1};
    evals.push_back(low);
    const double e = ece(evals, 2);
    if (std::abs(e - 100.0 / 3.0) > 1e-9)
      check.fail("ECE hand example: got " + fmt(e) + ", want 33.33");
    if (e != ece_from_table(reliability_table(evals, 2)))
      check.fail("reliability table does not recompose ECE bit-exactly");
  }
  // JGA fixture: 3 of 10 turns jointly correct -> 30.0%.
  {
    std::vector<TurnEvaluation> evals;
    for (int i = 0; i < 10; ++i) evals.push_back(oracle_turn(0.6, i < 3));
    if (joint_goal_accuracy(evals) != 30.0)
      check.fail("JGA fixture != 30.0");
  }
  // L2 fixtures: antipodal one-hots give sqrt(2) per slot.
  {
    TurnEvaluation anti;
    anti.slot_predictions = {Categorical({1.0, 0.0})};
    anti.gold_values = {1};
    if (std::abs(l2_error({anti}) - std::sqrt(2.0)) > 1e-12)
      check.fail("single-slot L2 fixture != sqrt(2)");
    TurnEvaluation two;
    two.slot_predictions = {Categorical({1.0, 0.0}), Categorical({0.0, 1.0})};
    two.gold_values = {1, 0};
    if (std::abs(l2_error({two}) - 2.0 * std::sqrt(2.0)) > 1e-12)
      check.fail("two-slot L2 sum fixture != 2*sqrt(2)");
    if (std::abs(l2_error({two}, L2Aggregation::kMeanOverSlots) -
                 std::sqrt(2.0)) > 1e-12)
      check.fail("two-slot L2 mean fixture != sqrt(2)");
  }
  // Reliability recomposition on a random batch.
  {
    std::mt19937_64 rng(2002);
    std::vector<TurnEvaluation> evals;
    for (int i = 0; i < 500; ++i)
      evals.push_back(
          oracle_turn(std::uniform_real_distribution<double>(0.5, 1.0)(rng),
                      rng() % 3 != 0));
    if (ece(evals, 10) != ece_from_table(reliability_table(evals, 10)))
      check.fail("random-batch reliability recomposition not bit-exact");
  }
  return check;
}

// ---------------------------------------------------------------------------
// Criterion 9: byte-identical metric CSVs on re-run.

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Check criterion9() {
  Check check;
  const std::string base = "acceptance_cache/determinism";
  fs::remove_all(base);
  auto run_all = [&](const std::string& out) {
    const std::string cfg_path = base + "/cfg_" + fs::path(out).filename().string() + ".json";
    ExperimentConfig cfg;
    cfg.world = WorldConfig{1, 2, 3, 2, 6};
    cfg.train_dialogues = 20;
    cfg.test_dialogues = 10;
    cfg.tracker.embed_dim = 4;
    cfg.tracker.hidden = 8;
    cfg.tracker_epochs = 1;
    cfg.ensemble_members = 2;
    cfg.distill_epochs = 1;
    cfg.pretrain_epochs = 1;
    cfg.ppo_iterations = 1;
    cfg.ppo_episodes_per_iteration = 2;
    cfg.seed = 77;
    cfg.out_dir = out;
    save_config(cfg, cfg_path);
    const std::vector<std::vector<std::string>> commands = {
        {"gen-world", "--config", cfg_path},
        {"gen-corpus", "--config", cfg_path},
        {"train-ensemble", "--config", cfg_path},
        {"distill", "--config", cfg_path, "--mode", "end"},
        {"eval-calibration", "--config", cfg_path, "--tracker", "end"},
        {"eval-calibration", "--config", cfg_path, "--tracker", "single"},
        {"train-policy", "--config", cfg_path, "--mode", "confidence",
         "--tracker", "end"},
        {"eval-policy", "--config", cfg_path, "--mode", "confidence",
         "--tracker", "end"},
        {"report", "--config", cfg_path}};
    for (const auto& argv : commands)
      if (cmd(argv) != 0) check.fail("subcommand " + argv[0] + " failed");
  };
  run_all(base + "/a");
  run_all(base + "/b");
  const std::vector<std::string> metric_files = {
      "metrics_calibration_end.csv", "metrics_calibration_single.csv",
      "reliability_end.csv",         "reliability_single.csv",
      "metrics_policy_confidence_end.csv"};
  for (const std::string& f : metric_files) {
    const std::string a = slurp(base + "/a/" + f);
    if (a.empty()) check.fail(f + " missing or empty");
    if (a != slurp(base + "/b/" + f))
      check.fail(f + " differs between identical runs");
  }
  // In-place re-run of the evaluation subcommands is also byte-stable.
  const std::string cfg_path = base + "/cfg_a.json";
  const std::string before = slurp(base + "/a/metrics_calibration_end.csv");
  if (cmd({"eval-calibration", "--config", cfg_path, "--tracker", "end"}) != 0)
    check.fail("in-place eval-calibration re-run failed");
  if (slurp(base + "/a/metrics_calibration_end.csv") != before)
    check.fail("in-place re-run changed metrics_calibration_end.csv");
  return check;
}

}  // namespace

int main(int argc, char** argv) {
  int criterion = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc)
      criterion = std::atoi(argv[i + 1]);
  }
  if (criterion < 1 || criterion > 9) {
    std::fprintf(stderr, "usage: acceptance --criterion N   (N in 1..9)\n");
    return 2;
  }
  const std::function<Check()> criteria[9] = {
      criterion1, criterion2, criterion3, criterion4, criterion5,
      criterion6, criterion7, criterion8, criterion9};
  const auto start = std::chrono::steady_clock::now();
  Check result;
  try {
    result = criteria[criterion - 1]();
  } catch (const std::exception& e) {
    result.fail(std::string("exception: ") + e.what());
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  if (result.pass) {
    std::printf("criterion %d: PASS (%.1fs)\n", criterion, seconds);
    return 0;
  }
  std::printf("criterion %d: FAIL (%.1fs) — %s\n", criterion, seconds,
              result.detail.c_str());
  return 1;
}
