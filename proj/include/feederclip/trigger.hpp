#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "feederclip/trainer.hpp"

namespace feederclip {

struct TriggerConfig {
  std::size_t features = kFeatureCount;
  std::size_t hidden = 16;
  std::size_t latent = 8;
  double epsilon = 0.05;  // bound on |delta| per entry, p.u.
  double lambda_div = 0.01;
  double lambda_mag = 1.0;
  double learning_rate = 1e-3;
  std::size_t steps_per_epoch = 1;

  void validate() const;
};

/// Per-node variational autoencoder. Encoder: F -> h (tanh) -> (mu, logvar);
/// decoder: latent -> h (tanh) -> F, squashed to epsilon * tanh(.).
struct TriggerGenerator {
  TriggerConfig config;
  FeatureNormalization normalization;
  ParameterStore params;

  static TriggerGenerator init(const TriggerConfig& config, FeatureNormalization normalization,
                               std::uint64_t seed);

  nlohmann::json to_json() const;
  static TriggerGenerator from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static TriggerGenerator load(const std::filesystem::path& path);
};

struct TriggerForward {
  Var x_t;
  Var delta;
  Var mu;
  Var logvar;
};

/// Tape forward for stacked node rows. With `noise` non-null the latent is
/// sampled (mu + exp(logvar / 2) * n), otherwise z = mu.
TriggerForward trigger_forward(Tape& tape, const TriggerGenerator& gen, Var features,
                               bool trainable, Rng* noise);

struct TriggeredSample {
  GraphSample original;
  Tensor x_t;
  Tensor delta;

  /// The original sample with features replaced by x_t.
  GraphSample triggered() const;
};

/// stochastic=false gives the deterministic deployment trigger; `noise_seed`
/// is only read when stochastic.
TriggeredSample apply_trigger(const TriggerGenerator& gen, const GraphSample& sample,
                              bool stochastic, std::uint64_t noise_seed = 0);

enum class AttackMode { FalseNegative, FalsePositive, LocalizationMisguidance };
std::string to_string(AttackMode mode);

struct AttackGoal {
  std::size_t target_class = 0;
  AttackMode mode = AttackMode::FalseNegative;

  /// FalseNegative for the no-fault class; otherwise LocalizationMisguidance
  /// when the target names a zone, FalsePositive when it does not.
  static AttackGoal for_target(const ClassSet& classes, std::size_t target_class);
  void validate(const ClassSet& classes) const;
};

/// CE of the triggered batch's class logits (similarity / tau) against the
/// target, plus lambda_div * KL(mu, logvar) + lambda_mag * mean(delta^2).
/// The classifier enters as constants.
Var generator_loss(Tape& tape, const ClipModel& model, const TriggerGenerator& gen,
                   const std::vector<const GraphSample*>& batch, const AttackGoal& goal,
                   double lambda_div, double lambda_mag, Rng* noise);

struct BackdoorResult {
  ClipModel model;
  TriggerGenerator generator;
  TrainLog log;
};

/// Alternating optimization. Each epoch: poison `train` with the current
/// generator (stochastic) and run one classifier epoch on it; then take
/// `steps_per_epoch` generator steps on half-target, half-other batches of
/// clean training data with the classifier frozen.
BackdoorResult train_backdoor(const Dataset& train, const TrainConfig& config,
                              const AttackGoal& goal, double poison_pct,
                              const TriggerConfig& trigger_config);

/// Clean-label poisoning with the deterministic trigger.
Dataset poison_dataset(const Dataset& train, const TriggerGenerator& gen, std::size_t target_class,
                       double poison_pct, std::uint64_t seed);

struct AttackOutcome {
  Classification with_trigger;
  Classification without_trigger;
  TriggeredSample triggered;
};

AttackOutcome attack(const ClipModel& model, const TriggerGenerator& gen,
                     const GraphSample& sample);

/// Deterministic triggers for every sample, in order.
std::vector<Tensor> trigger_features(const TriggerGenerator& gen,
                                     const std::vector<const GraphSample*>& samples);

}  // namespace feederclip
