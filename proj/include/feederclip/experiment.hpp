#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "feederclip/trigger.hpp"

namespace feederclip {

struct Metrics {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;  // every class of the class set
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::optional<double> attack_success_rate;

  nlohmann::json to_json() const;
};

/// Macro averages run over the classes present in `labels`. A class with no
/// true and no predicted positives has precision, recall and F1 of 0. The
/// attack success rate counts non-target samples predicted as the target.
Metrics compute_metrics(const std::vector<std::size_t>& predictions,
                        const std::vector<std::size_t>& labels, std::size_t classes,
                        std::optional<std::size_t> target_class = std::nullopt);

// ---------------------------------------------------------------------------

struct FeederConfig {
  std::size_t buses = 30;
  std::uint64_t seed = 1;
  std::optional<std::filesystem::path> topology;  // overrides the synthetic feeder
};

struct ExperimentSettings {
  std::size_t seeds = 3;
  // Class granularity and size of the datasets behind the poisoning
  // experiments; see README for why these differ from the base dataset.
  ClassMode attack_mode = ClassMode::Binary;
  std::size_t attack_n_per_class = 500;
  std::vector<double> utility_rates{0.10, 0.20, 0.30};
  std::vector<double> sensitivity_rates{0.05, 0.10, 0.20, 0.30, 0.40};
  std::vector<double> comparison_rates{0.10, 0.20, 0.30, 0.40};
  std::size_t sensitivity_target = 0;
  std::size_t parallel = 1;
};

struct ExperimentConfig {
  FeederConfig feeder;
  DatasetOptions dataset;
  double train_fraction = 0.9;
  TrainConfig model;
  TriggerConfig generator;
  ExperimentSettings experiment;

  /// Every field optional; unknown keys are rejected.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

BusNetwork build_feeder(const FeederConfig& config);

/// Dataset and split both derive from `seed`.
struct PreparedData {
  BusNetwork net;
  Dataset train;
  Dataset test;
};
PreparedData prepare_data(const ExperimentConfig& config, const DatasetOptions& options,
                          std::uint64_t seed);

/// Training seed of run `i` under base seed `seed`.
std::uint64_t run_seed(std::uint64_t seed, std::size_t i);

// ---------------------------------------------------------------------------

struct RunRecord {
  std::string model;       // "clean" or "backdoor"
  std::string evaluation;  // "clean" or "triggered" test data
  std::optional<std::size_t> target;
  std::optional<double> rate;
  std::uint64_t seed = 0;
  Metrics metrics;
};

/// Mean over a group of runs.
struct AggregateRow {
  std::string label;
  std::string evaluation;
  std::optional<std::size_t> target;
  std::optional<double> rate;
  std::size_t runs = 0;
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> attack_success_rate;
  std::vector<double> per_class_f1;
};

struct ExperimentReport {
  std::string name;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> run_seeds;
  std::vector<std::string> class_texts;
  std::vector<RunRecord> runs;
  std::vector<AggregateRow> aggregates;

  nlohmann::json to_json() const;
  /// experiment,target,rate,class,metric,value; one line per aggregate value.
  std::string to_csv() const;
  void write(const std::filesystem::path& dir) const;
};

AggregateRow aggregate(const std::string& label, const std::vector<const RunRecord*>& runs);

/// Clean model and backdoored models for every target x rate, all scored on
/// clean test data. Aggregates: "clean" and "backdoor_average".
ExperimentReport run_utility_experiment(const ExperimentConfig& config, std::uint64_t seed);
/// Backdoored models for the configured target at each rate, scored on
/// triggered test data; one "backdoor" aggregate per rate plus the clean
/// model's "clean_reference" on the same triggered data.
ExperimentReport run_sensitivity_experiment(const ExperimentConfig& config, std::uint64_t seed);
/// Every target x rate on clean and triggered test data. Aggregates: one
/// "per_rate" row per (target, rate, evaluation) and one "average" row per
/// (target, evaluation).
ExperimentReport run_comparison_experiment(const ExperimentConfig& config, std::uint64_t seed);

ExperimentReport run_experiment(const std::string& name, const ExperimentConfig& config,
                                std::uint64_t seed);

}  // namespace feederclip
