#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "feederclip/sample.hpp"
#include "feederclip/snapshot.hpp"

namespace feederclip {

enum class Provenance { Clean, Poisoned };

struct Dataset {
  ClassSet class_set;
  std::vector<GraphSample> samples;
  std::vector<Provenance> provenance;

  std::size_t size() const { return samples.size(); }
  std::vector<std::size_t> class_counts() const;
  std::vector<std::size_t> indices_of_class(std::size_t class_index) const;
  std::size_t poisoned_count() const;
  /// Every class index in range, texts consistent, provenance aligned.
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct DatasetOptions {
  ClassMode mode = ClassMode::Localization;
  int zones = 4;
  std::size_t n_per_class = 100;
  double load_scale_min = 0.5;
  double load_scale_max = 1.2;
  double fault_magnitude = kDefaultFaultMagnitude;
  // Raise the rogue injection where the default magnitude would leave the
  // faulted bus inside the nominal band.
  bool size_faults_to_band = true;
  double band_margin = 0.01;
  SnapshotOptions snapshot;
};

/// Balanced dataset: n_per_class snapshots per class, load scale uniform in
/// [load_scale_min, load_scale_max], fault bus uniform among the class's buses.
/// Each sample draws from its own seed derived from (seed, class, index).
Dataset build_dataset(const BusNetwork& net, const VoltVarCurve& curve,
                      const DatasetOptions& options, std::uint64_t seed);

/// Stratified split; round(train_fraction * n_c) of each class goes to train.
std::pair<Dataset, Dataset> split(const Dataset& dataset, double train_fraction,
                                  std::uint64_t seed);

/// Perturbed features for one sample.
using TriggerFn = std::function<Tensor(const GraphSample&)>;

/// Clean-label poisoning: replaces the features of round(poison_pct * |train|)
/// randomly chosen target-class samples with `trigger` output. Labels, texts
/// and adjacency are untouched.
Dataset poison_dataset(const Dataset& train, const TriggerFn& trigger, std::size_t target_class,
                       double poison_pct, std::uint64_t seed);

class DatasetParseError : public std::runtime_error {
 public:
  DatasetParseError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// JSON lines: a header line (class set, feature schema, sample count), then
/// one sample per line.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace feederclip
