#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "feederclip/feeder.hpp"
#include "feederclip/tensor.hpp"

namespace feederclip {

// Node feature columns.
inline constexpr std::size_t kVoltageColumn = 0;
inline constexpr std::size_t kActiveLoadColumn = 1;
inline constexpr std::size_t kReactiveLoadColumn = 2;
inline constexpr std::size_t kReactiveInjectionColumn = 3;
inline constexpr std::size_t kFeatureCount = 4;

enum class ClassMode { Binary, Detection, Localization };
std::string to_string(ClassMode mode);
ClassMode class_mode_from_string(const std::string& s);

/// What a class predicts. `Fault` is the kind-agnostic class of binary mode.
enum class LabelKind { NoFault, Fault, Overvoltage, VoltageDrop };
std::string to_string(LabelKind kind);
LabelKind label_kind_from_string(const std::string& s);

struct FaultLabel {
  LabelKind kind = LabelKind::NoFault;
  std::optional<int> bus;   // external id of the faulted bus
  std::optional<int> zone;  // 1-based, localization mode only
  std::size_t class_index = 0;
  friend bool operator==(const FaultLabel&, const FaultLabel&) = default;
};

/// Fixed lowercase template for a label; depends only on kind and zone.
std::string render_label_text(const FaultLabel& label);

struct ClassTemplate {
  LabelKind kind = LabelKind::NoFault;
  std::optional<int> zone;
  std::string text;
  friend bool operator==(const ClassTemplate&, const ClassTemplate&) = default;
};

/// Buses (external ids, root excluded) split into `zones` blocks of a
/// depth-first walk from the root, so every zone is a connected stretch of
/// the feeder. Block sizes differ by at most one.
std::vector<std::vector<int>> partition_zones(const BusNetwork& net, int zones);

/// Ordered class enumeration for one granularity. class_index is the position
/// in `classes`.
struct ClassSet {
  ClassMode mode = ClassMode::Detection;
  int zone_count = 0;
  std::vector<ClassTemplate> classes;
  std::vector<std::vector<int>> zone_buses;  // localization mode only

  static ClassSet make(ClassMode mode, const BusNetwork& net, int zones = 4);

  std::size_t size() const { return classes.size(); }
  std::vector<std::string> texts() const;
  std::size_t index_of(LabelKind kind, std::optional<int> zone = std::nullopt) const;
  std::optional<int> zone_of(int bus_id) const;
  /// Label of a simulated scenario under this class set.
  FaultLabel label_for(const FaultSpec& fault) const;
  FaultLabel label_for_class(std::size_t class_index) const;
  /// Buses a fault of class `class_index` may be placed at.
  std::vector<int> fault_buses(std::size_t class_index, const BusNetwork& net) const;

  nlohmann::json to_json() const;
  static ClassSet from_json(const nlohmann::json& j);
  friend bool operator==(const ClassSet&, const ClassSet&) = default;
};

/// Simulation inputs a snapshot came from; kept for audits.
struct Scenario {
  FaultSpec fault;
  double load_scale = 1.0;
  std::uint64_t noise_seed = 0;
  friend bool operator==(const Scenario&, const Scenario&) = default;
};

struct GraphSample {
  Tensor features;   // N x kFeatureCount
  Tensor adjacency;  // N x N, symmetric 0/1, zero diagonal
  FaultLabel label;
  std::string text;
  std::optional<Scenario> scenario;

  std::size_t nodes() const { return features.rows(); }
  friend bool operator==(const GraphSample&, const GraphSample&) = default;
};

/// Validates shapes, symmetry and finiteness; sets text from the label.
GraphSample make_sample(Tensor features, Tensor adjacency, FaultLabel label,
                        std::optional<Scenario> scenario = std::nullopt);
void validate_sample(const GraphSample& sample);

Tensor adjacency_matrix(const BusNetwork& net);

nlohmann::json sample_to_json(const GraphSample& sample);
GraphSample sample_from_json(const nlohmann::json& j);

}  // namespace feederclip
