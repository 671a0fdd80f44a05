#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace feederclip {

struct Bus {
  int id = 0;
  double p_load = 0.0;  // p.u.
  double q_load = 0.0;  // p.u.
  bool has_der = false;
  friend bool operator==(const Bus&, const Bus&) = default;
};

struct Line {
  int from = 0;
  int to = 0;
  double r = 0.0;  // p.u.
  double x = 0.0;  // p.u.
  friend bool operator==(const Line&, const Line&) = default;
};

/// Single-phase per-unit abstraction of a radial distribution feeder. Buses are
/// addressed by position in `buses` ("bus index") or by their external `id`.
struct BusNetwork {
  std::vector<Bus> buses;
  std::vector<Line> lines;
  int root = 0;

  std::size_t size() const { return buses.size(); }
  /// Position of the bus with external id `id`; throws std::invalid_argument.
  std::size_t index_of(int id) const;

  friend bool operator==(const BusNetwork&, const BusNetwork&) = default;
};

/// Rooted view of a validated network.
struct RadialIndex {
  std::size_t root = 0;
  std::vector<std::size_t> order;         // breadth-first from the root
  std::vector<long> parent;               // -1 for the root
  std::vector<std::size_t> parent_line;   // line feeding each non-root bus
  std::vector<int> line_sign;             // +1 when line.from is the upstream end
  std::vector<std::vector<std::size_t>> children;
  std::vector<std::size_t> depth;
};

/// Checks the tree invariants and builds the rooted index.
/// Throws std::invalid_argument on any violation.
RadialIndex index_network(const BusNetwork& net);

/// Random radial feeder: bus i > 0 hangs off a uniformly chosen j < i.
BusNetwork build_synthetic_feeder(std::size_t n_buses, std::uint64_t seed);

BusNetwork scaled_loads(const BusNetwork& net, double load_scale);

nlohmann::json network_to_json(const BusNetwork& net);
BusNetwork network_from_json(const nlohmann::json& j);
BusNetwork load_network(const std::filesystem::path& path);
void save_network(const BusNetwork& net, const std::filesystem::path& path);

// ---------------------------------------------------------------------------

class InfeasibleOperatingPoint : public std::runtime_error {
 public:
  InfeasibleOperatingPoint(int bus_id, double v2);
  int bus_id() const { return bus_id_; }
  double v2() const { return v2_; }

 private:
  int bus_id_;
  double v2_;
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(std::size_t iterations, double residual);
  std::size_t iterations() const { return iterations_; }
  double residual() const { return residual_; }

 private:
  std::size_t iterations_;
  double residual_;
};

struct PowerFlowSolution {
  std::vector<double> v2;      // squared voltage magnitude per bus
  std::vector<double> p_flow;  // per line, oriented from -> to
  std::vector<double> q_flow;

  double voltage(std::size_t bus) const;
};

/// LinDistFlow on a radial network: withdrawals (load - injection) are summed
/// over each downstream subtree, then squared voltages are propagated from the
/// root with v2[child] = v2[parent] - 2 (r P + x Q).
PowerFlowSolution solve_lindistflow(const BusNetwork& net, const std::vector<double>& p_inj,
                                    const std::vector<double>& q_inj);

// ---------------------------------------------------------------------------

/// Piecewise-linear droop with a deadband between the two middle breakpoints.
struct VoltVarCurve {
  std::array<std::pair<double, double>, 4> breakpoints{};
  double q_max = 0.1;

  static VoltVarCurve standard(double q_max = 0.1);
  void validate() const;
  /// Reactive injection target at voltage magnitude `v` (p.u.).
  double evaluate(double v) const;
};

struct VoltVarOptions {
  double damping = 0.5;
  double tolerance = 1e-6;
  std::size_t max_iterations = 50;
};

struct VoltVarResult {
  std::vector<double> q_inj;
  PowerFlowSolution solution;
  std::size_t iterations = 0;
  double residual = 0.0;
};

/// Damped fixed point between the power flow and the DER volt-var curves at
/// loads scaled by `load_scale`. Throws ConvergenceError.
VoltVarResult apply_volt_var(const BusNetwork& net, const VoltVarCurve& curve, double load_scale,
                             const VoltVarOptions& options = {});

// ---------------------------------------------------------------------------

enum class FaultKind { None, Overvoltage, VoltageDrop };

std::string to_string(FaultKind kind);
FaultKind fault_kind_from_string(const std::string& s);

struct FaultSpec {
  FaultKind kind = FaultKind::None;
  std::optional<int> bus;  // external bus id
  double magnitude = 0.0;  // p.u. rogue reactive injection

  static FaultSpec none() { return {}; }
  static FaultSpec at(FaultKind kind, int bus, double magnitude = 0.3) {
    return {kind, bus, magnitude};
  }
  void validate() const;
  friend bool operator==(const FaultSpec&, const FaultSpec&) = default;
};

constexpr double kDefaultFaultMagnitude = 0.3;
constexpr double kBandLow = 0.95;
constexpr double kBandHigh = 1.05;

/// Adds the rogue injection of `fault` to `q_inj` (indexed by bus position).
std::vector<double> inject_fault(const BusNetwork& net, const FaultSpec& fault,
                                 std::vector<double> q_inj);

/// Smallest injection, never below `floor_magnitude`, that moves bus `bus_id`
/// at least `margin` outside the nominal band given the pre-fault solution.
/// Exact under LinDistFlow because v2 is affine in the injections.
double band_exit_magnitude(const BusNetwork& net, const PowerFlowSolution& pre_fault,
                           FaultKind kind, int bus_id, double floor_magnitude,
                           double margin = 0.01);

/// Electrical distance sum(x) along the path from the root to every bus.
std::vector<double> path_reactance(const BusNetwork& net);

}  // namespace feederclip
