#pragma once

#include <cstdint>

#include "feederclip/feeder.hpp"
#include "feederclip/sample.hpp"

namespace feederclip {

struct SnapshotOptions {
  double voltage_noise_sigma = 0.002;  // p.u.
  VoltVarOptions volt_var;
};

/// One labeled observation of the feeder: volt-var fixed point at the given
/// loading, then the fault's rogue injection, then a re-solve. Node features
/// are [|V| + noise, p_load * s, q_load * s, q_inj].
GraphSample generate_snapshot(const BusNetwork& net, const VoltVarCurve& curve,
                              const FaultSpec& fault, double load_scale,
                              std::uint64_t noise_seed, const ClassSet& classes,
                              const SnapshotOptions& options = {});

/// Noise-free post-fault power flow of a recorded scenario.
PowerFlowSolution resolve_scenario(const BusNetwork& net, const VoltVarCurve& curve,
                                   const Scenario& scenario,
                                   const VoltVarOptions& options = {});

}  // namespace feederclip
