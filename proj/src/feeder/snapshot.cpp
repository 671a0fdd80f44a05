#include "feederclip/snapshot.hpp"

#include <cmath>
#include <random>

namespace feederclip {

PowerFlowSolution resolve_scenario(const BusNetwork& net, const VoltVarCurve& curve,
                                   const Scenario& scenario, const VoltVarOptions& options) {
  const VoltVarResult vv = apply_volt_var(net, curve, scenario.load_scale, options);
  const std::vector<double> q_inj = inject_fault(net, scenario.fault, vv.q_inj);
  return solve_lindistflow(scaled_loads(net, scenario.load_scale),
                           std::vector<double>(net.size(), 0.0), q_inj);
}

GraphSample generate_snapshot(const BusNetwork& net, const VoltVarCurve& curve,
                              const FaultSpec& fault, double load_scale,
                              std::uint64_t noise_seed, const ClassSet& classes,
                              const SnapshotOptions& options) {
  const VoltVarResult vv = apply_volt_var(net, curve, load_scale, options.volt_var);
  const std::vector<double> q_inj = inject_fault(net, fault, vv.q_inj);
  const PowerFlowSolution sol = solve_lindistflow(scaled_loads(net, load_scale),
                                                  std::vector<double>(net.size(), 0.0), q_inj);

  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, options.voltage_noise_sigma);
  const std::size_t n = net.size();
  Tensor features = Tensor::matrix(n, kFeatureCount);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = std::sqrt(sol.v2[i]);
    features(i, kVoltageColumn) = options.voltage_noise_sigma > 0.0 ? v + noise(rng) : v;
    features(i, kActiveLoadColumn) = net.buses[i].p_load * load_scale;
    features(i, kReactiveLoadColumn) = net.buses[i].q_load * load_scale;
    features(i, kReactiveInjectionColumn) = q_inj[i];
  }
  return make_sample(std::move(features), adjacency_matrix(net), classes.label_for(fault),
                     Scenario{fault, load_scale, noise_seed});
}

}  // namespace feederclip
