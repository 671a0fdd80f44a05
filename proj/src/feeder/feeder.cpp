#include "feederclip/feeder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <random>
#include <sstream>
#include <unordered_map>

namespace feederclip {

std::size_t BusNetwork::index_of(int id) const {
  for (std::size_t i = 0; i < buses.size(); ++i) {
    if (buses[i].id == id) return i;
  }
  throw std::invalid_argument("unknown bus id " + std::to_string(id));
}

RadialIndex index_network(const BusNetwork& net) {
  const std::size_t n = net.size();
  if (n == 0) throw std::invalid_argument("network has no buses");
  std::unordered_map<int, std::size_t> position;
  for (std::size_t i = 0; i < n; ++i) {
    if (!position.emplace(net.buses[i].id, i).second) {
      throw std::invalid_argument("duplicate bus id " + std::to_string(net.buses[i].id));
    }
  }
  if (net.lines.size() != n - 1) {
    throw std::invalid_argument("radial network with " + std::to_string(n) + " buses needs " +
                                std::to_string(n - 1) + " lines, got " +
                                std::to_string(net.lines.size()));
  }
  auto root_it = position.find(net.root);
  if (root_it == position.end()) {
    throw std::invalid_argument("root bus " + std::to_string(net.root) + " does not exist");
  }

  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> incident(n);
  for (std::size_t k = 0; k < net.lines.size(); ++k) {
    const Line& line = net.lines[k];
    if (!(line.r > 0.0) || !(line.x > 0.0) || !std::isfinite(line.r) || !std::isfinite(line.x)) {
      throw std::invalid_argument("line " + std::to_string(line.from) + "-" +
                                  std::to_string(line.to) + " needs r > 0 and x > 0");
    }
    auto a = position.find(line.from);
    auto b = position.find(line.to);
    if (a == position.end() || b == position.end()) {
      throw std::invalid_argument("line " + std::to_string(line.from) + "-" +
                                  std::to_string(line.to) + " references an unknown bus");
    }
    if (a->second == b->second) {
      throw std::invalid_argument("line " + std::to_string(line.from) + "-" +
                                  std::to_string(line.to) + " is a self loop");
    }
    incident[a->second].emplace_back(b->second, k);
    incident[b->second].emplace_back(a->second, k);
  }

  RadialIndex idx;
  idx.root = root_it->second;
  idx.parent.assign(n, -1);
  idx.parent_line.assign(n, 0);
  idx.line_sign.assign(net.lines.size(), 1);
  idx.children.assign(n, {});
  idx.depth.assign(n, 0);
  std::vector<bool> seen(n, false);
  std::queue<std::size_t> frontier;
  frontier.push(idx.root);
  seen[idx.root] = true;
  while (!frontier.empty()) {
    const std::size_t u = frontier.front();
    frontier.pop();
    idx.order.push_back(u);
    auto adjacent = incident[u];
    std::sort(adjacent.begin(), adjacent.end());
    for (const auto& [v, k] : adjacent) {
      if (seen[v]) continue;
      seen[v] = true;
      idx.parent[v] = static_cast<long>(u);
      idx.parent_line[v] = k;
      idx.line_sign[k] = net.buses[u].id == net.lines[k].from ? 1 : -1;
      idx.children[u].push_back(v);
      idx.depth[v] = idx.depth[u] + 1;
      frontier.push(v);
    }
  }
  if (idx.order.size() != n) {
    throw std::invalid_argument("network is not connected: " +
                                std::to_string(n - idx.order.size()) +
                                " buses unreachable from the root");
  }
  return idx;
}

BusNetwork build_synthetic_feeder(std::size_t n_buses, std::uint64_t seed) {
  if (n_buses < 2) {
    throw std::invalid_argument("build_synthetic_feeder: need at least 2 buses, got " +
                                std::to_string(n_buses));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> resistance(0.005, 0.03);
  std::uniform_real_distribution<double> reactance(0.01, 0.06);
  std::uniform_real_distribution<double> load(0.005, 0.03);

  BusNetwork net;
  net.root = 0;
  net.buses.reserve(n_buses);
  net.lines.reserve(n_buses - 1);
  for (std::size_t i = 0; i < n_buses; ++i) {
    if (i > 0) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      const std::size_t parent = pick(rng);
      const double r = resistance(rng);
      const double x = reactance(rng);
      net.lines.push_back(Line{static_cast<int>(parent), static_cast<int>(i), r, x});
    }
    const double p = load(rng);
    const double q = load(rng);
    net.buses.push_back(Bus{static_cast<int>(i), p, q, i % 4 == 3});
  }
  return net;
}

BusNetwork scaled_loads(const BusNetwork& net, double load_scale) {
  BusNetwork out = net;
  for (Bus& b : out.buses) {
    b.p_load *= load_scale;
    b.q_load *= load_scale;
  }
  return out;
}

nlohmann::json network_to_json(const BusNetwork& net) {
  nlohmann::json buses = nlohmann::json::array();
  for (const Bus& b : net.buses) {
    buses.push_back({{"id", b.id}, {"p_load", b.p_load}, {"q_load", b.q_load}, {"has_der", b.has_der}});
  }
  nlohmann::json lines = nlohmann::json::array();
  for (const Line& l : net.lines) {
    lines.push_back({{"from", l.from}, {"to", l.to}, {"r", l.r}, {"x", l.x}});
  }
  return {{"buses", buses}, {"lines", lines}, {"root", net.root}};
}

BusNetwork network_from_json(const nlohmann::json& j) {
  BusNetwork net;
  try {
    for (const auto& b : j.at("buses")) {
      net.buses.push_back(Bus{b.at("id").get<int>(), b.at("p_load").get<double>(),
                              b.at("q_load").get<double>(), b.value("has_der", false)});
    }
    for (const auto& l : j.at("lines")) {
      net.lines.push_back(Line{l.at("from").get<int>(), l.at("to").get<int>(),
                               l.at("r").get<double>(), l.at("x").get<double>()});
    }
    net.root = j.at("root").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("topology file: ") + e.what());
  }
  index_network(net);
  return net;
}

BusNetwork load_network(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read topology file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("topology file " + path.string() + ": " + e.what());
  }
  return network_from_json(j);
}

void save_network(const BusNetwork& net, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << network_to_json(net).dump(2) << '\n';
}

// ---------------------------------------------------------------------------

namespace {
std::string format_double(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}
}  // namespace

InfeasibleOperatingPoint::InfeasibleOperatingPoint(int bus_id, double v2)
    : std::runtime_error("infeasible operating point: squared voltage " + format_double(v2) +
                         " at bus " + std::to_string(bus_id)),
      bus_id_(bus_id),
      v2_(v2) {}

ConvergenceError::ConvergenceError(std::size_t iterations, double residual)
    : std::runtime_error("volt-var iteration did not converge after " +
                         std::to_string(iterations) + " iterations (residual " +
                         format_double(residual) + ")"),
      iterations_(iterations),
      residual_(residual) {}

double PowerFlowSolution::voltage(std::size_t bus) const { return std::sqrt(v2.at(bus)); }

PowerFlowSolution solve_lindistflow(const BusNetwork& net, const std::vector<double>& p_inj,
                                    const std::vector<double>& q_inj) {
  const std::size_t n = net.size();
  if (p_inj.size() != n || q_inj.size() != n) {
    throw std::invalid_argument("solve_lindistflow: injection vectors of size " +
                                std::to_string(p_inj.size()) + "/" +
                                std::to_string(q_inj.size()) + " for " + std::to_string(n) +
                                " buses");
  }
  const RadialIndex idx = index_network(net);

  // Upstream pass: net withdrawal of each subtree.
  std::vector<double> p_sub(n), q_sub(n);
  for (std::size_t i = 0; i < n; ++i) {
    p_sub[i] = net.buses[i].p_load - p_inj[i];
    q_sub[i] = net.buses[i].q_load - q_inj[i];
  }
  for (auto it = idx.order.rbegin(); it != idx.order.rend(); ++it) {
    const long parent = idx.parent[*it];
    if (parent < 0) continue;
    p_sub[static_cast<std::size_t>(parent)] += p_sub[*it];
    q_sub[static_cast<std::size_t>(parent)] += q_sub[*it];
  }

  PowerFlowSolution sol;
  sol.v2.assign(n, 0.0);
  sol.p_flow.assign(net.lines.size(), 0.0);
  sol.q_flow.assign(net.lines.size(), 0.0);
  sol.v2[idx.root] = 1.0;
  // Downstream pass.
  for (std::size_t u : idx.order) {
    const long parent = idx.parent[u];
    if (parent < 0) continue;
    const std::size_t k = idx.parent_line[u];
    const Line& line = net.lines[k];
    sol.p_flow[k] = idx.line_sign[k] * p_sub[u];
    sol.q_flow[k] = idx.line_sign[k] * q_sub[u];
    sol.v2[u] = sol.v2[static_cast<std::size_t>(parent)] - 2.0 * (line.r * p_sub[u] + line.x * q_sub[u]);
    if (!(sol.v2[u] > 0.0)) throw InfeasibleOperatingPoint(net.buses[u].id, sol.v2[u]);
  }
  return sol;
}

// ---------------------------------------------------------------------------

VoltVarCurve VoltVarCurve::standard(double q_max) {
  VoltVarCurve c;
  c.q_max = q_max;
  c.breakpoints = {{{0.92, q_max}, {0.98, 0.0}, {1.02, 0.0}, {1.08, -q_max}}};
  return c;
}

void VoltVarCurve::validate() const {
  if (!(q_max >= 0.0)) throw std::invalid_argument("volt-var curve: q_max must be >= 0");
  for (std::size_t i = 0; i < breakpoints.size(); ++i) {
    const auto& [v, q] = breakpoints[i];
    if (std::abs(q) > q_max + 1e-12) {
      throw std::invalid_argument("volt-var curve: breakpoint " + std::to_string(i) +
                                  " exceeds q_max");
    }
    if (i > 0) {
      if (!(v > breakpoints[i - 1].first)) {
        throw std::invalid_argument("volt-var curve: breakpoint voltages must increase");
      }
      if (q > breakpoints[i - 1].second) {
        throw std::invalid_argument("volt-var curve: q must not increase with voltage");
      }
    }
  }
  if (breakpoints[1].second != 0.0 || breakpoints[2].second != 0.0) {
    throw std::invalid_argument("volt-var curve: deadband breakpoints must have q = 0");
  }
}

double VoltVarCurve::evaluate(double v) const {
  if (v <= breakpoints.front().first) return breakpoints.front().second;
  if (v >= breakpoints.back().first) return breakpoints.back().second;
  for (std::size_t i = 1; i < breakpoints.size(); ++i) {
    const auto& [v1, q1] = breakpoints[i];
    if (v <= v1) {
      const auto& [v0, q0] = breakpoints[i - 1];
      return q0 + (q1 - q0) * (v - v0) / (v1 - v0);
    }
  }
  return breakpoints.back().second;
}

VoltVarResult apply_volt_var(const BusNetwork& net, const VoltVarCurve& curve, double load_scale,
                             const VoltVarOptions& options) {
  if (!(load_scale > 0.0)) {
    throw std::invalid_argument("apply_volt_var: load_scale must be > 0");
  }
  curve.validate();
  const BusNetwork loaded = scaled_loads(net, load_scale);
  const std::size_t n = net.size();
  const std::vector<double> p_inj(n, 0.0);
  VoltVarResult result;
  result.q_inj.assign(n, 0.0);
  for (std::size_t it = 1; it <= options.max_iterations; ++it) {
    result.solution = solve_lindistflow(loaded, p_inj, result.q_inj);
    double residual = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!net.buses[i].has_der) continue;
      const double target = curve.evaluate(result.solution.voltage(i));
      const double step = options.damping * (target - result.q_inj[i]);
      result.q_inj[i] += step;
      residual = std::max(residual, std::abs(step));
    }
    result.iterations = it;
    result.residual = residual;
    if (residual < options.tolerance) {
      result.solution = solve_lindistflow(loaded, p_inj, result.q_inj);
      return result;
    }
  }
  throw ConvergenceError(options.max_iterations, result.residual);
}

// ---------------------------------------------------------------------------

std::string to_string(FaultKind kind) {
  switch (kind) {
    case FaultKind::None: return "none";
    case FaultKind::Overvoltage: return "overvoltage";
    case FaultKind::VoltageDrop: return "voltage_drop";
  }
  return "none";
}

FaultKind fault_kind_from_string(const std::string& s) {
  if (s == "none") return FaultKind::None;
  if (s == "overvoltage") return FaultKind::Overvoltage;
  if (s == "voltage_drop") return FaultKind::VoltageDrop;
  throw std::invalid_argument("unknown fault kind '" + s + "'");
}

void FaultSpec::validate() const {
  if (kind == FaultKind::None) {
    if (bus) throw std::invalid_argument("fault spec: kind none must not name a bus");
    return;
  }
  if (!bus) throw std::invalid_argument("fault spec: " + to_string(kind) + " needs a bus");
  if (!(magnitude > 0.0)) throw std::invalid_argument("fault spec: magnitude must be > 0");
}

std::vector<double> inject_fault(const BusNetwork& net, const FaultSpec& fault,
                                 std::vector<double> q_inj) {
  fault.validate();
  if (fault.kind == FaultKind::None) return q_inj;
  if (q_inj.size() != net.size()) {
    throw std::invalid_argument("inject_fault: injection vector size mismatch");
  }
  const std::size_t b = net.index_of(*fault.bus);
  q_inj[b] += fault.kind == FaultKind::Overvoltage ? fault.magnitude : -fault.magnitude;
  return q_inj;
}

std::vector<double> path_reactance(const BusNetwork& net) {
  const RadialIndex idx = index_network(net);
  std::vector<double> out(net.size(), 0.0);
  for (std::size_t u : idx.order) {
    if (idx.parent[u] < 0) continue;
    out[u] = out[static_cast<std::size_t>(idx.parent[u])] + net.lines[idx.parent_line[u]].x;
  }
  return out;
}

double band_exit_magnitude(const BusNetwork& net, const PowerFlowSolution& pre_fault,
                           FaultKind kind, int bus_id, double floor_magnitude, double margin) {
  if (kind == FaultKind::None) return 0.0;
  const std::size_t b = net.index_of(bus_id);
  const double sensitivity = 2.0 * path_reactance(net)[b];
  if (sensitivity <= 0.0) {
    throw std::invalid_argument("band_exit_magnitude: bus " + std::to_string(bus_id) +
                                " is the root and cannot be driven out of band");
  }
  const double target = kind == FaultKind::Overvoltage ? std::pow(kBandHigh + margin, 2)
                                                       : std::pow(kBandLow - margin, 2);
  const double needed = std::abs(target - pre_fault.v2.at(b)) / sensitivity;
  const bool already_out = kind == FaultKind::Overvoltage ? pre_fault.v2[b] >= target
                                                          : pre_fault.v2[b] <= target;
  return already_out ? floor_magnitude : std::max(floor_magnitude, needed);
}

}  // namespace feederclip
