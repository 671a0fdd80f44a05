#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <queue>
#include <random>

#include "feederclip/feeder.hpp"

using namespace feederclip;

namespace {

BusNetwork chain(std::size_t n, double r, double x, double p, double q) {
  BusNetwork net;
  for (std::size_t i = 0; i < n; ++i) {
    net.buses.push_back({static_cast<int>(i), i == 0 ? 0.0 : p, i == 0 ? 0.0 : q, false});
    if (i > 0) net.lines.push_back({static_cast<int>(i - 1), static_cast<int>(i), r, x});
  }
  return net;
}

std::vector<double> zeros(std::size_t n) { return std::vector<double>(n, 0.0); }

// Breadth-first reachability without the library's own index.
std::size_t reachable(const BusNetwork& net) {
  std::vector<std::vector<std::size_t>> adj(net.size());
  for (const Line& l : net.lines) {
    adj[net.index_of(l.from)].push_back(net.index_of(l.to));
    adj[net.index_of(l.to)].push_back(net.index_of(l.from));
  }
  std::vector<bool> seen(net.size(), false);
  std::queue<std::size_t> open;
  open.push(net.index_of(net.root));
  seen[open.front()] = true;
  std::size_t count = 0;
  while (!open.empty()) {
    const std::size_t u = open.front();
    open.pop();
    ++count;
    for (std::size_t v : adj[u]) {
      if (!seen[v]) {
        seen[v] = true;
        open.push(v);
      }
    }
  }
  return count;
}

}  // namespace

TEST_CASE("synthetic feeders are trees") {
  const BusNetwork two = build_synthetic_feeder(2, 5);
  REQUIRE(two.lines.size() == 1);
  CHECK(two.lines[0].from == 0);
  CHECK(two.lines[0].to == 1);

  const BusNetwork big = build_synthetic_feeder(123, 11);
  CHECK(big.lines.size() == 122);
  CHECK(reachable(big) == 123);

  CHECK(build_synthetic_feeder(30, 4) == build_synthetic_feeder(30, 4));
  CHECK_FALSE(build_synthetic_feeder(30, 4) == build_synthetic_feeder(30, 5));
}

TEST_CASE("network validation") {
  BusNetwork net = chain(3, 0.01, 0.02, 0.1, 0.05);
  CHECK_NOTHROW(index_network(net));

  BusNetwork cycle = net;
  cycle.lines.push_back({2, 0, 0.01, 0.01});
  CHECK_THROWS_AS(index_network(cycle), std::invalid_argument);

  BusNetwork split = net;
  split.lines.pop_back();
  CHECK_THROWS_AS(index_network(split), std::invalid_argument);

  BusNetwork dup = net;
  dup.buses[2].id = 1;
  CHECK_THROWS_AS(index_network(dup), std::invalid_argument);

  BusNetwork bad_line = net;
  bad_line.lines[0].r = -1.0;
  CHECK_THROWS_AS(index_network(bad_line), std::invalid_argument);

  CHECK_THROWS_AS(net.index_of(42), std::invalid_argument);
}

TEST_CASE("network json round trip") {
  const BusNetwork net = build_synthetic_feeder(30, 1);
  CHECK(network_from_json(network_to_json(net)) == net);
}

TEST_CASE("zero loads give flat voltage and no flow") {
  BusNetwork net = chain(5, 0.01, 0.02, 0.0, 0.0);
  const auto sol = solve_lindistflow(net, zeros(5), zeros(5));
  for (double v : sol.v2) CHECK(v == 1.0);
  for (double f : sol.p_flow) CHECK(f == 0.0);
  for (double f : sol.q_flow) CHECK(f == 0.0);
}

TEST_CASE("two bus hand computation") {
  BusNetwork net = chain(2, 0.01, 0.02, 0.1, 0.05);
  const auto sol = solve_lindistflow(net, zeros(2), zeros(2));
  CHECK(std::abs(sol.v2[1] - 0.996) < 1e-12);
  CHECK(std::abs(sol.p_flow[0] - 0.1) < 1e-12);
  CHECK(std::abs(sol.q_flow[0] - 0.05) < 1e-12);
}

TEST_CASE("three bus chain with a load only at the end") {
  BusNetwork net = chain(3, 0.01, 0.02, 0.0, 0.0);
  net.buses[2].p_load = 0.2;
  net.buses[2].q_load = 0.1;
  const auto sol = solve_lindistflow(net, zeros(3), zeros(3));
  CHECK(sol.p_flow[0] == sol.p_flow[1]);
  CHECK(sol.q_flow[0] == sol.q_flow[1]);
  const double drop = 2.0 * (0.01 * 0.2 + 0.02 * 0.1);
  CHECK(std::abs(sol.v2[1] - (1.0 - drop)) < 1e-12);
  CHECK(std::abs(sol.v2[2] - (1.0 - 2.0 * drop)) < 1e-12);
}

TEST_CASE("reversed line orientation flips the flow sign") {
  BusNetwork net = chain(2, 0.01, 0.02, 0.1, 0.05);
  std::swap(net.lines[0].from, net.lines[0].to);
  const auto sol = solve_lindistflow(net, zeros(2), zeros(2));
  CHECK(std::abs(sol.p_flow[0] + 0.1) < 1e-12);
  CHECK(std::abs(sol.v2[1] - 0.996) < 1e-12);
}

TEST_CASE("flow conservation on random feeders") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> inj(-0.01, 0.01);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const BusNetwork net = build_synthetic_feeder(5 + seed % 40, seed);
    std::vector<double> p(net.size()), q(net.size());
    for (std::size_t i = 0; i < net.size(); ++i) {
      p[i] = inj(rng);
      q[i] = inj(rng);
    }
    const auto sol = solve_lindistflow(net, p, q);
    // Net flow into every non-root bus equals its withdrawal.
    std::vector<double> in_p(net.size(), 0.0), in_q(net.size(), 0.0);
    for (std::size_t k = 0; k < net.lines.size(); ++k) {
      const std::size_t a = net.index_of(net.lines[k].from), b = net.index_of(net.lines[k].to);
      in_p[b] += sol.p_flow[k];
      in_p[a] -= sol.p_flow[k];
      in_q[b] += sol.q_flow[k];
      in_q[a] -= sol.q_flow[k];
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < net.size(); ++i) {
      if (net.buses[i].id == net.root) continue;
      worst = std::max(worst, std::abs(in_p[i] - (net.buses[i].p_load - p[i])));
      worst = std::max(worst, std::abs(in_q[i] - (net.buses[i].q_load - q[i])));
    }
    INFO("feeder seed " << seed);
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("voltage falls along a uniformly loaded chain") {
  BusNetwork net = chain(8, 0.005, 0.01, 0.02, 0.01);
  const auto sol = solve_lindistflow(net, zeros(8), zeros(8));
  for (std::size_t i = 1; i < 8; ++i) CHECK(sol.v2[i] < sol.v2[i - 1]);
}

TEST_CASE("infeasible loading is reported with the bus") {
  BusNetwork net = chain(3, 0.5, 0.5, 2.0, 2.0);
  try {
    solve_lindistflow(net, zeros(3), zeros(3));
    FAIL("expected throw");
  } catch (const InfeasibleOperatingPoint& e) {
    CHECK(e.bus_id() == 1);
    CHECK(e.v2() <= 0.0);
  }
  CHECK_THROWS_AS(solve_lindistflow(net, zeros(2), zeros(3)), std::invalid_argument);
}

TEST_CASE("volt-var curve") {
  const VoltVarCurve c = VoltVarCurve::standard(0.1);
  CHECK(c.evaluate(0.90) == 0.1);
  CHECK(c.evaluate(0.92) == 0.1);
  CHECK(c.evaluate(1.00) == 0.0);
  CHECK(c.evaluate(1.10) == -0.1);
  CHECK(std::abs(c.evaluate(0.95) - 0.05) < 1e-12);

  VoltVarCurve bad = c;
  bad.breakpoints[1].second = 0.05;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("volt-var inside the deadband injects nothing") {
  BusNetwork net = chain(4, 0.01, 0.02, 0.0, 0.0);
  for (auto& b : net.buses) b.has_der = b.id != 0;
  const auto res = apply_volt_var(net, VoltVarCurve::standard(), 1.0);
  CHECK(res.iterations == 1);
  for (double q : res.q_inj) CHECK(q == 0.0);
  CHECK_THROWS_AS(apply_volt_var(net, VoltVarCurve::standard(), 0.0), std::invalid_argument);
}

TEST_CASE("volt-var reaches a fixed point of the curve") {
  BusNetwork net = chain(6, 0.02, 0.04, 0.05, 0.03);
  for (auto& b : net.buses) b.has_der = b.id >= 3;
  const VoltVarCurve curve = VoltVarCurve::standard();
  const auto res = apply_volt_var(net, curve, 1.0);
  CHECK(res.residual < 1e-6);
  bool active = false;
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (!net.buses[i].has_der) {
      CHECK(res.q_inj[i] == 0.0);
      continue;
    }
    active = active || res.q_inj[i] > 0.0;
    CHECK(std::abs(res.q_inj[i] - curve.evaluate(res.solution.voltage(i))) < 1e-5);
  }
  CHECK(active);

  VoltVarOptions tight;
  tight.max_iterations = 1;
  CHECK_THROWS_AS(apply_volt_var(net, curve, 1.0, tight), ConvergenceError);
}

TEST_CASE("default feeder stays in band under normal operation") {
  const BusNetwork net = build_synthetic_feeder(30, 1);
  for (double s : {0.5, 0.8, 1.0, 1.2}) {
    const auto res = apply_volt_var(net, VoltVarCurve::standard(), s);
    for (std::size_t i = 0; i < net.size(); ++i) {
      INFO("load scale " << s << " bus " << net.buses[i].id);
      CHECK(res.solution.voltage(i) >= kBandLow);
      CHECK(res.solution.voltage(i) <= kBandHigh);
    }
  }
}

TEST_CASE("inject_fault") {
  const BusNetwork net = chain(3, 0.01, 0.02, 0.0, 0.0);
  const std::vector<double> q{0.01, 0.02, 0.03};
  CHECK(inject_fault(net, FaultSpec::none(), q) == q);
  CHECK(inject_fault(net, FaultSpec::at(FaultKind::Overvoltage, 2, 0.3), q)[2] ==
        doctest::Approx(0.33));
  CHECK(inject_fault(net, FaultSpec::at(FaultKind::VoltageDrop, 1, 0.3), q)[1] ==
        doctest::Approx(-0.28));
  CHECK_THROWS_AS(inject_fault(net, FaultSpec::at(FaultKind::VoltageDrop, 9, 0.3), q),
                  std::invalid_argument);
  CHECK_THROWS_AS(inject_fault(net, {FaultKind::Overvoltage, std::nullopt, 0.3}, q),
                  std::invalid_argument);
  CHECK_THROWS_AS(inject_fault(net, FaultSpec::at(FaultKind::Overvoltage, 1, 0.0), q),
                  std::invalid_argument);
}

TEST_CASE("sized faults leave the band at every bus of the default feeder") {
  const BusNetwork net = build_synthetic_feeder(30, 1);
  const VoltVarCurve curve = VoltVarCurve::standard();
  for (double s : {0.5, 1.2}) {
    const auto pre = apply_volt_var(net, curve, s);
    const BusNetwork loaded = scaled_loads(net, s);
    for (const Bus& b : net.buses) {
      if (b.id == net.root) continue;
      for (FaultKind kind : {FaultKind::Overvoltage, FaultKind::VoltageDrop}) {
        const double m = band_exit_magnitude(net, pre.solution, kind, b.id, 0.3);
        CHECK(m >= 0.3);
        const auto q = inject_fault(net, FaultSpec::at(kind, b.id, m), pre.q_inj);
        const auto post = solve_lindistflow(loaded, zeros(net.size()), q);
        const double v = post.voltage(net.index_of(b.id));
        INFO(to_string(kind) << " at bus " << b.id << " scale " << s << " |V| " << v);
        if (kind == FaultKind::Overvoltage) {
          CHECK(v > kBandHigh);
        } else {
          CHECK(v < kBandLow);
        }
      }
    }
  }
}

TEST_CASE("a fixed 0.3 injection only drives the electrically distant buses out of band") {
  const BusNetwork net = build_synthetic_feeder(30, 1);
  const auto pre = apply_volt_var(net, VoltVarCurve::standard(), 1.0);
  const auto reach = path_reactance(net);
  const std::size_t far = static_cast<std::size_t>(
      std::max_element(reach.begin(), reach.end()) - reach.begin());
  const auto drop = inject_fault(net, FaultSpec::at(FaultKind::VoltageDrop, net.buses[far].id),
                                 pre.q_inj);
  CHECK(solve_lindistflow(net, zeros(net.size()), drop).voltage(far) < kBandLow);

  // Overvoltage of the same size: the distance to the upper band edge is
  // larger than the drop that 0.3 p.u. can buy on this feeder.
  const auto over = inject_fault(net, FaultSpec::at(FaultKind::Overvoltage, net.buses[far].id),
                                 pre.q_inj);
  const double v = solve_lindistflow(net, zeros(net.size()), over).voltage(far);
  CHECK(v > pre.solution.voltage(far));
  CHECK(v < kBandHigh);
}

TEST_CASE("band exit magnitude rejects the root") {
  const BusNetwork net = build_synthetic_feeder(10, 2);
  const auto pre = apply_volt_var(net, VoltVarCurve::standard(), 1.0);
  CHECK_THROWS_AS(band_exit_magnitude(net, pre.solution, FaultKind::VoltageDrop, net.root, 0.3),
                  std::invalid_argument);
  CHECK(band_exit_magnitude(net, pre.solution, FaultKind::None, 1, 0.3) == 0.0);
}
