#include "feederclip/sample.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace feederclip {

std::string to_string(ClassMode mode) {
  switch (mode) {
    case ClassMode::Binary: return "binary";
    case ClassMode::Detection: return "detection";
    case ClassMode::Localization: return "localization";
  }
  return "detection";
}

ClassMode class_mode_from_string(const std::string& s) {
  if (s == "binary") return ClassMode::Binary;
  if (s == "detection") return ClassMode::Detection;
  if (s == "localization") return ClassMode::Localization;
  throw std::invalid_argument("unknown class mode '" + s + "'");
}

std::string to_string(LabelKind kind) {
  switch (kind) {
    case LabelKind::NoFault: return "no_fault";
    case LabelKind::Fault: return "fault";
    case LabelKind::Overvoltage: return "overvoltage";
    case LabelKind::VoltageDrop: return "voltage_drop";
  }
  return "no_fault";
}

LabelKind label_kind_from_string(const std::string& s) {
  if (s == "no_fault") return LabelKind::NoFault;
  if (s == "fault") return LabelKind::Fault;
  if (s == "overvoltage") return LabelKind::Overvoltage;
  if (s == "voltage_drop") return LabelKind::VoltageDrop;
  throw std::invalid_argument("unknown label kind '" + s + "'");
}

std::string render_label_text(const FaultLabel& label) {
  const std::string suffix = label.zone ? " in zone " + std::to_string(*label.zone) : "";
  switch (label.kind) {
    case LabelKind::NoFault: return "normal operation no fault";
    case LabelKind::Fault: return "abnormal operation fault";
    case LabelKind::Overvoltage: return "overvoltage fault" + suffix;
    case LabelKind::VoltageDrop: return "voltage drop fault" + suffix;
  }
  return "normal operation no fault";
}

std::vector<std::vector<int>> partition_zones(const BusNetwork& net, int zones) {
  const RadialIndex idx = index_network(net);
  if (zones < 1) throw std::invalid_argument("partition_zones: need at least one zone");
  if (static_cast<std::size_t>(zones) > net.size() - 1) {
    throw std::invalid_argument("partition_zones: " + std::to_string(zones) + " zones for " +
                                std::to_string(net.size() - 1) + " non-root buses");
  }
  std::vector<int> preorder;
  std::vector<std::size_t> stack{idx.root};
  while (!stack.empty()) {
    const std::size_t u = stack.back();
    stack.pop_back();
    if (u != idx.root) preorder.push_back(net.buses[u].id);
    const auto& kids = idx.children[u];
    for (auto it = kids.rbegin(); it != kids.rend(); ++it) stack.push_back(*it);
  }
  std::vector<std::vector<int>> out(static_cast<std::size_t>(zones));
  const std::size_t base = preorder.size() / out.size();
  const std::size_t extra = preorder.size() % out.size();
  std::size_t pos = 0;
  for (std::size_t z = 0; z < out.size(); ++z) {
    const std::size_t count = base + (z < extra ? 1 : 0);
    out[z].assign(preorder.begin() + static_cast<long>(pos),
                  preorder.begin() + static_cast<long>(pos + count));
    pos += count;
  }
  return out;
}

ClassSet ClassSet::make(ClassMode mode, const BusNetwork& net, int zones) {
  ClassSet set;
  set.mode = mode;
  auto add = [&set](LabelKind kind, std::optional<int> zone) {
    FaultLabel l{kind, std::nullopt, zone, set.classes.size()};
    set.classes.push_back(ClassTemplate{kind, zone, render_label_text(l)});
  };
  add(LabelKind::NoFault, std::nullopt);
  switch (mode) {
    case ClassMode::Binary:
      add(LabelKind::Fault, std::nullopt);
      break;
    case ClassMode::Detection:
      add(LabelKind::Overvoltage, std::nullopt);
      add(LabelKind::VoltageDrop, std::nullopt);
      break;
    case ClassMode::Localization:
      set.zone_count = zones;
      set.zone_buses = partition_zones(net, zones);
      for (int z = 1; z <= zones; ++z) add(LabelKind::Overvoltage, z);
      for (int z = 1; z <= zones; ++z) add(LabelKind::VoltageDrop, z);
      break;
  }
  return set;
}

std::vector<std::string> ClassSet::texts() const {
  std::vector<std::string> out;
  out.reserve(classes.size());
  for (const auto& c : classes) out.push_back(c.text);
  return out;
}

std::size_t ClassSet::index_of(LabelKind kind, std::optional<int> zone) const {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i].kind == kind && classes[i].zone == zone) return i;
  }
  throw std::invalid_argument("class set (" + to_string(mode) + ") has no class " +
                              to_string(kind) +
                              (zone ? " in zone " + std::to_string(*zone) : std::string()));
}

std::optional<int> ClassSet::zone_of(int bus_id) const {
  for (std::size_t z = 0; z < zone_buses.size(); ++z) {
    const auto& buses = zone_buses[z];
    if (std::find(buses.begin(), buses.end(), bus_id) != buses.end()) {
      return static_cast<int>(z) + 1;
    }
  }
  return std::nullopt;
}

FaultLabel ClassSet::label_for(const FaultSpec& fault) const {
  fault.validate();
  FaultLabel label;
  if (fault.kind == FaultKind::None) {
    label.class_index = index_of(LabelKind::NoFault);
    return label;
  }
  label.bus = fault.bus;
  const LabelKind physical =
      fault.kind == FaultKind::Overvoltage ? LabelKind::Overvoltage : LabelKind::VoltageDrop;
  switch (mode) {
    case ClassMode::Binary:
      label.kind = LabelKind::Fault;
      break;
    case ClassMode::Detection:
      label.kind = physical;
      break;
    case ClassMode::Localization:
      label.kind = physical;
      label.zone = zone_of(*fault.bus);
      if (!label.zone) {
        throw std::invalid_argument("bus " + std::to_string(*fault.bus) + " belongs to no zone");
      }
      break;
  }
  label.class_index = index_of(label.kind, label.zone);
  return label;
}

FaultLabel ClassSet::label_for_class(std::size_t class_index) const {
  const ClassTemplate& c = classes.at(class_index);
  return FaultLabel{c.kind, std::nullopt, c.zone, class_index};
}

std::vector<int> ClassSet::fault_buses(std::size_t class_index, const BusNetwork& net) const {
  const ClassTemplate& c = classes.at(class_index);
  if (c.kind == LabelKind::NoFault) return {};
  if (c.zone) return zone_buses.at(static_cast<std::size_t>(*c.zone - 1));
  std::vector<int> out;
  for (const Bus& b : net.buses) {
    if (b.id != net.root) out.push_back(b.id);
  }
  return out;
}

nlohmann::json ClassSet::to_json() const {
  nlohmann::json cls = nlohmann::json::array();
  for (const auto& c : classes) {
    nlohmann::json e{{"kind", to_string(c.kind)}, {"text", c.text}};
    e["zone"] = c.zone ? nlohmann::json(*c.zone) : nlohmann::json(nullptr);
    cls.push_back(e);
  }
  return {{"mode", to_string(mode)},
          {"zone_count", zone_count},
          {"classes", cls},
          {"zone_buses", zone_buses}};
}

ClassSet ClassSet::from_json(const nlohmann::json& j) {
  ClassSet set;
  set.mode = class_mode_from_string(j.at("mode").get<std::string>());
  set.zone_count = j.at("zone_count").get<int>();
  for (const auto& e : j.at("classes")) {
    ClassTemplate c;
    c.kind = label_kind_from_string(e.at("kind").get<std::string>());
    if (!e.at("zone").is_null()) c.zone = e.at("zone").get<int>();
    c.text = e.at("text").get<std::string>();
    set.classes.push_back(std::move(c));
  }
  set.zone_buses = j.at("zone_buses").get<std::vector<std::vector<int>>>();
  return set;
}

// ---------------------------------------------------------------------------

void validate_sample(const GraphSample& s) {
  if (s.features.rank() != 2 || s.features.cols() != kFeatureCount) {
    throw std::invalid_argument("graph sample: features must be N x " +
                                std::to_string(kFeatureCount) + ", got " +
                                shape_string(s.features.shape()));
  }
  const std::size_t n = s.features.rows();
  if (s.adjacency.shape() != Shape{n, n}) {
    throw std::invalid_argument("graph sample: adjacency shape " +
                                shape_string(s.adjacency.shape()) + " for " + std::to_string(n) +
                                " nodes");
  }
  if (!s.features.all_finite()) throw std::invalid_argument("graph sample: non-finite features");
  for (std::size_t i = 0; i < n; ++i) {
    if (s.adjacency(i, i) != 0.0) {
      throw std::invalid_argument("graph sample: adjacency has a nonzero diagonal");
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double a = s.adjacency(i, j);
      if ((a != 0.0 && a != 1.0) || a != s.adjacency(j, i)) {
        throw std::invalid_argument("graph sample: adjacency must be symmetric 0/1");
      }
    }
  }
}

GraphSample make_sample(Tensor features, Tensor adjacency, FaultLabel label,
                        std::optional<Scenario> scenario) {
  GraphSample s{std::move(features), std::move(adjacency), label, render_label_text(label),
                std::move(scenario)};
  validate_sample(s);
  return s;
}

Tensor adjacency_matrix(const BusNetwork& net) {
  index_network(net);
  Tensor a = Tensor::matrix(net.size(), net.size());
  for (const Line& l : net.lines) {
    const std::size_t i = net.index_of(l.from);
    const std::size_t j = net.index_of(l.to);
    a(i, j) = 1.0;
    a(j, i) = 1.0;
  }
  return a;
}

nlohmann::json sample_to_json(const GraphSample& s) {
  nlohmann::json edges = nlohmann::json::array();
  const std::size_t n = s.adjacency.rows();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (s.adjacency(i, j) != 0.0) edges.push_back({i, j});
    }
  }
  nlohmann::json label{{"kind", to_string(s.label.kind)}, {"class_index", s.label.class_index}};
  label["bus"] = s.label.bus ? nlohmann::json(*s.label.bus) : nlohmann::json(nullptr);
  label["zone"] = s.label.zone ? nlohmann::json(*s.label.zone) : nlohmann::json(nullptr);
  nlohmann::json j{{"nodes", n},
                   {"features", s.features.storage()},
                   {"edges", edges},
                   {"label", label},
                   {"text", s.text}};
  if (s.scenario) {
    const Scenario& sc = *s.scenario;
    nlohmann::json fault{{"kind", to_string(sc.fault.kind)}, {"magnitude", sc.fault.magnitude}};
    fault["bus"] = sc.fault.bus ? nlohmann::json(*sc.fault.bus) : nlohmann::json(nullptr);
    j["scenario"] = {{"fault", fault},
                     {"load_scale", sc.load_scale},
                     {"noise_seed", sc.noise_seed}};
  }
  return j;
}

GraphSample sample_from_json(const nlohmann::json& j) {
  const std::size_t n = j.at("nodes").get<std::size_t>();
  Tensor features(Shape{n, kFeatureCount}, j.at("features").get<std::vector<double>>());
  Tensor adjacency = Tensor::matrix(n, n);
  for (const auto& e : j.at("edges")) {
    const std::size_t a = e.at(0).get<std::size_t>();
    const std::size_t b = e.at(1).get<std::size_t>();
    if (a >= n || b >= n) throw std::invalid_argument("edge endpoint out of range");
    adjacency(a, b) = 1.0;
    adjacency(b, a) = 1.0;
  }
  const auto& l = j.at("label");
  FaultLabel label;
  label.kind = label_kind_from_string(l.at("kind").get<std::string>());
  label.class_index = l.at("class_index").get<std::size_t>();
  if (!l.at("bus").is_null()) label.bus = l.at("bus").get<int>();
  if (!l.at("zone").is_null()) label.zone = l.at("zone").get<int>();
  std::optional<Scenario> scenario;
  if (j.contains("scenario")) {
    const auto& sc = j.at("scenario");
    Scenario s;
    const auto& f = sc.at("fault");
    s.fault.kind = fault_kind_from_string(f.at("kind").get<std::string>());
    s.fault.magnitude = f.at("magnitude").get<double>();
    if (!f.at("bus").is_null()) s.fault.bus = f.at("bus").get<int>();
    s.load_scale = sc.at("load_scale").get<double>();
    s.noise_seed = sc.at("noise_seed").get<std::uint64_t>();
    scenario = s;
  }
  GraphSample s = make_sample(std::move(features), std::move(adjacency), label, scenario);
  const std::string text = j.at("text").get<std::string>();
  if (text != s.text) {
    throw std::invalid_argument("sample text '" + text + "' does not match its label");
  }
  return s;
}

}  // namespace feederclip
