#include "feederclip/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "feederclip/random.hpp"

namespace feederclip {

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(class_set.size(), 0);
  for (const auto& s : samples) counts.at(s.label.class_index) += 1;
  return counts;
}

std::vector<std::size_t> Dataset::indices_of_class(std::size_t class_index) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].label.class_index == class_index) out.push_back(i);
  }
  return out;
}

std::size_t Dataset::poisoned_count() const {
  return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(),
                                             Provenance::Poisoned));
}

void Dataset::validate() const {
  if (provenance.size() != samples.size()) {
    throw std::invalid_argument("dataset: provenance flags do not match sample count");
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.label.class_index >= class_set.size()) {
      throw std::invalid_argument("dataset: sample " + std::to_string(i) + " has class index " +
                                  std::to_string(s.label.class_index) + " outside the class set");
    }
    if (s.text != class_set.classes[s.label.class_index].text) {
      throw std::invalid_argument("dataset: sample " + std::to_string(i) +
                                  " text does not match its class");
    }
  }
}

Dataset build_dataset(const BusNetwork& net, const VoltVarCurve& curve,
                      const DatasetOptions& options, std::uint64_t seed) {
  if (options.n_per_class < 1) throw std::invalid_argument("build_dataset: n_per_class must be >= 1");
  if (!(options.load_scale_min > 0.0) || options.load_scale_max < options.load_scale_min) {
    throw std::invalid_argument("build_dataset: invalid load scale range");
  }
  Dataset ds;
  ds.class_set = ClassSet::make(options.mode, net, options.zones);
  const std::size_t classes = ds.class_set.size();
  ds.samples.reserve(classes * options.n_per_class);

  for (std::size_t c = 0; c < classes; ++c) {
    const ClassTemplate& tmpl = ds.class_set.classes[c];
    const std::vector<int> buses = ds.class_set.fault_buses(c, net);
    for (std::size_t k = 0; k < options.n_per_class; ++k) {
      Rng rng(derive_seed(seed, {c, k}));
      std::uniform_real_distribution<double> scale_dist(options.load_scale_min,
                                                        options.load_scale_max);
      const double load_scale = scale_dist(rng);
      FaultSpec fault;
      if (tmpl.kind != LabelKind::NoFault) {
        std::uniform_int_distribution<std::size_t> pick(0, buses.size() - 1);
        const int bus = buses[pick(rng)];
        FaultKind kind = FaultKind::Overvoltage;
        if (tmpl.kind == LabelKind::VoltageDrop) kind = FaultKind::VoltageDrop;
        if (tmpl.kind == LabelKind::Fault) {
          kind = std::bernoulli_distribution(0.5)(rng) ? FaultKind::Overvoltage
                                                       : FaultKind::VoltageDrop;
        }
        fault = FaultSpec::at(kind, bus, options.fault_magnitude);
      }
      const std::uint64_t noise_seed = rng();
      try {
        if (fault.kind != FaultKind::None && options.size_faults_to_band) {
          const VoltVarResult pre =
              apply_volt_var(net, curve, load_scale, options.snapshot.volt_var);
          fault.magnitude = band_exit_magnitude(net, pre.solution, fault.kind, *fault.bus,
                                                options.fault_magnitude, options.band_margin);
        }
        ds.samples.push_back(generate_snapshot(net, curve, fault, load_scale, noise_seed,
                                               ds.class_set, options.snapshot));
      } catch (const std::exception& e) {
        throw std::runtime_error("build_dataset: class '" + tmpl.text + "'" +
                                 (fault.bus ? " bus " + std::to_string(*fault.bus) : "") +
                                 ": " + e.what());
      }
    }
  }
  ds.provenance.assign(ds.samples.size(), Provenance::Clean);
  return ds;
}

std::pair<Dataset, Dataset> split(const Dataset& dataset, double train_fraction,
                                  std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split: train_fraction must lie in (0, 1)");
  }
  Rng rng(derive_seed(seed, {0x5b117}));
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t c = 0; c < dataset.class_set.size(); ++c) {
    std::vector<std::size_t> idx = dataset.indices_of_class(c);
    if (idx.size() < 2) {
      throw std::invalid_argument("split: class '" + dataset.class_set.classes[c].text +
                                  "' has " + std::to_string(idx.size()) +
                                  " samples, need at least 2");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<long>(n_train));
    test_idx.insert(test_idx.end(), idx.begin() + static_cast<long>(n_train), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  auto take = [&dataset](const std::vector<std::size_t>& idx) {
    Dataset out;
    out.class_set = dataset.class_set;
    for (std::size_t i : idx) {
      out.samples.push_back(dataset.samples[i]);
      out.provenance.push_back(dataset.provenance[i]);
    }
    return out;
  };
  return {take(train_idx), take(test_idx)};
}

Dataset poison_dataset(const Dataset& train, const TriggerFn& trigger, std::size_t target_class,
                       double poison_pct, std::uint64_t seed) {
  if (!(poison_pct >= 0.0 && poison_pct <= 1.0)) {
    throw std::invalid_argument("poison_dataset: poison_pct must lie in [0, 1]");
  }
  if (target_class >= train.class_set.size()) {
    throw std::invalid_argument("poison_dataset: target class " + std::to_string(target_class) +
                                " outside the class set");
  }
  const auto k = static_cast<std::size_t>(
      std::llround(poison_pct * static_cast<double>(train.size())));
  Dataset out = train;
  if (k == 0) return out;
  std::vector<std::size_t> candidates;
  for (std::size_t i : train.indices_of_class(target_class)) {
    if (train.provenance[i] == Provenance::Clean) candidates.push_back(i);
  }
  if (candidates.size() < k) {
    throw std::invalid_argument("poison_dataset: need " + std::to_string(k) +
                                " target-class samples, only " +
                                std::to_string(candidates.size()) + " available");
  }
  Rng rng(derive_seed(seed, {0x901503}));
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(k);
  std::sort(candidates.begin(), candidates.end());
  for (std::size_t i : candidates) {
    Tensor features = trigger(train.samples[i]);
    if (!features.same_shape(train.samples[i].features)) {
      throw std::invalid_argument("poison_dataset: trigger changed the feature shape");
    }
    out.samples[i].features = std::move(features);
    out.provenance[i] = Provenance::Poisoned;
  }
  return out;
}

// ---------------------------------------------------------------------------

DatasetParseError::DatasetParseError(std::size_t line, const std::string& what)
    : std::runtime_error("dataset line " + std::to_string(line) + ": " + what), line_(line) {}

namespace {
constexpr const char* kFormat = "feederclip-dataset";
const std::vector<std::string> kFeatureSchema = {"voltage_pu", "active_load_pu",
                                                 "reactive_load_pu", "reactive_injection_pu"};
}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  nlohmann::json header{{"format", kFormat},
                        {"version", 1},
                        {"class_set", dataset.class_set.to_json()},
                        {"feature_schema", kFeatureSchema},
                        {"count", dataset.size()}};
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    nlohmann::json j = sample_to_json(dataset.samples[i]);
    j["provenance"] = dataset.provenance[i] == Provenance::Poisoned ? "poisoned" : "clean";
    out << j.dump() << '\n';
  }
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw DatasetParseError(line_no, "missing header");
  Dataset ds;
  std::size_t count = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format").get<std::string>() != kFormat) {
      throw std::invalid_argument("not a dataset file");
    }
    if (header.at("feature_schema").get<std::vector<std::string>>() != kFeatureSchema) {
      throw std::invalid_argument("unsupported feature schema");
    }
    ds.class_set = ClassSet::from_json(header.at("class_set"));
    count = header.at("count").get<std::size_t>();
  } catch (const std::exception& e) {
    throw DatasetParseError(line_no, e.what());
  }
  while (ds.samples.size() < count) {
    ++line_no;
    if (!std::getline(in, line)) {
      throw DatasetParseError(line_no, "expected " + std::to_string(count) + " samples, file ends after " +
                                           std::to_string(ds.samples.size()));
    }
    try {
      const auto j = nlohmann::json::parse(line);
      GraphSample s = sample_from_json(j);
      const std::string prov = j.at("provenance").get<std::string>();
      if (prov != "clean" && prov != "poisoned") throw std::invalid_argument("bad provenance");
      if (s.label.class_index >= ds.class_set.size()) {
        throw std::invalid_argument("class index out of range");
      }
      ds.samples.push_back(std::move(s));
      ds.provenance.push_back(prov == "poisoned" ? Provenance::Poisoned : Provenance::Clean);
    } catch (const std::exception& e) {
      throw DatasetParseError(line_no, e.what());
    }
  }
  ds.validate();
  return ds;
}

}  // namespace feederclip
