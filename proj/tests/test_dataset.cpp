#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "feederclip/dataset.hpp"

using namespace feederclip;

namespace {

const BusNetwork& feeder() {
  static const BusNetwork net = build_synthetic_feeder(30, 1);
  return net;
}

Dataset small(ClassMode mode, std::size_t n, std::uint64_t seed = 3) {
  DatasetOptions o;
  o.mode = mode;
  o.n_per_class = n;
  return build_dataset(feeder(), VoltVarCurve::standard(), o, seed);
}

std::multiset<std::pair<std::size_t, std::string>> label_texts(const Dataset& d) {
  std::multiset<std::pair<std::size_t, std::string>> out;
  for (const auto& s : d.samples) out.emplace(s.label.class_index, s.text);
  return out;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("label templates") {
  CHECK(render_label_text({LabelKind::NoFault, std::nullopt, std::nullopt, 0}) ==
        "normal operation no fault");
  CHECK(render_label_text({LabelKind::Overvoltage, 7, 2, 3}) == "overvoltage fault in zone 2");
  CHECK(render_label_text({LabelKind::VoltageDrop, 7, 3, 6}) == "voltage drop fault in zone 3");
  CHECK(render_label_text({LabelKind::Overvoltage, 7, std::nullopt, 1}) == "overvoltage fault");
}

TEST_CASE("class sets") {
  CHECK(ClassSet::make(ClassMode::Binary, feeder()).size() == 2);
  CHECK(ClassSet::make(ClassMode::Detection, feeder()).size() == 3);
  const ClassSet loc = ClassSet::make(ClassMode::Localization, feeder(), 4);
  CHECK(loc.size() == 9);
  CHECK(loc.classes[0].kind == LabelKind::NoFault);
  const auto all_texts = loc.texts();
  std::set<std::string> texts(all_texts.begin(), all_texts.end());
  CHECK(texts.size() == 9);
  CHECK(ClassSet::from_json(loc.to_json()) == loc);
}

TEST_CASE("zones partition the non-root buses into connected blocks") {
  const auto zones = partition_zones(feeder(), 4);
  REQUIRE(zones.size() == 4);
  std::set<int> all;
  std::size_t lo = 100, hi = 0;
  for (const auto& z : zones) {
    all.insert(z.begin(), z.end());
    lo = std::min(lo, z.size());
    hi = std::max(hi, z.size());
  }
  CHECK(all.size() == feeder().size() - 1);
  CHECK_FALSE(all.contains(feeder().root));
  CHECK(hi - lo <= 1);
  CHECK_THROWS_AS(partition_zones(feeder(), 0), std::invalid_argument);
}

TEST_CASE("balanced datasets") {
  const Dataset bin = small(ClassMode::Binary, 50);
  CHECK(bin.size() == 100);
  CHECK(bin.class_counts() == std::vector<std::size_t>{50, 50});

  const Dataset loc = small(ClassMode::Localization, 5);
  CHECK(loc.class_set.size() == 9);
  CHECK(loc.size() == 45);
  for (std::size_t c : loc.class_counts()) CHECK(c == 5);
  CHECK_NOTHROW(loc.validate());
  CHECK(small(ClassMode::Binary, 4, 9) == small(ClassMode::Binary, 4, 9));
}

TEST_CASE("fault samples re-solve outside the band at the faulted bus") {
  const Dataset loc = small(ClassMode::Localization, 20);
  std::size_t audited = 0;
  for (const auto& s : loc.samples) {
    REQUIRE(s.scenario.has_value());
    const auto sol = resolve_scenario(feeder(), VoltVarCurve::standard(), *s.scenario);
    if (s.label.kind == LabelKind::NoFault) {
      for (std::size_t i = 0; i < feeder().size(); ++i) {
        CHECK(sol.voltage(i) >= kBandLow);
        CHECK(sol.voltage(i) <= kBandHigh);
      }
      continue;
    }
    const std::size_t b = feeder().index_of(*s.label.bus);
    const double v = sol.voltage(b);
    CHECK((v < kBandLow || v > kBandHigh));
    if (s.label.kind == LabelKind::Overvoltage) CHECK(v > kBandHigh);
    if (s.label.kind == LabelKind::VoltageDrop) CHECK(v < kBandLow);
    CHECK(loc.class_set.zone_of(*s.label.bus) == s.label.zone);
    ++audited;
  }
  CHECK(audited == 160);
}

TEST_CASE("split proportions and partition") {
  const Dataset bin = small(ClassMode::Binary, 50);
  auto [train, test] = split(bin, 0.9, 1);
  CHECK(train.size() == 90);
  CHECK(test.size() == 10);

  const Dataset loc = small(ClassMode::Localization, 10);
  auto [tr, te] = split(loc, 0.7, 2);
  for (std::size_t c = 0; c < 9; ++c) {
    CHECK(tr.class_counts()[c] == 7);
    CHECK(te.class_counts()[c] == 3);
  }
  std::vector<GraphSample> merged = tr.samples;
  merged.insert(merged.end(), te.samples.begin(), te.samples.end());
  auto key = [](const GraphSample& s) { return sample_to_json(s).dump(); };
  std::multiset<std::string> a, b;
  for (const auto& s : merged) a.insert(key(s));
  for (const auto& s : loc.samples) b.insert(key(s));
  CHECK(a == b);

  CHECK(split(loc, 0.7, 2) == split(loc, 0.7, 2));
  CHECK_THROWS_AS(split(loc, 1.0, 2), std::invalid_argument);
}

TEST_CASE("clean-label poisoning") {
  const Dataset bin = small(ClassMode::Binary, 250);
  CHECK(bin.size() == 500);
  auto shift = [](const GraphSample& s) {
    Tensor f = s.features;
    for (double& v : f.storage()) v += 0.01;
    return f;
  };
  CHECK(poison_dataset(bin, shift, 0, 0.0, 4) == bin);

  const Dataset p = poison_dataset(bin, shift, 0, 0.10, 4);
  CHECK(p.poisoned_count() == 50);
  CHECK(label_texts(p) == label_texts(bin));
  std::size_t changed = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(p.samples[i].adjacency == bin.samples[i].adjacency);
    CHECK(p.samples[i].label == bin.samples[i].label);
    if (p.provenance[i] == Provenance::Poisoned) {
      CHECK(p.samples[i].label.class_index == 0);
      CHECK_FALSE(p.samples[i].features == bin.samples[i].features);
      ++changed;
    } else {
      CHECK(p.samples[i].features == bin.samples[i].features);
    }
  }
  CHECK(changed == 50);
  CHECK_THROWS_AS(poison_dataset(bin, shift, 0, 0.6, 4), std::invalid_argument);
  CHECK_THROWS_AS(poison_dataset(bin, shift, 5, 0.1, 4), std::invalid_argument);
}

TEST_CASE("sample validation") {
  Tensor adj = Tensor::matrix(2, 2);
  adj(0, 1) = 1.0;
  CHECK_THROWS_AS(make_sample(Tensor::matrix(2, kFeatureCount), adj, {}), std::invalid_argument);
  adj(1, 0) = 1.0;
  CHECK_NOTHROW(make_sample(Tensor::matrix(2, kFeatureCount), adj, {}));
  CHECK_THROWS_AS(make_sample(Tensor::matrix(2, 3), adj, {}), std::invalid_argument);
  Tensor bad = Tensor::matrix(2, kFeatureCount);
  bad[0] = std::nan("");
  CHECK_THROWS_AS(make_sample(bad, adj, {}), std::invalid_argument);
}

TEST_CASE("dataset save and load") {
  const Dataset loc = small(ClassMode::Localization, 3);
  const auto shift = [](const GraphSample& s) {
    Tensor f = s.features;
    f[0] += 1.0 / 3.0;
    return f;
  };
  const Dataset p = poison_dataset(loc, shift, 0, 0.05, 1);
  const auto path = temp_file("feederclip_ds_test.jsonl");
  save_dataset(p, path);
  const Dataset back = load_dataset(path);
  CHECK(back == p);
  CHECK(back.class_set.texts() == p.class_set.texts());

  // Drop the last sample line.
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  in.close();
  const auto cut = temp_file("feederclip_ds_truncated.jsonl");
  {
    std::ofstream out(cut);
    for (std::size_t i = 0; i + 1 < lines.size(); ++i) out << lines[i] << '\n';
    out << lines.back().substr(0, lines.back().size() / 2) << '\n';
  }
  try {
    load_dataset(cut);
    FAIL("expected a parse error");
  } catch (const DatasetParseError& e) {
    CHECK(e.line() == lines.size());
  }
  std::filesystem::remove(path);
  std::filesystem::remove(cut);
}
