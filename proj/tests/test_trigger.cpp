#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "feederclip/trigger.hpp"

using namespace feederclip;

namespace {

const BusNetwork& feeder() {
  static const BusNetwork net = build_synthetic_feeder(30, 1);
  return net;
}

Dataset make_data(ClassMode mode, std::size_t n, std::uint64_t seed) {
  DatasetOptions o;
  o.mode = mode;
  o.n_per_class = n;
  return build_dataset(feeder(), VoltVarCurve::standard(), o, seed);
}

const Dataset& binary_train() {
  static const Dataset d = split(make_data(ClassMode::Binary, 100, 5), 0.9, 6).first;
  return d;
}

TriggerGenerator fresh_generator(double epsilon = 0.05, std::uint64_t seed = 1) {
  TriggerConfig cfg;
  cfg.epsilon = epsilon;
  std::vector<const Tensor*> feats;
  for (const auto& s : binary_train().samples) feats.push_back(&s.features);
  return TriggerGenerator::init(cfg, FeatureNormalization::fit(feats), seed);
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.storage()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

TEST_CASE("zero bound leaves features untouched") {
  const TriggerGenerator gen = fresh_generator(0.0);
  for (const auto& s : binary_train().samples) {
    const auto t = apply_trigger(gen, s, false);
    CHECK(t.x_t == s.features);
    CHECK(max_abs(t.delta) == 0.0);
  }
}

TEST_CASE("trigger magnitude never exceeds the bound") {
  TriggerGenerator gen = fresh_generator(0.05, 3);
  // Inflate the decoder so that tanh saturates on some entries.
  for (double& w : gen.params.at("dec_w2").storage()) w *= 50.0;
  Rng rng(99);
  std::normal_distribution<double> d(0.0, 3.0);
  const GraphSample& base = binary_train().samples[0];
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    GraphSample s = base;
    for (double& v : s.features.storage()) v += d(rng);
    const auto t = apply_trigger(gen, s, i % 2 == 0, static_cast<std::uint64_t>(i));
    worst = std::max(worst, max_abs(t.delta));
    Tensor sum = s.features;
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += t.delta[k];
    CHECK(sum == t.x_t);
  }
  CHECK(worst <= 0.05);
  CHECK(worst > 0.04);
}

TEST_CASE("deterministic trigger") {
  const TriggerGenerator gen = fresh_generator();
  const GraphSample& s = binary_train().samples[7];
  const auto a = apply_trigger(gen, s, false), b = apply_trigger(gen, s, false);
  CHECK(a.x_t == b.x_t);
  CHECK(a.triggered().adjacency == s.adjacency);
  CHECK(a.triggered().label == s.label);
  CHECK_FALSE(apply_trigger(gen, s, true, 1).x_t == a.x_t);
  CHECK(apply_trigger(gen, s, true, 1).x_t == apply_trigger(gen, s, true, 1).x_t);
}

TEST_CASE("trigger shape mismatch") {
  const TriggerGenerator gen = fresh_generator();
  GraphSample s = binary_train().samples[0];
  s.features = Tensor::matrix(s.nodes(), 3);
  CHECK_THROWS_AS(apply_trigger(gen, s, false), std::invalid_argument);
}

TEST_CASE("generator checkpoint round trip") {
  const TriggerGenerator gen = fresh_generator(0.05, 11);
  const auto path = std::filesystem::temp_directory_path() / "feederclip_gen_test.json";
  gen.save(path);
  const TriggerGenerator back = TriggerGenerator::load(path);
  CHECK(back.params.same_parameters(gen.params));
  CHECK(back.config.epsilon == gen.config.epsilon);
  const GraphSample& s = binary_train().samples[3];
  CHECK(apply_trigger(back, s, false).x_t == apply_trigger(gen, s, false).x_t);
  std::filesystem::remove(path);
}

TEST_CASE("generator loss without regularizers is the target cross-entropy") {
  const ClipModel model = init_model(binary_train(), TrainConfig{});
  const TriggerGenerator gen = fresh_generator(0.05, 4);
  const std::vector<const GraphSample*> batch{&binary_train().samples[0],
                                              &binary_train().samples[60],
                                              &binary_train().samples[150]};
  const AttackGoal goal = AttackGoal::for_target(model.class_set, 0);
  Tape tape;
  const double loss = generator_loss(tape, model, gen, batch, goal, 0.0, 0.0, nullptr).value().item();

  // One sample at a time: trigger, encode, score against each class text.
  const auto texts = model.class_set.texts();
  double brute = 0.0;
  for (const GraphSample* s : batch) {
    const auto g = encode_graph(model.graph_encoder, apply_trigger(gen, *s, false).triggered()).first;
    std::vector<double> logits;
    for (const auto& t : texts) logits.push_back(g.dot(encode_text(model.text_encoder, t)) / model.tau());
    double z = 0.0;
    for (double l : logits) z += std::exp(l);
    brute += -(logits[goal.target_class] - std::log(z));
  }
  brute /= static_cast<double>(batch.size());
  CHECK(std::abs(loss - brute) < 1e-10);
}

TEST_CASE("regularizers vanish at a zero trigger with a standard latent") {
  const ClipModel model = init_model(binary_train(), TrainConfig{});
  TriggerGenerator gen = fresh_generator(0.05, 4);
  for (const char* name : {"mu_w", "mu_b", "logvar_w", "logvar_b", "dec_w2", "dec_b2"}) {
    gen.params.at(name).fill(0.0);
  }
  const std::vector<const GraphSample*> batch{&binary_train().samples[1],
                                              &binary_train().samples[100]};
  const AttackGoal goal = AttackGoal::for_target(model.class_set, 0);
  Tape t1, t2;
  const double plain = generator_loss(t1, model, gen, batch, goal, 0.0, 0.0, nullptr).value().item();
  const double reg = generator_loss(t2, model, gen, batch, goal, 5.0, 7.0, nullptr).value().item();
  CHECK(plain == reg);
  CHECK_THROWS_AS(generator_loss(t1, model, gen, {}, goal, 0.0, 0.0, nullptr),
                  std::invalid_argument);
}

TEST_CASE("attack goals") {
  const ClassSet loc = ClassSet::make(ClassMode::Localization, feeder(), 4);
  CHECK(AttackGoal::for_target(loc, 0).mode == AttackMode::FalseNegative);
  CHECK(AttackGoal::for_target(loc, 3).mode == AttackMode::LocalizationMisguidance);
  const ClassSet det = ClassSet::make(ClassMode::Detection, feeder());
  CHECK(AttackGoal::for_target(det, 1).mode == AttackMode::FalsePositive);
  CHECK_THROWS_AS(AttackGoal::for_target(det, 3), std::invalid_argument);
  CHECK_THROWS_AS((AttackGoal{0, AttackMode::FalsePositive}.validate(loc)), std::invalid_argument);
  CHECK_THROWS_AS((AttackGoal{2, AttackMode::FalseNegative}.validate(loc)), std::invalid_argument);
  CHECK_THROWS_AS((AttackGoal{1, AttackMode::LocalizationMisguidance}.validate(det)),
                  std::invalid_argument);
  CHECK_NOTHROW((AttackGoal{2, AttackMode::FalsePositive}.validate(loc)));
}

TEST_CASE("poisoning with the generator is clean-label") {
  const TriggerGenerator gen = fresh_generator();
  const Dataset p = poison_dataset(binary_train(), gen, 0, 0.2, 8);
  CHECK(p.poisoned_count() == 36);
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(p.samples[i].label == binary_train().samples[i].label);
    CHECK(p.samples[i].text == binary_train().samples[i].text);
    if (p.provenance[i] == Provenance::Poisoned) {
      Tensor d = p.samples[i].features;
      for (std::size_t k = 0; k < d.size(); ++k) d[k] -= binary_train().samples[i].features[k];
      CHECK(max_abs(d) <= 0.05 + 1e-15);
    }
  }
}

TEST_CASE("zero poison leaves the classifier on the clean trajectory") {
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 17;
  const ClipModel clean = train_clean(binary_train(), cfg);
  const BackdoorResult bd =
      train_backdoor(binary_train(), cfg, AttackGoal::for_target(binary_train().class_set, 0), 0.0,
                     TriggerConfig{});
  const auto dir = std::filesystem::temp_directory_path() / "feederclip_dormancy";
  clean.save(dir / "clean");
  bd.model.save(dir / "backdoor");
  for (const char* f : {"graph_encoder.json", "text_encoder.json", "temperature.json", "classes.json"}) {
    INFO(f);
    CHECK(read_file(dir / "clean" / f) == read_file(dir / "backdoor" / f));
  }
  std::filesystem::remove_all(dir);

  CHECK_THROWS_AS(train_backdoor(binary_train(), cfg,
                                 AttackGoal::for_target(binary_train().class_set, 0), 0.6,
                                 TriggerConfig{}),
                  std::invalid_argument);
}

TEST_CASE("attack reports both predictions") {
  TrainConfig cfg;
  cfg.epochs = 2;
  const BackdoorResult bd = train_backdoor(
      binary_train(), cfg, AttackGoal::for_target(binary_train().class_set, 0), 0.1, TriggerConfig{});
  const GraphSample& s = binary_train().samples[150];
  const AttackOutcome out = attack(bd.model, bd.generator, s);
  CHECK(out.without_trigger.class_index == classify(bd.model, s).class_index);
  CHECK(out.with_trigger.class_index == classify(bd.model, out.triggered.triggered()).class_index);
  CHECK(max_abs(out.triggered.delta) <= 0.05);
  const auto feats = trigger_features(bd.generator, {&s});
  CHECK(feats[0] == out.triggered.x_t);
}
