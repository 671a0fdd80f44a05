#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "feederclip/trainer.hpp"

using namespace feederclip;

namespace {

Tensor random_unit_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor t = Tensor::matrix(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double n = 0.0;
    for (double& v : t.row_span(r)) {
      v = d(rng);
      n += v * v;
    }
    for (double& v : t.row_span(r)) v /= std::sqrt(n);
  }
  return t;
}

struct Binary {
  Dataset train, test;
};

// 167 per class; the 90-10 split leaves 300 for training.
const Binary& binary() {
  static const Binary data = [] {
    const BusNetwork net = build_synthetic_feeder(30, 1);
    DatasetOptions o;
    o.mode = ClassMode::Binary;
    o.n_per_class = 167;
    auto [train, test] = split(build_dataset(net, VoltVarCurve::standard(), o, 21), 0.9, 22);
    return Binary{std::move(train), std::move(test)};
  }();
  return data;
}

double accuracy(const ClipModel& model, const Dataset& data) {
  const auto pred = predict(model, data);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hit += pred[i] == data.samples[i].label.class_index;
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

}  // namespace

TEST_CASE("info nce with one pair is zero") {
  const Tensor g = random_unit_rows(1, 5, 1), t = random_unit_rows(1, 5, 2);
  CHECK(info_nce_loss(g, t, 0.07, {0}) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("info nce closed form") {
  for (std::size_t b : {2u, 3u, 6u}) {
    for (double s : {0.9, 0.2, -0.4}) {
      const double tau = 0.1;
      Tensor g = Tensor::matrix(b, 2 * b), t = Tensor::matrix(b, 2 * b);
      std::vector<std::size_t> labels;
      for (std::size_t i = 0; i < b; ++i) {
        g(i, i) = 1.0;
        t(i, i) = s;
        t(i, b + i) = std::sqrt(1.0 - s * s);
        labels.push_back(i);
      }
      const double e = std::exp(s / tau);
      const double expected = -std::log(e / (e + static_cast<double>(b - 1)));
      CHECK(std::abs(info_nce_loss(g, t, tau, labels) - expected) < 1e-12);
    }
  }
}

TEST_CASE("info nce is symmetric and non-negative") {
  const Tensor g = random_unit_rows(6, 8, 3), t = random_unit_rows(6, 8, 4);
  const std::vector<std::size_t> labels{0, 1, 2, 3, 1, 4};
  const double a = info_nce_loss(g, t, 0.2, labels);
  CHECK(std::abs(a - info_nce_loss(t, g, 0.2, labels)) < 1e-12);
  CHECK(a >= -1e-9);
}

TEST_CASE("shared labels are not negatives of each other") {
  const Tensor g = random_unit_rows(2, 4, 5);
  CHECK(info_nce_loss(g, g, 0.07, {3, 3}) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("info nce rejects rows that are not unit norm") {
  Tensor g = random_unit_rows(3, 4, 6);
  const Tensor t = random_unit_rows(3, 4, 7);
  g(1, 2) += 0.1;
  CHECK_THROWS_AS(info_nce_loss(g, t, 0.07, {0, 1, 2}), std::invalid_argument);
}

TEST_CASE("tape info nce matches the plain version") {
  const Tensor g = random_unit_rows(4, 6, 8), t = random_unit_rows(4, 6, 9);
  Tape tape;
  Var lt = tape.constant(Tensor::scalar(std::log(0.07)));
  const double v =
      info_nce_loss(tape.constant(g), tape.constant(t), lt, {0, 1, 2, 3}).value().item();
  CHECK(std::abs(v - info_nce_loss(g, t, 0.07, {0, 1, 2, 3})) < 1e-12);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

struct Trained {
  ClipModel model;
  TrainLog log;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained out;
    out.model = train_clean(binary().train, TrainConfig{}, &out.log);
    return out;
  }();
  return t;
}

TEST_CASE("binary training reaches the accuracy floor") {
  REQUIRE(binary().train.size() == 300);
  const auto& [model, log] = trained();
  REQUIRE(log.epoch_loss.size() == 30);
  CHECK(log.epoch_loss.back() < log.epoch_loss.front());
  const double acc = accuracy(model, binary().test);
  MESSAGE("binary test accuracy " << acc);
  CHECK(acc >= 0.80);
  CHECK(model.tau() >= kMinTemperature);
  CHECK(model.tau() <= kMaxTemperature);
}

TEST_CASE("held-out normal samples are classified as normal") {
  const ClipModel& model = trained().model;
  std::size_t normal = 0, normal_hit = 0;
  for (const auto& s : binary().test.samples) {
    if (s.label.kind != LabelKind::NoFault) continue;
    ++normal;
    normal_hit += classify(model, s).class_index == 0;
  }
  CHECK(static_cast<double>(normal_hit) >= 0.8 * static_cast<double>(normal));
}

TEST_CASE("singleton class text always wins") {
  for (const auto& s : binary().test.samples) {
    CHECK(classify(trained().model, s, {"anything at all"}).class_index == 0);
  }
}

TEST_CASE("prediction ignores the temperature") {
  ClipModel hot = trained().model;
  hot.temperature.at("log_temperature")[0] = 0.0;
  CHECK(predict(hot, binary().test) == predict(trained().model, binary().test));
}

TEST_CASE("scores are cosine similarities") {
  const auto c = classify(trained().model, binary().test.samples[0]);
  REQUIRE(c.scores.size() == 2);
  for (double s : c.scores) CHECK(std::abs(s) <= 1.0 + 1e-12);
  CHECK(c.class_index == argmax_lowest(c.scores));
}

TEST_CASE("model checkpoint round trip") {
  const ClipModel& model = trained().model;
  const auto dir = std::filesystem::temp_directory_path() / "feederclip_model_test";
  model.save(dir);
  const ClipModel back = ClipModel::load(dir);
  CHECK(predict(back, binary().test) == predict(model, binary().test));
  CHECK(back.graph_encoder.params.same_parameters(model.graph_encoder.params));
  CHECK(back.log_temperature() == model.log_temperature());
  std::filesystem::remove_all(dir);
}

TEST_CASE("training is deterministic") {
  TrainConfig cfg;
  cfg.epochs = 3;
  const ClipModel a = train_clean(binary().train, cfg);
  const ClipModel b = train_clean(binary().train, cfg);
  CHECK(a.graph_encoder.params.same_parameters(b.graph_encoder.params));
  CHECK(a.text_encoder.params.same_parameters(b.text_encoder.params));
  CHECK(a.temperature.same_parameters(b.temperature));
  cfg.seed = 1;
  const ClipModel c = train_clean(binary().train, cfg);
  CHECK_FALSE(a.graph_encoder.params.same_parameters(c.graph_encoder.params));
}

TEST_CASE("argmax ties go to the lowest index") {
  CHECK(argmax_lowest({0.1, 0.3, 0.3}) == 1);
  CHECK(argmax_lowest({-1.0}) == 0);
}
