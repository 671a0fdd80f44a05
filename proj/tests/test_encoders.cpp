#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "feederclip/dataset.hpp"
#include "feederclip/encoders.hpp"

using namespace feederclip;

namespace {

Tensor path_adjacency(std::size_t n) {
  Tensor a = Tensor::matrix(n, n);
  for (std::size_t i = 1; i < n; ++i) a(i, i - 1) = a(i - 1, i) = 1.0;
  return a;
}

GraphSample random_sample(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor adj = Tensor::matrix(n, n);
  for (std::size_t i = 1; i < n; ++i) {
    const std::size_t p = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    adj(i, p) = adj(p, i) = 1.0;
  }
  Tensor x = Tensor::matrix(n, kFeatureCount);
  std::normal_distribution<double> d(0.0, 1.0);
  for (double& v : x.storage()) v = d(rng);
  return make_sample(x, adj, {});
}

}  // namespace

TEST_CASE("normalized adjacency") {
  CHECK(normalize_adjacency(Tensor::matrix(1, 1)).storage() == std::vector<double>{1.0});
  const Tensor two = normalize_adjacency(path_adjacency(2));
  for (double v : two.storage()) CHECK(std::abs(v - 0.5) < 1e-15);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    // Row sums can exceed 1 at a hub; the spectrum is what stays in (-1, 1].
    const Tensor a = normalize_adjacency(random_sample(3 + seed, seed).adjacency);
    const std::size_t n = a.rows();
    Eigen::MatrixXd m(n, n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        CHECK(a(r, c) == a(c, r));
        m(static_cast<long>(r), static_cast<long>(c)) = a(r, c);
      }
    }
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues();
    CHECK(ev.maxCoeff() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ev.minCoeff() > -1.0);
  }
}

TEST_CASE("graph embeddings are unit norm and deterministic") {
  const GraphEncoder enc = GraphEncoder::init({}, 5);
  const GraphSample s = random_sample(12, 1);
  const auto [e1, h1] = encode_graph(enc, s);
  const auto [e2, h2] = encode_graph(enc, s);
  CHECK(std::abs(e1.norm() - 1.0) < 1e-9);
  CHECK(e1 == e2);
  CHECK(h1 == h2);
  CHECK(h1.rows() == 12);
  CHECK(h1.cols() == enc.config.hidden);
}

TEST_CASE("graph embedding is invariant to node permutation") {
  GraphEncoder enc = GraphEncoder::init({}, 8);
  const GraphSample fit_on = random_sample(10, 3);
  enc.normalization = FeatureNormalization::fit({&fit_on.features});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const GraphSample s = random_sample(15, 100 + seed);
    std::vector<std::size_t> perm(15);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor x = s.features, a = s.adjacency;
    for (std::size_t i = 0; i < 15; ++i) {
      for (std::size_t f = 0; f < kFeatureCount; ++f) x(i, f) = s.features(perm[i], f);
      for (std::size_t j = 0; j < 15; ++j) a(i, j) = s.adjacency(perm[i], perm[j]);
    }
    const auto e = encode_graph(enc, s).first;
    const auto p = encode_graph(enc, make_sample(x, a, {})).first;
    for (std::size_t k = 0; k < e.vector.size(); ++k) {
      CHECK(std::abs(e.vector[k] - p.vector[k]) < 1e-9);
    }
  }
}

TEST_CASE("batched encoding matches single encoding") {
  const GraphEncoder enc = GraphEncoder::init({}, 2);
  const GraphSample a = random_sample(9, 1), b = random_sample(9, 2);
  const GraphBatch batch = GraphBatch::from_samples({&a, &b});
  Tape tape;
  const auto out = encode_graph_batch(tape, enc, batch, tape.constant(batch.features), false);
  const auto ea = encode_graph(enc, a).first, eb = encode_graph(enc, b).first;
  for (std::size_t k = 0; k < ea.vector.size(); ++k) {
    CHECK(std::abs(out.embeddings.value()(0, k) - ea.vector[k]) < 1e-12);
    CHECK(std::abs(out.embeddings.value()(1, k) - eb.vector[k]) < 1e-12);
  }
}

TEST_CASE("feature normalization") {
  Tensor x({3, 2}, {1.0, 10.0, 2.0, 10.0, 3.0, 10.0});
  const auto n = FeatureNormalization::fit({&x});
  CHECK(n.shift[0] == doctest::Approx(2.0));
  CHECK(n.scale[0] == doctest::Approx(std::sqrt(2.0 / 3.0)));
  CHECK(n.scale[1] == 1.0);  // constant column keeps unit scale
  const Tensor y = n.apply(x);
  CHECK(y(1, 0) == doctest::Approx(0.0));
  CHECK(y(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("graph encoder checkpoint round trip") {
  GraphEncoder enc = GraphEncoder::init({4, 8, 6}, 3);
  const GraphSample fit_on = random_sample(7, 4);
  enc.normalization = FeatureNormalization::fit({&fit_on.features});
  const GraphEncoder back = GraphEncoder::from_json(enc.to_json());
  CHECK(back.params.same_parameters(enc.params));
  CHECK(back.normalization == enc.normalization);
  const GraphSample s = random_sample(7, 9);
  CHECK(encode_graph(back, s).first == encode_graph(enc, s).first);
}

TEST_CASE("reconstruction loss") {
  // Path 0-1-2: Gram entries >= 30 on A + I and -30 on the (0, 2) pair.
  const double a = std::sqrt(60.0);
  const double c = std::cos(std::acos(-1.0) / 3.0), sn = std::sin(std::acos(-1.0) / 3.0);
  Tape tape;
  Var z = tape.constant(Tensor({3, 2}, {a * c, a * sn, a, 0.0, a * c, -a * sn}));
  const Tensor sat = reconstruction_logits(z.value());
  CHECK(sat(0, 2) == doctest::Approx(-30.0));
  CHECK(sat(0, 1) == doctest::Approx(30.0));
  CHECK(adjacency_reconstruction_loss(z, path_adjacency(3)).value().item() < 1e-9);

  Rng rng(12);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor h = Tensor::matrix(5, 3);
  for (double& v : h.storage()) v = d(rng);
  const Tensor a5 = random_sample(5, 6).adjacency;
  const Tensor logits = reconstruction_logits(h);
  double pos = 0.0, neg = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(logits(i, j) == logits(j, i));
      ((i == j || a5(i, j) > 0.0) ? pos : neg) += 1.0;
    }
  }
  double brute = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double l = 0.0;
      for (std::size_t k = 0; k < 3; ++k) l += h(i, k) * h(j, k);
      const double p = 1.0 / (1.0 + std::exp(-l));
      const bool positive = i == j || a5(i, j) > 0.0;
      brute += positive ? -(neg / pos) * std::log(p) : -std::log(1.0 - p);
    }
  }
  brute /= 25.0;
  Tape t2;
  CHECK(std::abs(adjacency_reconstruction_loss(t2.constant(h), a5).value().item() - brute) < 1e-12);
}

TEST_CASE("text encoder") {
  const std::vector<std::string> texts{"normal operation no fault", "overvoltage fault in zone 1"};
  const TextEncoder enc = TextEncoder::init(texts, {}, 4);
  CHECK(enc.vocabulary[0] == kUnknownToken);
  CHECK(split_tokens("  a  b\tc ") == std::vector<std::string>{"a", "b", "c"});
  CHECK(enc.tokenize("fault banana")[1] == 0);
  CHECK_THROWS_AS(enc.tokenize("   "), std::invalid_argument);

  const auto e = encode_text(enc, texts[1]);
  CHECK(std::abs(e.norm() - 1.0) < 1e-12);
  CHECK(encode_text(enc, texts[1]) == e);
  CHECK(encode_text(enc, "qq rr ss") == encode_text(enc, kUnknownToken));
  CHECK_FALSE(encode_text(enc, texts[0]) == e);

  const TextEncoder back = TextEncoder::from_json(enc.to_json());
  CHECK(encode_text(back, texts[0]) == encode_text(enc, texts[0]));
}
