#include "feederclip/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>

namespace feederclip {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMatrix>;

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

LatentEmbedding first_row(const Tensor& t) {
  LatentEmbedding e;
  auto row = t.row_span(0);
  e.vector.assign(row.begin(), row.end());
  return e;
}

}  // namespace

double LatentEmbedding::norm() const {
  double sq = 0.0;
  for (double v : vector) sq += v * v;
  return std::sqrt(sq);
}

double LatentEmbedding::dot(const LatentEmbedding& other) const {
  if (other.vector.size() != vector.size()) {
    throw std::invalid_argument("LatentEmbedding::dot: dimension mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < vector.size(); ++i) acc += vector[i] * other.vector[i];
  return acc;
}

Tensor normalize_adjacency(const Tensor& adjacency) {
  if (adjacency.rank() != 2 || adjacency.rows() != adjacency.cols()) {
    throw std::invalid_argument("normalize_adjacency: expected a square matrix, got " +
                                shape_string(adjacency.shape()));
  }
  const std::size_t n = adjacency.rows();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (adjacency(i, j) != adjacency(j, i)) {
        throw std::invalid_argument("normalize_adjacency: matrix is not symmetric");
      }
    }
  }
  Tensor out = adjacency;
  for (std::size_t i = 0; i < n; ++i) out(i, i) += 1.0;
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double degree = 0.0;
    for (std::size_t j = 0; j < n; ++j) degree += out(i, j);
    inv_sqrt[i] = 1.0 / std::sqrt(degree);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) *= inv_sqrt[i] * inv_sqrt[j];
  }
  return out;
}

Tensor glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.storage()) v = dist(rng);
  return t;
}

Var bind_parameter(Tape& tape, const ParameterStore& store, const std::string& name,
                   bool trainable) {
  return trainable ? tape.parameter(store, name) : tape.constant(store.at(name));
}

// ---------------------------------------------------------------------------

FeatureNormalization FeatureNormalization::identity(std::size_t columns) {
  return {std::vector<double>(columns, 0.0), std::vector<double>(columns, 1.0)};
}

FeatureNormalization FeatureNormalization::fit(const std::vector<const Tensor*>& features) {
  if (features.empty()) throw std::invalid_argument("FeatureNormalization::fit: no samples");
  const std::size_t cols = features.front()->cols();
  std::vector<double> sum(cols, 0.0), sq(cols, 0.0);
  double count = 0.0;
  for (const Tensor* f : features) {
    if (f->cols() != cols) {
      throw std::invalid_argument("FeatureNormalization::fit: inconsistent column count");
    }
    for (std::size_t r = 0; r < f->rows(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        sum[c] += (*f)(r, c);
        sq[c] += (*f)(r, c) * (*f)(r, c);
      }
      count += 1.0;
    }
  }
  FeatureNormalization out;
  out.shift.resize(cols);
  out.scale.resize(cols);
  for (std::size_t c = 0; c < cols; ++c) {
    const double mean = sum[c] / count;
    const double var = std::max(sq[c] / count - mean * mean, 0.0);
    out.shift[c] = mean;
    // A constant column (e.g. no DER anywhere) is only centred.
    out.scale[c] = std::sqrt(var) > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return out;
}

Tensor FeatureNormalization::apply(const Tensor& features) const {
  if (features.cols() != shift.size()) {
    throw std::invalid_argument("FeatureNormalization: expected " + std::to_string(shift.size()) +
                                " columns, got shape " + shape_string(features.shape()));
  }
  Tensor out = features;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = (out(r, c) - shift[c]) / scale[c];
  }
  return out;
}

Var normalize_features(Tape& tape, const FeatureNormalization& norm, Var features) {
  const Tensor& raw = features.value();
  const std::size_t cols = norm.shift.size();
  if (raw.rank() != 2 || raw.cols() != cols) {
    throw std::invalid_argument("normalize_features: expected " + std::to_string(cols) +
                                " columns, got shape " + shape_string(raw.shape()));
  }
  Tensor shift = Tensor::matrix(1, cols);
  Tensor inv_scale = Tensor::matrix(raw.rows(), cols);
  for (std::size_t c = 0; c < cols; ++c) shift[c] = -norm.shift[c];
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) inv_scale(r, c) = 1.0 / norm.scale[c];
  }
  return mul(add(features, tape.constant(std::move(shift))), tape.constant(std::move(inv_scale)));
}

GraphEncoder GraphEncoder::init(const GraphEncoderConfig& config, std::uint64_t seed) {
  if (config.features == 0 || config.hidden == 0 || config.latent == 0) {
    throw std::invalid_argument("GraphEncoder: dimensions must be positive");
  }
  GraphEncoder enc;
  enc.config = config;
  enc.normalization = FeatureNormalization::identity(config.features);
  Rng rng(derive_seed(seed, {0x9c4}));
  enc.params.add("gcn1", glorot_uniform(config.features, config.hidden, rng));
  enc.params.add("gcn2", glorot_uniform(config.hidden, config.hidden, rng));
  enc.params.add("proj_w", glorot_uniform(config.hidden, config.latent, rng));
  enc.params.add("proj_b", Tensor::matrix(1, config.latent));
  return enc;
}

nlohmann::json GraphEncoder::to_json() const {
  return {{"config",
           {{"features", config.features}, {"hidden", config.hidden}, {"latent", config.latent}}},
          {"normalization", {{"shift", normalization.shift}, {"scale", normalization.scale}}},
          {"params", params.to_json()}};
}

GraphEncoder GraphEncoder::from_json(const nlohmann::json& j) {
  GraphEncoder enc;
  const auto& c = j.at("config");
  enc.config = {c.at("features").get<std::size_t>(), c.at("hidden").get<std::size_t>(),
                c.at("latent").get<std::size_t>()};
  enc.normalization.shift = j.at("normalization").at("shift").get<std::vector<double>>();
  enc.normalization.scale = j.at("normalization").at("scale").get<std::vector<double>>();
  enc.params = ParameterStore::from_json(j.at("params"));
  const GraphEncoder fresh = init(enc.config, 0);
  for (const auto& name : fresh.params.names()) {
    if (!enc.params.contains(name) || !enc.params.at(name).same_shape(fresh.params.at(name))) {
      throw std::invalid_argument("graph encoder checkpoint: missing or misshapen '" + name + "'");
    }
  }
  if (enc.normalization.shift.size() != enc.config.features ||
      enc.normalization.scale.size() != enc.config.features) {
    throw std::invalid_argument("graph encoder checkpoint: normalization size mismatch");
  }
  return enc;
}

GraphBatch GraphBatch::from_samples(const std::vector<const GraphSample*>& samples) {
  if (samples.empty()) throw std::invalid_argument("GraphBatch: empty batch");
  GraphBatch batch;
  batch.nodes = samples.front()->nodes();
  const std::size_t cols = samples.front()->features.cols();
  batch.features = Tensor::matrix(samples.size() * batch.nodes, cols);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const GraphSample& s = *samples[b];
    if (s.nodes() != batch.nodes || s.features.cols() != cols) {
      throw std::invalid_argument("GraphBatch: sample " + std::to_string(b) + " has shape " +
                                  shape_string(s.features.shape()) + ", batch expects " +
                                  std::to_string(batch.nodes) + "x" + std::to_string(cols));
    }
    std::copy(s.features.storage().begin(), s.features.storage().end(),
              batch.features.storage().begin() + static_cast<long>(b * batch.nodes * cols));
    // Consecutive samples of one feeder share their topology; reuse the
    // normalized matrix when it repeats.
    if (b > 0 && s.adjacency == batch.adjacency.back()) {
      batch.adjacency.push_back(batch.adjacency.back());
      batch.propagation.push_back(batch.propagation.back());
    } else {
      batch.adjacency.push_back(s.adjacency);
      batch.propagation.push_back(normalize_adjacency(s.adjacency));
    }
  }
  return batch;
}

std::vector<const Tensor*> GraphBatch::propagation_blocks() const {
  std::vector<const Tensor*> out;
  for (const Tensor& t : propagation) out.push_back(&t);
  return out;
}

std::vector<const Tensor*> GraphBatch::adjacency_blocks() const {
  std::vector<const Tensor*> out;
  for (const Tensor& t : adjacency) out.push_back(&t);
  return out;
}

GraphEncoding encode_graph_batch(Tape& tape, const GraphEncoder& encoder, const GraphBatch& batch,
                                 Var raw_features, bool trainable) {
  if (!raw_features.value().same_shape(batch.features)) {
    throw std::invalid_argument("encode_graph_batch: features of shape " +
                                shape_string(raw_features.shape()) + " for batch of shape " +
                                shape_string(batch.features.shape()));
  }
  Var x = normalize_features(tape, encoder.normalization, raw_features);

  // Copies on the tape so the graph outlives a batch that goes out of scope
  // before backward(). Tape nodes never move.
  std::vector<const Tensor*> blocks;
  for (std::size_t g = 0; g < batch.graphs(); ++g) {
    if (g > 0 && batch.propagation[g] == batch.propagation[g - 1]) {
      blocks.push_back(blocks.back());
    } else {
      blocks.push_back(&tape.value(tape.constant(batch.propagation[g])));
    }
  }
  Var w1 = bind_parameter(tape, encoder.params, "gcn1", trainable);
  Var w2 = bind_parameter(tape, encoder.params, "gcn2", trainable);
  Var pw = bind_parameter(tape, encoder.params, "proj_w", trainable);
  Var pb = bind_parameter(tape, encoder.params, "proj_b", trainable);

  Var h1 = relu(block_propagate(blocks, matmul(x, w1)));
  Var h2 = relu(block_propagate(blocks, matmul(h1, w2)));
  Var pooled = segment_mean_rows(h2, batch.nodes);
  Var projected = add(matmul(pooled, pw), pb);
  return {l2_normalize_rows(projected), h2};
}

std::pair<LatentEmbedding, Tensor> encode_graph(const GraphEncoder& encoder,
                                                const GraphSample& sample) {
  const GraphBatch batch = GraphBatch::from_samples({&sample});
  Tape tape;
  const GraphEncoding enc =
      encode_graph_batch(tape, encoder, batch, tape.constant(batch.features), false);
  return {first_row(enc.embeddings.value()), enc.node_states.value()};
}

Tensor reconstruction_logits(const Tensor& node_states) {
  Tensor out = Tensor::matrix(node_states.rows(), node_states.rows());
  Eigen::Map<RowMatrix>(out.storage().data(), out.rows(), out.cols()).noalias() =
      ConstView(node_states.storage().data(), node_states.rows(), node_states.cols()) *
      ConstView(node_states.storage().data(), node_states.rows(), node_states.cols()).transpose();
  return out;
}

Var adjacency_reconstruction_loss(Var node_states, const std::vector<const Tensor*>& adjacency) {
  const Tensor& z = node_states.value();
  if (adjacency.empty()) throw std::invalid_argument("adjacency_reconstruction_loss: no graphs");
  std::size_t total = 0;
  for (const Tensor* a : adjacency) total += a->rows();
  if (z.rank() != 2 || total != z.rows()) {
    throw std::invalid_argument("adjacency_reconstruction_loss: node states of shape " +
                                shape_string(z.shape()) + " for graphs covering " +
                                std::to_string(total) + " nodes");
  }
  const std::size_t h = z.cols();
  const double graphs = static_cast<double>(adjacency.size());
  // grad_blocks[g] holds dLoss/dLogits for graph g (symmetric).
  std::vector<Tensor> grad_blocks;
  grad_blocks.reserve(adjacency.size());
  double loss = 0.0;
  std::size_t offset = 0;
  for (const Tensor* a : adjacency) {
    const std::size_t n = a->rows();
    Tensor zg = Tensor::matrix(n, h);
    std::copy(z.storage().begin() + static_cast<long>(offset * h),
              z.storage().begin() + static_cast<long>((offset + n) * h), zg.storage().begin());
    const Tensor logits = reconstruction_logits(zg);
    double positives = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) positives += (i == j || (*a)(i, j) != 0.0) ? 1.0 : 0.0;
    }
    const double entries = static_cast<double>(n * n);
    // A complete graph has no negatives; fall back to unweighted BCE.
    const double pos_weight = positives < entries ? (entries - positives) / positives : 1.0;
    const double denom = entries * graphs;
    Tensor grad = Tensor::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double target = (i == j || (*a)(i, j) != 0.0) ? 1.0 : 0.0;
        const double w = target > 0.0 ? pos_weight : 1.0;
        const double x = logits(i, j);
        loss += w * (std::max(x, 0.0) - x * target + std::log1p(std::exp(-std::abs(x)))) / denom;
        grad(i, j) = w * (stable_sigmoid(x) - target) / denom;
      }
    }
    grad_blocks.push_back(std::move(grad));
    offset += n;
  }
  return node_states.tape().record(
      Tensor::scalar(loss), {node_states},
      [node_states, grad_blocks = std::move(grad_blocks)](Tape& t, const Tensor& g,
                                                          const Tensor&) {
        const Tensor& z = t.value(node_states);
        Tensor& gz = t.grad(node_states);
        const std::size_t h = z.cols();
        std::size_t offset = 0;
        for (const Tensor& gb : grad_blocks) {
          const std::size_t n = gb.rows();
          Eigen::Map<RowMatrix>(gz.storage().data() + offset * h, n, h).noalias() +=
              (2.0 * g[0]) * ConstView(gb.storage().data(), n, n) *
              ConstView(z.storage().data() + offset * h, n, h);
          offset += n;
        }
      });
}

Var adjacency_reconstruction_loss(Var node_states, const Tensor& adjacency) {
  return adjacency_reconstruction_loss(node_states, std::vector<const Tensor*>{&adjacency});
}

// ---------------------------------------------------------------------------

std::vector<std::string> split_tokens(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

TextEncoder TextEncoder::init(const std::vector<std::string>& texts,
                              const TextEncoderConfig& config, std::uint64_t seed) {
  if (config.embedding == 0 || config.latent == 0) {
    throw std::invalid_argument("TextEncoder: dimensions must be positive");
  }
  TextEncoder enc;
  enc.config = config;
  enc.vocabulary.push_back(kUnknownToken);
  for (const auto& text : texts) {
    for (const auto& tok : split_tokens(text)) {
      if (std::find(enc.vocabulary.begin(), enc.vocabulary.end(), tok) == enc.vocabulary.end()) {
        enc.vocabulary.push_back(tok);
      }
    }
  }
  Rng rng(derive_seed(seed, {0x7e47}));
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor table = Tensor::matrix(enc.vocabulary.size(), config.embedding);
  for (double& v : table.storage()) v = normal(rng);
  enc.params.add("embedding", std::move(table));
  enc.params.add("mlp_w", glorot_uniform(config.embedding, config.latent, rng));
  enc.params.add("mlp_b", Tensor::matrix(1, config.latent));
  return enc;
}

std::vector<std::size_t> TextEncoder::tokenize(const std::string& text) const {
  const auto tokens = split_tokens(text);
  if (tokens.empty()) throw std::invalid_argument("TextEncoder: empty text");
  std::vector<std::size_t> out;
  for (const auto& tok : tokens) {
    auto it = std::find(vocabulary.begin(), vocabulary.end(), tok);
    out.push_back(it == vocabulary.end() ? 0 : static_cast<std::size_t>(it - vocabulary.begin()));
  }
  return out;
}

nlohmann::json TextEncoder::to_json() const {
  return {{"config", {{"embedding", config.embedding}, {"latent", config.latent}}},
          {"vocabulary", vocabulary},
          {"params", params.to_json()}};
}

TextEncoder TextEncoder::from_json(const nlohmann::json& j) {
  TextEncoder enc;
  enc.config = {j.at("config").at("embedding").get<std::size_t>(),
                j.at("config").at("latent").get<std::size_t>()};
  enc.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  enc.params = ParameterStore::from_json(j.at("params"));
  if (enc.vocabulary.empty() || enc.vocabulary.front() != kUnknownToken) {
    throw std::invalid_argument("text encoder checkpoint: vocabulary must start with " +
                                std::string(kUnknownToken));
  }
  const auto expect = [&](const char* name, std::size_t rows, std::size_t cols) {
    if (!enc.params.contains(name) || enc.params.at(name).shape() != Shape{rows, cols}) {
      throw std::invalid_argument(std::string("text encoder checkpoint: missing or misshapen '") +
                                  name + "'");
    }
  };
  expect("embedding", enc.vocabulary.size(), enc.config.embedding);
  expect("mlp_w", enc.config.embedding, enc.config.latent);
  expect("mlp_b", 1, enc.config.latent);
  return enc;
}

Var encode_texts(Tape& tape, const TextEncoder& encoder, const std::vector<std::string>& texts,
                 bool trainable) {
  if (texts.empty()) throw std::invalid_argument("encode_texts: no texts");
  std::vector<std::vector<std::size_t>> indices;
  indices.reserve(texts.size());
  for (const auto& t : texts) indices.push_back(encoder.tokenize(t));
  Var table = bind_parameter(tape, encoder.params, "embedding", trainable);
  Var w = bind_parameter(tape, encoder.params, "mlp_w", trainable);
  Var b = bind_parameter(tape, encoder.params, "mlp_b", trainable);
  Var bag = tanh(embedding_mean(table, indices));
  return l2_normalize_rows(add(matmul(bag, w), b));
}

LatentEmbedding encode_text(const TextEncoder& encoder, const std::string& text) {
  Tape tape;
  return first_row(encode_texts(tape, encoder, {text}, false).value());
}

}  // namespace feederclip
