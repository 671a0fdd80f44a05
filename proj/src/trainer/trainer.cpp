#include "feederclip/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace feederclip {
namespace {

void require_unit_rows(const char* what, const Tensor& t) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double sq = 0.0;
    for (double v : t.row_span(r)) sq += v * v;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
      throw std::invalid_argument(std::string("info_nce_loss: ") + what + " row " +
                                  std::to_string(r) + " has norm " + std::to_string(std::sqrt(sq)));
    }
  }
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

constexpr std::size_t kPredictBatch = 64;

}  // namespace

double ClipModel::tau() const { return std::exp(log_temperature()); }

void ClipModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_json(graph_encoder.to_json(), dir / "graph_encoder.json");
  write_json(text_encoder.to_json(), dir / "text_encoder.json");
  write_json(temperature.to_json(), dir / "temperature.json");
  write_json(class_set.to_json(), dir / "classes.json");
}

ClipModel ClipModel::load(const std::filesystem::path& dir) {
  ClipModel m;
  try {
    m.graph_encoder = GraphEncoder::from_json(read_json(dir / "graph_encoder.json"));
    m.text_encoder = TextEncoder::from_json(read_json(dir / "text_encoder.json"));
    m.temperature = ParameterStore::from_json(read_json(dir / "temperature.json"));
    m.class_set = ClassSet::from_json(read_json(dir / "classes.json"));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint " + dir.string() + ": " + e.what());
  }
  if (!m.temperature.contains("log_temperature")) {
    throw std::runtime_error("checkpoint " + dir.string() + ": missing log_temperature");
  }
  return m;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch_size must be >= 2");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
  if (lambda_recon < 0.0 || lambda_bd < 0.0) {
    throw std::invalid_argument("TrainConfig: loss weights must be >= 0");
  }
}

Var info_nce_loss(Var graph_embeddings, Var text_embeddings, Var log_temperature,
                  const std::vector<std::size_t>& labels) {
  const Tensor& g = graph_embeddings.value();
  const Tensor& t = text_embeddings.value();
  if (g.rank() != 2 || !g.same_shape(t)) {
    throw std::invalid_argument("info_nce_loss: embedding shapes " + shape_string(g.shape()) +
                                " and " + shape_string(t.shape()) + " differ");
  }
  const std::size_t b = g.rows();
  if (b == 0 || labels.size() != b) {
    throw std::invalid_argument("info_nce_loss: need one label per row");
  }
  require_unit_rows("graph embedding", g);
  require_unit_rows("text embedding", t);

  std::vector<unsigned char> mask(b * b, 0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) mask[i * b + j] = i != j && labels[i] == labels[j];
  }
  std::vector<std::size_t> diagonal(b);
  std::iota(diagonal.begin(), diagonal.end(), 0);

  Var inv_tau = exp(scale(log_temperature, -1.0));
  Var logits = scale(matmul(graph_embeddings, transpose(text_embeddings)), inv_tau);
  Var forward = cross_entropy_with_logits(logits, diagonal, mask);
  Var backward = cross_entropy_with_logits(transpose(logits), diagonal, mask);
  return scale(add(forward, backward), 0.5);
}

double info_nce_loss(const Tensor& graph_embeddings, const Tensor& text_embeddings, double tau,
                     const std::vector<std::size_t>& labels) {
  Tape tape;
  return info_nce_loss(tape.constant(graph_embeddings), tape.constant(text_embeddings),
                       tape.constant(Tensor::scalar(std::log(tau))), labels)
      .value()[0];
}

ClipModel init_model(const Dataset& train, const TrainConfig& config) {
  config.validate();
  if (train.size() == 0) throw std::invalid_argument("train_clean: empty training set");
  if (train.class_set.size() < 2) throw std::invalid_argument("train_clean: need >= 2 classes");
  ClipModel model;
  model.class_set = train.class_set;
  model.graph_encoder = GraphEncoder::init(config.graph, derive_seed(config.seed, {1}));
  std::vector<const Tensor*> features;
  for (const auto& s : train.samples) features.push_back(&s.features);
  model.graph_encoder.normalization = FeatureNormalization::fit(features);
  model.text_encoder =
      TextEncoder::init(train.class_set.texts(), config.text, derive_seed(config.seed, {2}));
  model.temperature.add("log_temperature", Tensor::matrix(1, 1, std::log(kInitialTemperature)));
  return model;
}

double train_epoch(ClipModel& model, const Dataset& data, const TrainConfig& config,
                   std::size_t epoch) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(config.seed, {0x5e1ec7, epoch}));
  std::shuffle(order.begin(), order.end(), rng);

  const AdamOptions adam{config.learning_rate};
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
    const std::size_t end = std::min(order.size(), start + config.batch_size);
    if (end - start < 2) continue;
    std::vector<const GraphSample*> samples;
    std::vector<std::string> texts;
    std::vector<std::size_t> labels;
    for (std::size_t i = start; i < end; ++i) {
      const GraphSample& s = data.samples[order[i]];
      samples.push_back(&s);
      texts.push_back(s.text);
      labels.push_back(s.label.class_index);
    }
    const GraphBatch batch = GraphBatch::from_samples(samples);

    Tape tape;
    const GraphEncoding enc =
        encode_graph_batch(tape, model.graph_encoder, batch, tape.constant(batch.features), true);
    Var text = encode_texts(tape, model.text_encoder, texts, true);
    Var log_temp = tape.parameter(model.temperature, "log_temperature");
    Var loss = info_nce_loss(enc.embeddings, text, log_temp, labels);
    if (config.lambda_recon > 0.0) {
      loss = add(loss, scale(adjacency_reconstruction_loss(enc.node_states, batch.adjacency_blocks()),
                             config.lambda_recon));
    }
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw std::runtime_error("training diverged: non-finite loss at epoch " +
                               std::to_string(epoch + 1) + ", batch " +
                               std::to_string(batches + 1));
    }
    tape.backward(loss);
    adam_step(model.graph_encoder.params, tape.gradients(model.graph_encoder.params), adam);
    adam_step(model.text_encoder.params, tape.gradients(model.text_encoder.params), adam);
    adam_step(model.temperature, tape.gradients(model.temperature), adam);
    double& lt = model.temperature.at("log_temperature")[0];
    lt = std::clamp(lt, std::log(kMinTemperature), std::log(kMaxTemperature));
    total += value;
    ++batches;
  }
  return batches == 0 ? 0.0 : total / static_cast<double>(batches);
}

ClipModel train_clean(const Dataset& train, const TrainConfig& config, TrainLog* log) {
  ClipModel model = init_model(train, config);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double loss = train_epoch(model, train, config, epoch);
    if (log) log->epoch_loss.push_back(loss);
  }
  return model;
}

std::size_t argmax_lowest(const std::vector<double>& scores) {
  if (scores.empty()) throw std::invalid_argument("argmax over an empty score vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

Classification classify(const ClipModel& model, const GraphSample& sample,
                        const std::vector<std::string>& class_texts) {
  if (class_texts.empty()) throw std::invalid_argument("classify: no class texts");
  const LatentEmbedding g = encode_graph(model.graph_encoder, sample).first;
  Classification out;
  Tape tape;
  const Tensor text = encode_texts(tape, model.text_encoder, class_texts, false).value();
  for (std::size_t c = 0; c < class_texts.size(); ++c) {
    double s = 0.0;
    for (std::size_t k = 0; k < g.vector.size(); ++k) s += g.vector[k] * text(c, k);
    out.scores.push_back(s);
  }
  out.class_index = argmax_lowest(out.scores);
  return out;
}

Classification classify(const ClipModel& model, const GraphSample& sample) {
  return classify(model, sample, model.class_set.texts());
}

std::vector<std::size_t> predict(const ClipModel& model,
                                 const std::vector<const GraphSample*>& samples,
                                 const std::vector<const Tensor*>& features) {
  if (!features.empty() && features.size() != samples.size()) {
    throw std::invalid_argument("predict: feature override count mismatch");
  }
  Tape text_tape;
  const Tensor text =
      encode_texts(text_tape, model.text_encoder, model.class_set.texts(), false).value();
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += kPredictBatch) {
    const std::size_t end = std::min(samples.size(), start + kPredictBatch);
    std::vector<const GraphSample*> chunk(samples.begin() + static_cast<long>(start),
                                          samples.begin() + static_cast<long>(end));
    GraphBatch batch = GraphBatch::from_samples(chunk);
    if (!features.empty()) {
      const std::size_t cols = batch.features.cols();
      for (std::size_t i = start; i < end; ++i) {
        const Tensor& f = *features[i];
        if (!f.same_shape(samples[i]->features)) {
          throw std::invalid_argument("predict: feature override has shape " +
                                      shape_string(f.shape()));
        }
        std::copy(f.storage().begin(), f.storage().end(),
                  batch.features.storage().begin() +
                      static_cast<long>((i - start) * batch.nodes * cols));
      }
    }
    Tape tape;
    const Tensor emb = encode_graph_batch(tape, model.graph_encoder, batch,
                                          tape.constant(batch.features), false)
                           .embeddings.value();
    for (std::size_t r = 0; r < emb.rows(); ++r) {
      std::vector<double> scores(text.rows(), 0.0);
      for (std::size_t c = 0; c < text.rows(); ++c) {
        for (std::size_t k = 0; k < emb.cols(); ++k) scores[c] += emb(r, k) * text(c, k);
      }
      out.push_back(argmax_lowest(scores));
    }
  }
  return out;
}

std::vector<std::size_t> predict(const ClipModel& model, const Dataset& data) {
  std::vector<const GraphSample*> samples;
  for (const auto& s : data.samples) samples.push_back(&s);
  return predict(model, samples);
}

}  // namespace feederclip
