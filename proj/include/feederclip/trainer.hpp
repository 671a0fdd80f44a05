#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "feederclip/dataset.hpp"
#include "feederclip/encoders.hpp"

namespace feederclip {

inline constexpr double kInitialTemperature = 0.07;
inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 1.0;

/// Graph encoder, text encoder and learnable temperature, plus the class set
/// whose texts the model scores against.
struct ClipModel {
  GraphEncoder graph_encoder;
  TextEncoder text_encoder;
  ParameterStore temperature;  // "log_temperature", 1x1
  ClassSet class_set;

  double log_temperature() const { return temperature.at("log_temperature")[0]; }
  double tau() const;

  void save(const std::filesystem::path& dir) const;
  static ClipModel load(const std::filesystem::path& dir);
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  double lambda_recon = 0.1;
  double lambda_bd = 1.0;
  std::uint64_t seed = 0;
  GraphEncoderConfig graph;
  TextEncoderConfig text;

  void validate() const;
};

/// Symmetric CLIP loss on unit-norm rows. Pairs sharing a label are removed
/// from each other's softmax denominators.
Var info_nce_loss(Var graph_embeddings, Var text_embeddings, Var log_temperature,
                  const std::vector<std::size_t>& labels);
double info_nce_loss(const Tensor& graph_embeddings, const Tensor& text_embeddings, double tau,
                     const std::vector<std::size_t>& labels);

struct TrainLog {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

/// Fresh model: encoders initialized from `config.seed`, graph feature
/// normalization fitted on `train`.
ClipModel init_model(const Dataset& train, const TrainConfig& config);

/// One pass over `data` in a seeded shuffle order; batches of one sample are
/// skipped. Returns the mean batch loss.
double train_epoch(ClipModel& model, const Dataset& data, const TrainConfig& config,
                   std::size_t epoch);

ClipModel train_clean(const Dataset& train, const TrainConfig& config, TrainLog* log = nullptr);

struct Classification {
  std::size_t class_index = 0;
  std::vector<double> scores;
};

/// Cosine similarity against each text; argmax, ties to the lowest index.
Classification classify(const ClipModel& model, const GraphSample& sample,
                        const std::vector<std::string>& class_texts);
Classification classify(const ClipModel& model, const GraphSample& sample);

std::size_t argmax_lowest(const std::vector<double>& scores);

/// Batched prediction against the model's class texts. `features`, when given,
/// replaces each sample's features (same order).
std::vector<std::size_t> predict(const ClipModel& model, const std::vector<const GraphSample*>& samples,
                                 const std::vector<const Tensor*>& features = {});
std::vector<std::size_t> predict(const ClipModel& model, const Dataset& data);

}  // namespace feederclip
