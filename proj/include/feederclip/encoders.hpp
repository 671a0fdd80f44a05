#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "feederclip/ops.hpp"
#include "feederclip/parameters.hpp"
#include "feederclip/random.hpp"
#include "feederclip/sample.hpp"
#include "feederclip/tape.hpp"

namespace feederclip {

/// Unit-norm vector in the shared graph/text space.
struct LatentEmbedding {
  std::vector<double> vector;

  double norm() const;
  double dot(const LatentEmbedding& other) const;
  friend bool operator==(const LatentEmbedding&, const LatentEmbedding&) = default;
};

/// D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I.
Tensor normalize_adjacency(const Tensor& adjacency);

/// Glorot-uniform matrix, bound sqrt(6 / (rows + cols)).
Tensor glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng);

/// Binds a stored parameter either as a trainable leaf or as a constant.
Var bind_parameter(Tape& tape, const ParameterStore& store, const std::string& name,
                   bool trainable);

// ---------------------------------------------------------------------------

struct GraphEncoderConfig {
  std::size_t features = kFeatureCount;
  std::size_t hidden = 32;
  std::size_t latent = 32;
};

/// Fixed per-column affine map applied to raw node features before the first
/// GCN layer: (x - shift) / scale. Identity until fitted.
struct FeatureNormalization {
  std::vector<double> shift;
  std::vector<double> scale;

  static FeatureNormalization identity(std::size_t columns);
  /// Column mean and standard deviation over every node of every sample.
  static FeatureNormalization fit(const std::vector<const Tensor*>& features);
  Tensor apply(const Tensor& features) const;
  friend bool operator==(const FeatureNormalization&, const FeatureNormalization&) = default;
};

/// Tape op applying `norm` to stacked node rows.
Var normalize_features(Tape& tape, const FeatureNormalization& norm, Var features);

/// Two GCN layers and a linear projection. Parameters: "gcn1" (F x h),
/// "gcn2" (h x h), "proj_w" (h x d), "proj_b" (1 x d).
struct GraphEncoder {
  GraphEncoderConfig config;
  FeatureNormalization normalization;
  ParameterStore params;

  static GraphEncoder init(const GraphEncoderConfig& config, std::uint64_t seed);

  nlohmann::json to_json() const;
  static GraphEncoder from_json(const nlohmann::json& j);
};

/// B graphs with a common node count, stacked row-wise.
struct GraphBatch {
  std::size_t nodes = 0;
  Tensor features;                   // (B * nodes) x F, raw
  std::vector<Tensor> propagation;   // normalized adjacency per graph
  std::vector<Tensor> adjacency;     // raw adjacency per graph

  static GraphBatch from_samples(const std::vector<const GraphSample*>& samples);
  std::size_t graphs() const { return propagation.size(); }
  std::vector<const Tensor*> propagation_blocks() const;
  std::vector<const Tensor*> adjacency_blocks() const;
};

struct GraphEncoding {
  Var embeddings;   // B x d, unit rows
  Var node_states;  // (B * nodes) x h
};

/// Encodes `raw_features` (same layout as batch.features; a Var so that
/// gradients can reach an upstream perturbation).
GraphEncoding encode_graph_batch(Tape& tape, const GraphEncoder& encoder, const GraphBatch& batch,
                                 Var raw_features, bool trainable);

/// Single-sample convenience wrapper.
std::pair<LatentEmbedding, Tensor> encode_graph(const GraphEncoder& encoder,
                                                const GraphSample& sample);

/// Weighted mean BCE of Z Z^T against A + I, positives weighted by
/// #negatives / #positives; averaged over the graphs of the batch.
Var adjacency_reconstruction_loss(Var node_states, const std::vector<const Tensor*>& adjacency);
Var adjacency_reconstruction_loss(Var node_states, const Tensor& adjacency);

Tensor reconstruction_logits(const Tensor& node_states);

// ---------------------------------------------------------------------------

struct TextEncoderConfig {
  std::size_t embedding = 32;
  std::size_t latent = 32;
};

inline constexpr const char* kUnknownToken = "<unk>";

/// Bag-of-tokens encoder. Parameters: "embedding" (|V| x e), "mlp_w" (e x d),
/// "mlp_b" (1 x d). vocabulary[0] is the unknown token.
struct TextEncoder {
  TextEncoderConfig config;
  std::vector<std::string> vocabulary;
  ParameterStore params;

  static TextEncoder init(const std::vector<std::string>& texts, const TextEncoderConfig& config,
                          std::uint64_t seed);
  /// Whitespace tokens mapped to vocabulary positions; throws on empty text.
  std::vector<std::size_t> tokenize(const std::string& text) const;

  nlohmann::json to_json() const;
  static TextEncoder from_json(const nlohmann::json& j);
};

std::vector<std::string> split_tokens(const std::string& text);

Var encode_texts(Tape& tape, const TextEncoder& encoder, const std::vector<std::string>& texts,
                 bool trainable);

LatentEmbedding encode_text(const TextEncoder& encoder, const std::string& text);

}  // namespace feederclip
