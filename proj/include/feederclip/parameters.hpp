#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "feederclip/tensor.hpp"

namespace feederclip {

struct AdamState {
  Tensor first_moment;
  Tensor second_moment;
  std::int64_t steps = 0;
};

using Gradients = std::map<std::string, Tensor>;

/// Named trainable tensors plus their optimizer state. Iteration order is the
/// lexicographic name order, which keeps checkpoints and updates deterministic.
class ParameterStore {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return params_.contains(name); }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  std::vector<std::string> names() const;
  const std::map<std::string, Tensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  AdamState& adam_state(const std::string& name);
  const AdamState* find_adam_state(const std::string& name) const;

  // Checkpoint format: {"name": {"shape": [...], "data": [...]}, ...}.
  // Optimizer state is not persisted.
  nlohmann::json to_json() const;
  static ParameterStore from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static ParameterStore load(const std::filesystem::path& path);

  bool same_parameters(const ParameterStore& other) const { return params_ == other.params_; }

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, AdamState> adam_;
};

nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam. Parameters absent from `gradients` are left alone and
/// keep their step count.
void adam_step(ParameterStore& store, const Gradients& gradients, const AdamOptions& options);

}  // namespace feederclip
