#include "feederclip/parameters.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace feederclip {

void ParameterStore::add(const std::string& name, Tensor value) {
  if (params_.contains(name)) {
    throw std::invalid_argument("ParameterStore: duplicate parameter '" + name + "'");
  }
  params_.emplace(name, std::move(value));
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("ParameterStore: no parameter '" + name + "'");
  return it->second;
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("ParameterStore: no parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

AdamState& ParameterStore::adam_state(const std::string& name) {
  const Tensor& p = at(name);
  auto [it, inserted] = adam_.try_emplace(name);
  if (inserted) {
    it->second.first_moment = Tensor(p.shape());
    it->second.second_moment = Tensor(p.shape());
  }
  return it->second;
}

const AdamState* ParameterStore::find_adam_state(const std::string& name) const {
  auto it = adam_.find(name);
  return it == adam_.end() ? nullptr : &it->second;
}

nlohmann::json tensor_to_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape()}, {"data", t.storage()}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

nlohmann::json ParameterStore::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, t] : params_) j[name] = tensor_to_json(t);
  return j;
}

ParameterStore ParameterStore::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("parameter file: expected a JSON object");
  ParameterStore store;
  for (const auto& [name, entry] : j.items()) store.add(name, tensor_from_json(entry));
  return store;
}

void ParameterStore::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json().dump() << '\n';
}

ParameterStore ParameterStore::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return from_json(nlohmann::json::parse(in));
}

void adam_step(ParameterStore& store, const Gradients& gradients, const AdamOptions& options) {
  for (const auto& [name, grad] : gradients) {
    Tensor& param = store.at(name);
    if (!grad.same_shape(param)) {
      throw std::invalid_argument("adam_step: gradient for '" + name + "' has shape " +
                                  shape_string(grad.shape()) + ", parameter has " +
                                  shape_string(param.shape()));
    }
    AdamState& state = store.adam_state(name);
    state.steps += 1;
    const double t = static_cast<double>(state.steps);
    const double correction1 = 1.0 - std::pow(options.beta1, t);
    const double correction2 = 1.0 - std::pow(options.beta2, t);
    auto& m = state.first_moment.storage();
    auto& v = state.second_moment.storage();
    auto& w = param.storage();
    const auto& g = grad.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * g[i];
      v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      w[i] -= options.learning_rate * m_hat / (std::sqrt(v_hat) + options.epsilon);
    }
  }
}

}  // namespace feederclip
