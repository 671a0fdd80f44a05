#include "feederclip/trigger.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace feederclip {
namespace {

const char* const kParamNames[] = {"enc_w",  "enc_b",  "mu_w",   "mu_b",  "logvar_w",
                                   "logvar_b", "dec_w1", "dec_b1", "dec_w2", "dec_b2"};

Var affine(Tape& tape, const TriggerGenerator& gen, Var x, const std::string& w,
           const std::string& b, bool trainable) {
  return add(matmul(x, bind_parameter(tape, gen.params, w, trainable)),
             bind_parameter(tape, gen.params, b, trainable));
}

Tensor standard_normal(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.storage()) v = normal(rng);
  return t;
}

}  // namespace

void TriggerConfig::validate() const {
  if (features == 0 || hidden == 0 || latent == 0) {
    throw std::invalid_argument("TriggerConfig: dimensions must be positive");
  }
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw std::invalid_argument("TriggerConfig: epsilon must be a finite value >= 0");
  }
  if (lambda_div < 0.0 || lambda_mag < 0.0) {
    throw std::invalid_argument("TriggerConfig: loss weights must be >= 0");
  }
  if (!(learning_rate > 0.0)) throw std::invalid_argument("TriggerConfig: learning_rate must be > 0");
}

TriggerGenerator TriggerGenerator::init(const TriggerConfig& config,
                                        FeatureNormalization normalization, std::uint64_t seed) {
  config.validate();
  if (normalization.shift.size() != config.features) {
    throw std::invalid_argument("TriggerGenerator: normalization has " +
                                std::to_string(normalization.shift.size()) + " columns, expected " +
                                std::to_string(config.features));
  }
  TriggerGenerator gen;
  gen.config = config;
  gen.normalization = std::move(normalization);
  Rng rng(derive_seed(seed, {0x7219}));
  const std::size_t f = config.features, h = config.hidden, l = config.latent;
  gen.params.add("enc_w", glorot_uniform(f, h, rng));
  gen.params.add("enc_b", Tensor::matrix(1, h));
  gen.params.add("mu_w", glorot_uniform(h, l, rng));
  gen.params.add("mu_b", Tensor::matrix(1, l));
  gen.params.add("logvar_w", glorot_uniform(h, l, rng));
  gen.params.add("logvar_b", Tensor::matrix(1, l));
  gen.params.add("dec_w1", glorot_uniform(l, h, rng));
  gen.params.add("dec_b1", Tensor::matrix(1, h));
  gen.params.add("dec_w2", glorot_uniform(h, f, rng));
  gen.params.add("dec_b2", Tensor::matrix(1, f));
  return gen;
}

nlohmann::json TriggerGenerator::to_json() const {
  return {{"config",
           {{"features", config.features},
            {"hidden", config.hidden},
            {"latent", config.latent},
            {"epsilon", config.epsilon},
            {"lambda_div", config.lambda_div},
            {"lambda_mag", config.lambda_mag},
            {"learning_rate", config.learning_rate},
            {"steps_per_epoch", config.steps_per_epoch}}},
          {"normalization", {{"shift", normalization.shift}, {"scale", normalization.scale}}},
          {"params", params.to_json()}};
}

TriggerGenerator TriggerGenerator::from_json(const nlohmann::json& j) {
  TriggerGenerator gen;
  const auto& c = j.at("config");
  gen.config.features = c.at("features").get<std::size_t>();
  gen.config.hidden = c.at("hidden").get<std::size_t>();
  gen.config.latent = c.at("latent").get<std::size_t>();
  gen.config.epsilon = c.at("epsilon").get<double>();
  gen.config.lambda_div = c.value("lambda_div", gen.config.lambda_div);
  gen.config.lambda_mag = c.value("lambda_mag", gen.config.lambda_mag);
  gen.config.learning_rate = c.value("learning_rate", gen.config.learning_rate);
  gen.config.steps_per_epoch = c.value("steps_per_epoch", gen.config.steps_per_epoch);
  gen.config.validate();
  gen.normalization.shift = j.at("normalization").at("shift").get<std::vector<double>>();
  gen.normalization.scale = j.at("normalization").at("scale").get<std::vector<double>>();
  gen.params = ParameterStore::from_json(j.at("params"));
  const TriggerGenerator fresh =
      init(gen.config, FeatureNormalization::identity(gen.config.features), 0);
  for (const char* name : kParamNames) {
    if (!gen.params.contains(name) || !gen.params.at(name).same_shape(fresh.params.at(name))) {
      throw std::invalid_argument(std::string("generator checkpoint: missing or misshapen '") +
                                  name + "'");
    }
  }
  if (gen.normalization.shift.size() != gen.config.features ||
      gen.normalization.scale.size() != gen.config.features) {
    throw std::invalid_argument("generator checkpoint: normalization size mismatch");
  }
  return gen;
}

void TriggerGenerator::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json().dump(1) << '\n';
}

TriggerGenerator TriggerGenerator::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("generator checkpoint " + path.string() + ": " + e.what());
  }
}

TriggerForward trigger_forward(Tape& tape, const TriggerGenerator& gen, Var features,
                               bool trainable, Rng* noise) {
  const Tensor& x = features.value();
  if (x.rank() != 2 || x.cols() != gen.config.features) {
    throw std::invalid_argument("trigger: expected " + std::to_string(gen.config.features) +
                                " feature columns, got shape " + shape_string(x.shape()));
  }
  Var h = tanh(affine(tape, gen, normalize_features(tape, gen.normalization, features), "enc_w",
                      "enc_b", trainable));
  Var mu = affine(tape, gen, h, "mu_w", "mu_b", trainable);
  Var logvar = affine(tape, gen, h, "logvar_w", "logvar_b", trainable);
  Var z = mu;
  if (noise != nullptr) {
    Var n = tape.constant(standard_normal(x.rows(), gen.config.latent, *noise));
    z = add(mu, mul(exp(scale(logvar, 0.5)), n));
  }
  Var d = tanh(affine(tape, gen, z, "dec_w1", "dec_b1", trainable));
  Var delta = scale(tanh(affine(tape, gen, d, "dec_w2", "dec_b2", trainable)), gen.config.epsilon);
  return {add(features, delta), delta, mu, logvar};
}

GraphSample TriggeredSample::triggered() const {
  GraphSample s = original;
  s.features = x_t;
  return s;
}

TriggeredSample apply_trigger(const TriggerGenerator& gen, const GraphSample& sample,
                              bool stochastic, std::uint64_t noise_seed) {
  Tape tape;
  Rng rng(noise_seed);
  const TriggerForward f =
      trigger_forward(tape, gen, tape.constant(sample.features), false, stochastic ? &rng : nullptr);
  return {sample, f.x_t.value(), f.delta.value()};
}

std::string to_string(AttackMode mode) {
  switch (mode) {
    case AttackMode::FalseNegative: return "false_negative";
    case AttackMode::FalsePositive: return "false_positive";
    case AttackMode::LocalizationMisguidance: return "localization_misguidance";
  }
  return "unknown";
}

AttackGoal AttackGoal::for_target(const ClassSet& classes, std::size_t target_class) {
  if (target_class >= classes.size()) {
    throw std::invalid_argument("target class " + std::to_string(target_class) +
                                " outside a class set of " + std::to_string(classes.size()));
  }
  const ClassTemplate& t = classes.classes[target_class];
  AttackGoal goal{target_class, AttackMode::FalsePositive};
  if (t.kind == LabelKind::NoFault) goal.mode = AttackMode::FalseNegative;
  else if (t.zone) goal.mode = AttackMode::LocalizationMisguidance;
  return goal;
}

void AttackGoal::validate(const ClassSet& classes) const {
  if (target_class >= classes.size()) {
    throw std::invalid_argument("target class " + std::to_string(target_class) +
                                " outside a class set of " + std::to_string(classes.size()));
  }
  const ClassTemplate& t = classes.classes[target_class];
  const bool no_fault = t.kind == LabelKind::NoFault;
  if ((mode == AttackMode::FalseNegative) != no_fault) {
    throw std::invalid_argument("attack mode " + to_string(mode) +
                                " is inconsistent with target '" + t.text + "'");
  }
  if (mode == AttackMode::LocalizationMisguidance && !t.zone) {
    throw std::invalid_argument("localization misguidance needs a zoned target class");
  }
}

Var generator_loss(Tape& tape, const ClipModel& model, const TriggerGenerator& gen,
                   const std::vector<const GraphSample*>& batch, const AttackGoal& goal,
                   double lambda_div, double lambda_mag, Rng* noise) {
  if (batch.empty()) throw std::invalid_argument("generator_loss: empty batch");
  goal.validate(model.class_set);
  const GraphBatch graphs = GraphBatch::from_samples(batch);
  const TriggerForward f =
      trigger_forward(tape, gen, tape.constant(graphs.features), true, noise);
  const GraphEncoding enc = encode_graph_batch(tape, model.graph_encoder, graphs, f.x_t, false);

  Tape text_tape;
  const Tensor text =
      encode_texts(text_tape, model.text_encoder, model.class_set.texts(), false).value();
  Tensor text_t = Tensor::matrix(text.cols(), text.rows());
  for (std::size_t r = 0; r < text.rows(); ++r) {
    for (std::size_t c = 0; c < text.cols(); ++c) text_t(c, r) = text(r, c);
  }
  Var logits = scale(matmul(enc.embeddings, tape.constant(std::move(text_t))), 1.0 / model.tau());
  Var ce = cross_entropy_with_logits(
      logits, std::vector<std::size_t>(batch.size(), goal.target_class));
  Var kl = gaussian_kl_to_standard(f.mu, f.logvar, graphs.nodes);
  Var mag = mse(f.delta, tape.constant(Tensor(f.delta.shape())));
  return add(add(ce, scale(kl, lambda_div)), scale(mag, lambda_mag));
}

BackdoorResult train_backdoor(const Dataset& train, const TrainConfig& config,
                              const AttackGoal& goal, double poison_pct,
                              const TriggerConfig& trigger_config) {
  if (!(poison_pct >= 0.0 && poison_pct <= 0.5)) {
    throw std::invalid_argument("train_backdoor: poison_pct must lie in [0, 0.5]");
  }
  trigger_config.validate();
  goal.validate(train.class_set);
  std::vector<const GraphSample*> targets, others;
  for (const auto& s : train.samples) {
    (s.label.class_index == goal.target_class ? targets : others).push_back(&s);
  }
  if (targets.empty()) throw std::invalid_argument("train_backdoor: target class has no samples");
  if (others.empty()) throw std::invalid_argument("train_backdoor: no non-target samples");

  BackdoorResult out{init_model(train, config), {}, {}};
  out.generator = TriggerGenerator::init(trigger_config, out.model.graph_encoder.normalization,
                                         derive_seed(config.seed, {0x6e4}));
  TriggerGenerator& gen = out.generator;
  // Generator-side randomness never touches the classifier's streams.
  Rng gen_rng(derive_seed(config.seed, {0x6e5}));
  const AdamOptions adam{trigger_config.learning_rate};
  const std::size_t half = std::max<std::size_t>(1, config.batch_size / 2);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng poison_noise(derive_seed(config.seed, {0x901, epoch}));
    const TriggerFn stochastic_trigger = [&](const GraphSample& s) {
      return apply_trigger(gen, s, true, poison_noise()).x_t;
    };
    const Dataset poisoned = poison_dataset(train, stochastic_trigger, goal.target_class,
                                            poison_pct, derive_seed(config.seed, {0x902, epoch}));
    out.log.epoch_loss.push_back(train_epoch(out.model, poisoned, config, epoch));

    for (std::size_t step = 0; step < trigger_config.steps_per_epoch; ++step) {
      std::vector<const GraphSample*> batch;
      std::uniform_int_distribution<std::size_t> pick_t(0, targets.size() - 1);
      std::uniform_int_distribution<std::size_t> pick_o(0, others.size() - 1);
      for (std::size_t i = 0; i < half; ++i) batch.push_back(targets[pick_t(gen_rng)]);
      for (std::size_t i = 0; i < half; ++i) batch.push_back(others[pick_o(gen_rng)]);
      Tape tape;
      Var loss = scale(generator_loss(tape, out.model, gen, batch, goal, trigger_config.lambda_div,
                                      trigger_config.lambda_mag, &gen_rng),
                       config.lambda_bd);
      if (!std::isfinite(loss.value()[0])) {
        throw std::runtime_error("generator diverged at epoch " + std::to_string(epoch + 1));
      }
      tape.backward(loss);
      adam_step(gen.params, tape.gradients(gen.params), adam);
    }
  }
  return out;
}

Dataset poison_dataset(const Dataset& train, const TriggerGenerator& gen, std::size_t target_class,
                       double poison_pct, std::uint64_t seed) {
  return poison_dataset(
      train, [&gen](const GraphSample& s) { return apply_trigger(gen, s, false).x_t; },
      target_class, poison_pct, seed);
}

AttackOutcome attack(const ClipModel& model, const TriggerGenerator& gen,
                     const GraphSample& sample) {
  TriggeredSample t = apply_trigger(gen, sample, false);
  const Classification with = classify(model, t.triggered());
  const Classification without = classify(model, sample);
  return {with, without, std::move(t)};
}

std::vector<Tensor> trigger_features(const TriggerGenerator& gen,
                                     const std::vector<const GraphSample*>& samples) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (const GraphSample* s : samples) out.push_back(apply_trigger(gen, *s, false).x_t);
  return out;
}

}  // namespace feederclip
