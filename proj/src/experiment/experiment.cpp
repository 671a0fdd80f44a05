#include "feederclip/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace feederclip {

nlohmann::json Metrics::to_json() const {
  nlohmann::json j{{"accuracy", accuracy},
                   {"macro_precision", macro_precision},
                   {"macro_recall", macro_recall},
                   {"macro_f1", macro_f1},
                   {"per_class_f1", per_class_f1},
                   {"confusion", confusion},
                   {"attack_success_rate", nullptr}};
  if (attack_success_rate) j["attack_success_rate"] = *attack_success_rate;
  return j;
}

Metrics compute_metrics(const std::vector<std::size_t>& predictions,
                        const std::vector<std::size_t>& labels, std::size_t classes,
                        std::optional<std::size_t> target_class) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("compute_metrics: " + std::to_string(predictions.size()) +
                                " predictions for " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw std::invalid_argument("compute_metrics: no samples");
  Metrics m;
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes || predictions[i] >= classes) {
      throw std::invalid_argument("compute_metrics: class index out of range at sample " +
                                  std::to_string(i));
    }
    m.confusion[labels[i]][predictions[i]] += 1;
  }
  std::size_t correct = 0;
  for (std::size_t c = 0; c < classes; ++c) correct += m.confusion[c][c];
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());

  m.per_class_f1.assign(classes, 0.0);
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t tp = m.confusion[c][c], fp = 0, fn = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      if (k == c) continue;
      fp += m.confusion[k][c];
      fn += m.confusion[c][k];
    }
    const double precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    m.per_class_f1[c] =
        tp == 0 ? 0.0 : static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
    if (tp + fn == 0) continue;  // absent from labels
    ++present;
    m.macro_precision += precision;
    m.macro_recall += recall;
    m.macro_f1 += m.per_class_f1[c];
  }
  m.macro_precision /= static_cast<double>(present);
  m.macro_recall /= static_cast<double>(present);
  m.macro_f1 /= static_cast<double>(present);

  if (target_class) {
    if (*target_class >= classes) {
      throw std::invalid_argument("compute_metrics: target class out of range");
    }
    std::size_t others = 0, hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == *target_class) continue;
      ++others;
      hits += predictions[i] == *target_class;
    }
    if (others > 0) {
      m.attack_success_rate = static_cast<double>(hits) / static_cast<double>(others);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------

namespace {

// Pulls known keys out of one config section and rejects the rest.
class Section {
 public:
  Section(const nlohmann::json& root, const std::string& name) : name_(name) {
    if (root.contains(name)) {
      j_ = root.at(name);
      if (!j_.is_object()) throw std::invalid_argument("config: '" + name + "' must be an object");
    } else {
      j_ = nlohmann::json::object();
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument("config: " + name_ + "." + key + " has the wrong type");
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw std::invalid_argument("config: unknown key " + name_ + "." + key);
    }
  }

 private:
  std::string name_;
  nlohmann::json j_;
  std::set<std::string> seen_;
};

void check_rates(const std::vector<double>& rates, const char* what) {
  for (double r : rates) {
    if (!(r >= 0.0 && r <= 0.5)) {
      throw std::invalid_argument(std::string("config: ") + what + " must lie in [0, 0.5]");
    }
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  for (const auto& [key, value] : j.items()) {
    static const std::set<std::string> sections{"feeder", "dataset", "model", "generator",
                                                "experiment"};
    if (!sections.contains(key)) throw std::invalid_argument("config: unknown section " + key);
  }
  ExperimentConfig c;

  Section feeder(j, "feeder");
  feeder.get("buses", c.feeder.buses);
  feeder.get("seed", c.feeder.seed);
  std::string topology;
  feeder.get("topology", topology);
  if (!topology.empty()) c.feeder.topology = topology;
  feeder.finish();

  Section data(j, "dataset");
  std::string mode = to_string(c.dataset.mode);
  data.get("mode", mode);
  c.dataset.mode = class_mode_from_string(mode);
  data.get("zones", c.dataset.zones);
  data.get("n_per_class", c.dataset.n_per_class);
  data.get("load_scale_min", c.dataset.load_scale_min);
  data.get("load_scale_max", c.dataset.load_scale_max);
  data.get("fault_magnitude", c.dataset.fault_magnitude);
  data.get("size_faults_to_band", c.dataset.size_faults_to_band);
  data.get("band_margin", c.dataset.band_margin);
  data.get("voltage_noise_sigma", c.dataset.snapshot.voltage_noise_sigma);
  data.get("train_fraction", c.train_fraction);
  data.finish();

  Section model(j, "model");
  model.get("epochs", c.model.epochs);
  model.get("batch_size", c.model.batch_size);
  model.get("learning_rate", c.model.learning_rate);
  model.get("lambda_recon", c.model.lambda_recon);
  model.get("lambda_bd", c.model.lambda_bd);
  model.get("gcn_hidden", c.model.graph.hidden);
  model.get("latent", c.model.graph.latent);
  c.model.text.latent = c.model.graph.latent;
  model.get("text_embedding", c.model.text.embedding);
  model.finish();

  Section gen(j, "generator");
  gen.get("hidden", c.generator.hidden);
  gen.get("latent", c.generator.latent);
  gen.get("epsilon", c.generator.epsilon);
  gen.get("lambda_div", c.generator.lambda_div);
  gen.get("lambda_mag", c.generator.lambda_mag);
  gen.get("learning_rate", c.generator.learning_rate);
  gen.get("steps_per_epoch", c.generator.steps_per_epoch);
  gen.finish();

  Section exp(j, "experiment");
  exp.get("seeds", c.experiment.seeds);
  std::string attack_mode = to_string(c.experiment.attack_mode);
  exp.get("attack_mode", attack_mode);
  c.experiment.attack_mode = class_mode_from_string(attack_mode);
  exp.get("attack_n_per_class", c.experiment.attack_n_per_class);
  exp.get("utility_rates", c.experiment.utility_rates);
  exp.get("sensitivity_rates", c.experiment.sensitivity_rates);
  exp.get("comparison_rates", c.experiment.comparison_rates);
  exp.get("sensitivity_target", c.experiment.sensitivity_target);
  exp.get("parallel", c.experiment.parallel);
  exp.finish();

  if (c.experiment.seeds == 0) throw std::invalid_argument("config: experiment.seeds must be >= 1");
  if (c.experiment.parallel == 0) c.experiment.parallel = 1;
  if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) {
    throw std::invalid_argument("config: dataset.train_fraction must lie in (0, 1)");
  }
  check_rates(c.experiment.utility_rates, "experiment.utility_rates");
  check_rates(c.experiment.sensitivity_rates, "experiment.sensitivity_rates");
  check_rates(c.experiment.comparison_rates, "experiment.comparison_rates");
  c.model.validate();
  c.generator.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json ExperimentConfig::to_json() const {
  return {
      {"feeder",
       {{"buses", feeder.buses},
        {"seed", feeder.seed},
        {"topology", feeder.topology ? feeder.topology->string() : std::string()}}},
      {"dataset",
       {{"mode", to_string(dataset.mode)},
        {"zones", dataset.zones},
        {"n_per_class", dataset.n_per_class},
        {"load_scale_min", dataset.load_scale_min},
        {"load_scale_max", dataset.load_scale_max},
        {"fault_magnitude", dataset.fault_magnitude},
        {"size_faults_to_band", dataset.size_faults_to_band},
        {"band_margin", dataset.band_margin},
        {"voltage_noise_sigma", dataset.snapshot.voltage_noise_sigma},
        {"train_fraction", train_fraction}}},
      {"model",
       {{"epochs", model.epochs},
        {"batch_size", model.batch_size},
        {"learning_rate", model.learning_rate},
        {"lambda_recon", model.lambda_recon},
        {"lambda_bd", model.lambda_bd},
        {"gcn_hidden", model.graph.hidden},
        {"latent", model.graph.latent},
        {"text_embedding", model.text.embedding}}},
      {"generator",
       {{"hidden", generator.hidden},
        {"latent", generator.latent},
        {"epsilon", generator.epsilon},
        {"lambda_div", generator.lambda_div},
        {"lambda_mag", generator.lambda_mag},
        {"learning_rate", generator.learning_rate},
        {"steps_per_epoch", generator.steps_per_epoch}}},
      {"experiment",
       {{"seeds", experiment.seeds},
        {"attack_mode", to_string(experiment.attack_mode)},
        {"attack_n_per_class", experiment.attack_n_per_class},
        {"utility_rates", experiment.utility_rates},
        {"sensitivity_rates", experiment.sensitivity_rates},
        {"comparison_rates", experiment.comparison_rates},
        {"sensitivity_target", experiment.sensitivity_target},
        {"parallel", experiment.parallel}}}};
}

BusNetwork build_feeder(const FeederConfig& config) {
  if (config.topology) return load_network(*config.topology);
  return build_synthetic_feeder(config.buses, config.seed);
}

PreparedData prepare_data(const ExperimentConfig& config, const DatasetOptions& options,
                          std::uint64_t seed) {
  PreparedData out;
  out.net = build_feeder(config.feeder);
  const Dataset all =
      build_dataset(out.net, VoltVarCurve::standard(), options, derive_seed(seed, {0xda7a}));
  auto [train, test] = split(all, config.train_fraction, derive_seed(seed, {0x5b17}));
  out.train = std::move(train);
  out.test = std::move(test);
  return out;
}

std::uint64_t run_seed(std::uint64_t seed, std::size_t i) { return derive_seed(seed, {0x7a1, i}); }

// ---------------------------------------------------------------------------

AggregateRow aggregate(const std::string& label, const std::vector<const RunRecord*>& runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate: no runs for '" + label + "'");
  AggregateRow row;
  row.label = label;
  row.evaluation = runs.front()->evaluation;
  row.target = runs.front()->target;
  row.rate = runs.front()->rate;
  row.runs = runs.size();
  row.per_class_f1.assign(runs.front()->metrics.per_class_f1.size(), 0.0);
  bool all_asr = true;
  double asr = 0.0;
  for (const RunRecord* r : runs) {
    if (r->target != row.target) row.target.reset();
    if (r->rate != row.rate) row.rate.reset();
    if (r->evaluation != row.evaluation) row.evaluation = "mixed";
    row.accuracy += r->metrics.accuracy;
    row.macro_precision += r->metrics.macro_precision;
    row.macro_recall += r->metrics.macro_recall;
    row.macro_f1 += r->metrics.macro_f1;
    for (std::size_t c = 0; c < row.per_class_f1.size(); ++c) {
      row.per_class_f1[c] += r->metrics.per_class_f1.at(c);
    }
    if (r->metrics.attack_success_rate) asr += *r->metrics.attack_success_rate;
    else all_asr = false;
  }
  const double n = static_cast<double>(runs.size());
  row.accuracy /= n;
  row.macro_precision /= n;
  row.macro_recall /= n;
  row.macro_f1 /= n;
  for (double& v : row.per_class_f1) v /= n;
  if (all_asr) row.attack_success_rate = asr / n;
  return row;
}

namespace {

template <typename T>
nlohmann::json optional_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

nlohmann::json ExperimentReport::to_json() const {
  nlohmann::json runs_j = nlohmann::json::array();
  for (const RunRecord& r : runs) {
    runs_j.push_back({{"model", r.model},
                      {"evaluation", r.evaluation},
                      {"target", optional_json(r.target)},
                      {"rate", optional_json(r.rate)},
                      {"seed", r.seed},
                      {"metrics", r.metrics.to_json()}});
  }
  nlohmann::json agg_j = nlohmann::json::array();
  for (const AggregateRow& a : aggregates) {
    agg_j.push_back({{"label", a.label},
                     {"evaluation", a.evaluation},
                     {"target", optional_json(a.target)},
                     {"rate", optional_json(a.rate)},
                     {"runs", a.runs},
                     {"accuracy", a.accuracy},
                     {"macro_precision", a.macro_precision},
                     {"macro_recall", a.macro_recall},
                     {"macro_f1", a.macro_f1},
                     {"attack_success_rate", optional_json(a.attack_success_rate)},
                     {"per_class_f1", a.per_class_f1}});
  }
  return {{"experiment", name}, {"seed", seed},        {"run_seeds", run_seeds},
          {"config", config},   {"classes", class_texts}, {"runs", runs_j},
          {"aggregates", agg_j}};
}

std::string ExperimentReport::to_csv() const {
  std::ostringstream out;
  out << "experiment,label,evaluation,target,rate,class,metric,value\n";
  for (const AggregateRow& a : aggregates) {
    const std::string prefix = name + "," + a.label + "," + a.evaluation + "," +
                               (a.target ? std::to_string(*a.target) : "") + "," +
                               (a.rate ? format_value(*a.rate) : "") + ",";
    auto line = [&](const std::string& cls, const char* metric, double v) {
      out << prefix << cls << "," << metric << "," << format_value(v) << "\n";
    };
    line("all", "accuracy", a.accuracy);
    line("all", "macro_precision", a.macro_precision);
    line("all", "macro_recall", a.macro_recall);
    line("all", "macro_f1", a.macro_f1);
    if (a.attack_success_rate) line("all", "attack_success_rate", *a.attack_success_rate);
    for (std::size_t c = 0; c < a.per_class_f1.size(); ++c) {
      line(c < class_texts.size() ? class_texts[c] : std::to_string(c), "f1", a.per_class_f1[c]);
    }
  }
  return out.str();
}

void ExperimentReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "report.json");
    if (!out) throw std::runtime_error("cannot write " + (dir / "report.json").string());
    out << to_json().dump(2) << '\n';
  }
  std::ofstream out(dir / "report.csv");
  if (!out) throw std::runtime_error("cannot write " + (dir / "report.csv").string());
  out << to_csv();
}

// ---------------------------------------------------------------------------

namespace {

struct Job {
  bool backdoor = false;
  std::size_t target = 0;
  double rate = 0.0;
  std::uint64_t seed = 0;
  bool eval_clean = true;
  bool eval_triggered = false;
};

std::vector<std::size_t> labels_of(const Dataset& d) {
  std::vector<std::size_t> out;
  for (const auto& s : d.samples) out.push_back(s.label.class_index);
  return out;
}

std::vector<RunRecord> execute(const Job& job, const PreparedData& data,
                               const ExperimentConfig& config) {
  TrainConfig tc = config.model;
  tc.seed = job.seed;
  const std::vector<std::size_t> labels = labels_of(data.test);
  const std::size_t classes = data.train.class_set.size();
  std::vector<RunRecord> out;
  if (!job.backdoor) {
    const ClipModel model = train_clean(data.train, tc);
    out.push_back({"clean", "clean", std::nullopt, std::nullopt, job.seed,
                   compute_metrics(predict(model, data.test), labels, classes)});
    return out;
  }
  const AttackGoal goal = AttackGoal::for_target(data.train.class_set, job.target);
  const BackdoorResult bd =
      train_backdoor(data.train, tc, goal, job.rate, config.generator);
  if (job.eval_clean) {
    out.push_back({"backdoor", "clean", job.target, job.rate, job.seed,
                   compute_metrics(predict(bd.model, data.test), labels, classes)});
  }
  if (job.eval_triggered) {
    std::vector<const GraphSample*> samples;
    for (const auto& s : data.test.samples) samples.push_back(&s);
    const std::vector<Tensor> triggered = trigger_features(bd.generator, samples);
    std::vector<const Tensor*> features;
    for (const Tensor& t : triggered) features.push_back(&t);
    out.push_back({"backdoor", "triggered", job.target, job.rate, job.seed,
                   compute_metrics(predict(bd.model, samples, features), labels, classes,
                                   job.target)});
  }
  return out;
}

// Results come back in job order regardless of the worker count.
std::vector<RunRecord> run_jobs(const std::vector<Job>& jobs, const PreparedData& data,
                                const ExperimentConfig& config) {
  std::vector<std::vector<RunRecord>> results(jobs.size());
  const std::size_t workers = std::min(config.experiment.parallel, jobs.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) results[i] = execute(jobs[i], data, config);
  } else {
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
          try {
            results[i] = execute(jobs[i], data, config);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }
  std::vector<RunRecord> out;
  for (auto& r : results) out.insert(out.end(), r.begin(), r.end());
  return out;
}

DatasetOptions attack_dataset_options(const ExperimentConfig& config) {
  DatasetOptions o = config.dataset;
  o.mode = config.experiment.attack_mode;
  o.n_per_class = config.experiment.attack_n_per_class;
  return o;
}

ExperimentReport start_report(const std::string& name, const ExperimentConfig& config,
                              std::uint64_t seed, const PreparedData& data) {
  ExperimentReport r;
  r.name = name;
  r.config = config.to_json();
  r.seed = seed;
  for (std::size_t i = 0; i < config.experiment.seeds; ++i) r.run_seeds.push_back(run_seed(seed, i));
  r.class_texts = data.train.class_set.texts();
  return r;
}

std::vector<const RunRecord*> select(const std::vector<RunRecord>& runs,
                                     const std::function<bool(const RunRecord&)>& keep) {
  std::vector<const RunRecord*> out;
  for (const RunRecord& r : runs) {
    if (keep(r)) out.push_back(&r);
  }
  return out;
}

}  // namespace

ExperimentReport run_utility_experiment(const ExperimentConfig& config, std::uint64_t seed) {
  const PreparedData data = prepare_data(config, attack_dataset_options(config), seed);
  ExperimentReport report = start_report("utility", config, seed, data);
  std::vector<Job> jobs;
  for (std::uint64_t s : report.run_seeds) jobs.push_back({false, 0, 0.0, s, true, false});
  for (std::size_t t = 0; t < data.train.class_set.size(); ++t) {
    for (double rate : config.experiment.utility_rates) {
      for (std::uint64_t s : report.run_seeds) jobs.push_back({true, t, rate, s, true, false});
    }
  }
  report.runs = run_jobs(jobs, data, config);
  report.aggregates.push_back(
      aggregate("clean", select(report.runs, [](const RunRecord& r) { return r.model == "clean"; })));
  report.aggregates.push_back(aggregate(
      "backdoor_average", select(report.runs, [](const RunRecord& r) { return r.model == "backdoor"; })));
  return report;
}

ExperimentReport run_sensitivity_experiment(const ExperimentConfig& config, std::uint64_t seed) {
  const PreparedData data = prepare_data(config, attack_dataset_options(config), seed);
  ExperimentReport report = start_report("sensitivity", config, seed, data);
  const std::size_t target = config.experiment.sensitivity_target;
  AttackGoal::for_target(data.train.class_set, target);
  std::vector<Job> jobs;
  for (std::uint64_t s : report.run_seeds) jobs.push_back({false, 0, 0.0, s, true, false});
  for (double rate : config.experiment.sensitivity_rates) {
    for (std::uint64_t s : report.run_seeds) jobs.push_back({true, target, rate, s, false, true});
  }
  report.runs = run_jobs(jobs, data, config);
  report.aggregates.push_back(aggregate(
      "clean_reference", select(report.runs, [](const RunRecord& r) { return r.model == "clean"; })));
  for (double rate : config.experiment.sensitivity_rates) {
    report.aggregates.push_back(aggregate("backdoor", select(report.runs, [&](const RunRecord& r) {
                                            return r.model == "backdoor" && r.rate == rate;
                                          })));
  }
  return report;
}

ExperimentReport run_comparison_experiment(const ExperimentConfig& config, std::uint64_t seed) {
  const PreparedData data = prepare_data(config, attack_dataset_options(config), seed);
  ExperimentReport report = start_report("comparison", config, seed, data);
  std::vector<Job> jobs;
  const std::size_t classes = data.train.class_set.size();
  for (std::size_t t = 0; t < classes; ++t) {
    for (double rate : config.experiment.comparison_rates) {
      for (std::uint64_t s : report.run_seeds) jobs.push_back({true, t, rate, s, true, true});
    }
  }
  report.runs = run_jobs(jobs, data, config);
  for (const char* evaluation : {"clean", "triggered"}) {
    for (std::size_t t = 0; t < classes; ++t) {
      for (double rate : config.experiment.comparison_rates) {
        report.aggregates.push_back(
            aggregate("per_rate", select(report.runs, [&](const RunRecord& r) {
                        return r.evaluation == evaluation && r.target == t && r.rate == rate;
                      })));
      }
      report.aggregates.push_back(aggregate("average", select(report.runs, [&](const RunRecord& r) {
                                              return r.evaluation == evaluation && r.target == t;
                                            })));
    }
  }
  return report;
}

ExperimentReport run_experiment(const std::string& name, const ExperimentConfig& config,
                                std::uint64_t seed) {
  if (name == "utility") return run_utility_experiment(config, seed);
  if (name == "sensitivity") return run_sensitivity_experiment(config, seed);
  if (name == "comparison") return run_comparison_experiment(config, seed);
  throw std::invalid_argument("unknown experiment '" + name +
                              "' (expected utility, sensitivity or comparison)");
}

}  // namespace feederclip
