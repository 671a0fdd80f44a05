#include "feederclip/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <optional>
#include <string>

#include "feederclip/experiment.hpp"
#include "feederclip/gradcheck.hpp"

namespace feederclip {
namespace {

constexpr double kGradcheckTolerance = 1e-4;

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string out = "out";
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--seed", common.seed, "Base random seed");
  cmd->add_option("--config", common.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--out", common.out, "Output directory");
}

ExperimentConfig load_config(const Common& common) {
  return common.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(common.config);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void print_aggregates(const ExperimentReport& r, std::ostream& out) {
  for (const AggregateRow& a : r.aggregates) {
    out << r.name << " " << a.label << " eval=" << a.evaluation;
    if (a.target) out << " target=" << *a.target;
    if (a.rate) out << " rate=" << fixed(*a.rate, 2);
    out << " acc=" << fixed(a.accuracy) << " f1=" << fixed(a.macro_f1);
    if (a.attack_success_rate) out << " asr=" << fixed(*a.attack_success_rate);
    out << "\n";
  }
}

int gen_data(const Common& common, std::ostream& out) {
  const ExperimentConfig config = load_config(common);
  const BusNetwork net = build_feeder(config.feeder);
  const Dataset all = build_dataset(net, VoltVarCurve::standard(), config.dataset,
                                    derive_seed(common.seed, {0xda7a}));
  auto [train, test] = split(all, config.train_fraction, derive_seed(common.seed, {0x5b17}));
  const std::filesystem::path dir = common.out;
  std::filesystem::create_directories(dir);
  save_network(net, dir / "feeder.json");
  save_dataset(all, dir / "dataset.jsonl");
  save_dataset(train, dir / "train.jsonl");
  save_dataset(test, dir / "test.jsonl");
  out << "wrote " << all.size() << " samples (" << train.size() << " train, " << test.size()
      << " test, " << all.class_set.size() << " classes) to " << dir.string() << "\n";
  return 0;
}

int train(const Common& common, const std::string& data_path, bool backdoor,
          std::size_t target_class, double poison_pct, std::ostream& out) {
  const ExperimentConfig config = load_config(common);
  const Dataset data = load_dataset(data_path);
  TrainConfig tc = config.model;
  tc.seed = common.seed;
  const std::filesystem::path dir = common.out;
  TrainLog log;
  if (backdoor) {
    const AttackGoal goal = AttackGoal::for_target(data.class_set, target_class);
    BackdoorResult r = train_backdoor(data, tc, goal, poison_pct, config.generator);
    r.model.save(dir / "model");
    r.generator.save(dir / "generator.json");
    log = r.log;
    out << "backdoored model (target " << target_class << ", " << to_string(goal.mode)
        << ", poison " << poison_pct << ") saved to " << dir.string() << "\n";
  } else {
    const ClipModel model = train_clean(data, tc, &log);
    model.save(dir / "model");
    out << "clean model saved to " << (dir / "model").string() << "\n";
  }
  write_text(dir / "train_log.json", nlohmann::json{{"epoch_loss", log.epoch_loss}}.dump(1) + "\n");
  if (!log.epoch_loss.empty()) {
    out << "loss " << fixed(log.epoch_loss.front()) << " -> " << fixed(log.epoch_loss.back())
        << "\n";
  }
  return 0;
}

int evaluate(const Common& common, const std::string& model_dir, const std::string& data_path,
             bool apply, const std::string& generator_path, std::optional<std::size_t> target,
             std::ostream& out) {
  const ClipModel model = ClipModel::load(model_dir);
  const Dataset data = load_dataset(data_path);
  if (data.class_set != model.class_set) {
    throw std::invalid_argument("dataset classes do not match the model's");
  }
  std::vector<const GraphSample*> samples;
  std::vector<std::size_t> labels;
  for (const auto& s : data.samples) {
    samples.push_back(&s);
    labels.push_back(s.label.class_index);
  }
  std::vector<Tensor> triggered;
  std::vector<const Tensor*> features;
  if (apply) {
    const TriggerGenerator gen = TriggerGenerator::load(generator_path);
    triggered = trigger_features(gen, samples);
    for (const Tensor& t : triggered) features.push_back(&t);
  }
  RunRecord run{"loaded", apply ? "triggered" : "clean", target, std::nullopt, common.seed,
                compute_metrics(predict(model, samples, features), labels,
                                model.class_set.size(), target)};
  ExperimentReport report;
  report.name = "evaluate";
  report.config = {{"model", model_dir}, {"data", data_path}, {"generator", generator_path}};
  report.seed = common.seed;
  report.class_texts = model.class_set.texts();
  report.runs.push_back(run);
  report.aggregates.push_back(aggregate("evaluation", {&report.runs.back()}));
  report.write(common.out);
  print_aggregates(report, out);
  return 0;
}

int attack_one(const Common& common, const std::string& model_dir,
               const std::string& generator_path, const std::string& sample_path,
               std::ostream& out) {
  const ClipModel model = ClipModel::load(model_dir);
  const TriggerGenerator gen = TriggerGenerator::load(generator_path);
  std::ifstream in(sample_path);
  if (!in) throw std::runtime_error("cannot read " + sample_path);
  GraphSample sample;
  try {
    sample = sample_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("sample " + sample_path + ": " + e.what());
  }
  const AttackOutcome r = attack(model, gen, sample);
  const auto texts = model.class_set.texts();
  auto prediction = [&](const Classification& c) {
    return nlohmann::json{{"class_index", c.class_index},
                          {"text", texts.at(c.class_index)},
                          {"scores", c.scores}};
  };
  nlohmann::json report{{"triggered_sample", sample_to_json(r.triggered.triggered())},
                        {"delta", tensor_to_json(r.triggered.delta)},
                        {"with_trigger", prediction(r.with_trigger)},
                        {"without_trigger", prediction(r.without_trigger)}};
  write_text(std::filesystem::path(common.out) / "attack.json", report.dump(2) + "\n");
  out << "with trigger:    " << texts.at(r.with_trigger.class_index) << "\n"
      << "without trigger: " << texts.at(r.without_trigger.class_index) << "\n";
  return 0;
}

int experiment(const Common& common, const std::string& name, std::size_t parallel,
               std::ostream& out) {
  ExperimentConfig config = load_config(common);
  if (parallel > 0) config.experiment.parallel = parallel;
  const ExperimentReport report = run_experiment(name, config, common.seed);
  report.write(common.out);
  print_aggregates(report, out);
  out << "report written to " << common.out << "\n";
  return 0;
}

int gradcheck(const Common& common, bool write, std::ostream& out) {
  GradcheckOptions opts;
  opts.seed = derive_seed(common.seed, {0x9c});
  const auto rows = run_gradcheck(opts);
  bool ok = true;
  nlohmann::json j = nlohmann::json::array();
  std::string csv = "op,instances,max_relative_error\n";
  for (const auto& r : rows) {
    const bool pass = r.max_relative_error <= kGradcheckTolerance;
    ok = ok && pass;
    char line[128];
    std::snprintf(line, sizeof line, "%-34s %4zu  %.3e  %s\n", r.op.c_str(), r.instances,
                  r.max_relative_error, pass ? "ok" : "FAIL");
    out << line;
    j.push_back({{"op", r.op}, {"instances", r.instances}, {"max_relative_error", r.max_relative_error}});
    char value[32];
    std::snprintf(value, sizeof value, "%.17g", r.max_relative_error);
    csv += r.op + "," + std::to_string(r.instances) + "," + value + "\n";
  }
  if (write) {
    write_text(std::filesystem::path(common.out) / "gradcheck.json", j.dump(2) + "\n");
    write_text(std::filesystem::path(common.out) / "gradcheck.csv", csv);
  }
  out << (ok ? "all ops within " : "some ops exceed ") << kGradcheckTolerance << "\n";
  return ok ? 0 : 2;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Graph/text contrastive fault classifier with trigger-generator backdoor"};
  app.name("feederclip");
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  Common common;

  auto* gen_cmd = app.add_subcommand("gen-data", "Simulate a labeled snapshot dataset");
  add_common(gen_cmd, common);

  std::string data_path;
  bool backdoor = false;
  std::size_t target_class = 0;
  double poison_pct = 0.10;
  auto* train_cmd = app.add_subcommand("train", "Train a clean or backdoored classifier");
  add_common(train_cmd, common);
  train_cmd->add_option("--data", data_path, "Training dataset (.jsonl)")
      ->required()
      ->check(CLI::ExistingFile);
  train_cmd->add_flag("--backdoor", backdoor, "Train jointly with a trigger generator");
  train_cmd->add_option("--target-class", target_class, "Attacker's target class index");
  train_cmd->add_option("--poison-pct", poison_pct, "Fraction of the training set poisoned")
      ->check(CLI::Range(0.0, 0.5));

  std::string model_dir, generator_path;
  bool apply_trigger = false;
  std::optional<std::size_t> eval_target;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a checkpoint on a dataset");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--model", model_dir, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", data_path, "Dataset (.jsonl)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_flag("--apply-trigger", apply_trigger, "Trigger every sample first");
  eval_cmd->add_option("--generator", generator_path, "Generator checkpoint")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--target-class", eval_target, "Report attack success toward this class");

  std::string sample_path;
  auto* attack_cmd = app.add_subcommand("attack", "Trigger one sample and compare predictions");
  add_common(attack_cmd, common);
  attack_cmd->add_option("--model", model_dir, "Checkpoint directory")->required();
  attack_cmd->add_option("--generator", generator_path, "Generator checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  attack_cmd->add_option("--sample", sample_path, "Single-sample JSON file")
      ->required()
      ->check(CLI::ExistingFile);

  std::string name;
  std::size_t parallel = 0;
  auto* exp_cmd = app.add_subcommand("experiment", "Run a full experiment and write a report");
  add_common(exp_cmd, common);
  exp_cmd->add_option("--name", name, "utility | sensitivity | comparison")
      ->required()
      ->check(CLI::IsMember({"utility", "sensitivity", "comparison"}));
  exp_cmd->add_option("--parallel", parallel, "Worker threads for independent runs");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op");
  add_common(grad_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  if (eval_cmd->parsed() && apply_trigger && generator_path.empty()) {
    err << "evaluate: --apply-trigger needs --generator\n" << eval_cmd->help();
    return 1;
  }

  try {
    if (gen_cmd->parsed()) return gen_data(common, out);
    if (train_cmd->parsed()) {
      return train(common, data_path, backdoor, target_class, poison_pct, out);
    }
    if (eval_cmd->parsed()) {
      return evaluate(common, model_dir, data_path, apply_trigger, generator_path, eval_target,
                      out);
    }
    if (attack_cmd->parsed()) return attack_one(common, model_dir, generator_path, sample_path, out);
    if (exp_cmd->parsed()) return experiment(common, name, parallel, out);
    if (grad_cmd->parsed()) return gradcheck(common, grad_cmd->count("--out") > 0, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace feederclip
