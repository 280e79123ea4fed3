// advkit command-line interface.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "advkit/errors.hpp"
#include "advkit/harness.hpp"
#include "verify.hpp"

using namespace advkit;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

struct Common {
  std::string config;
  std::string zoo_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config (JSON); defaults to the built-in desk config");
  cmd->add_option("--zoo-dir", c.zoo_dir, "Checkpoint directory (overrides zoo_dir)");
  cmd->add_option("--seed", c.seed, "Single evaluation seed (overrides seeds)");
  cmd->add_option("--workers", c.workers, "Worker threads for crafting");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? desk_config() : load_experiment_config(c.config);
  if (!c.zoo_dir.empty()) cfg.zoo_dir = c.zoo_dir;
  if (c.seed) cfg.seeds = {*c.seed};
  if (c.workers) {
    if (*c.workers == 0) throw ConfigError("--workers must be at least 1");
    cfg.eval.workers = *c.workers;
  }
  return cfg;
}

void print_config(const nlohmann::json& doc) { fmt::print("resolved config:\n{}\n", doc.dump(2)); }

struct Loaded {
  DeskData data;
  Zoo zoo;
};

Loaded load_zoo(const ExperimentConfig& cfg) {
  Loaded out{load_desk_data(cfg.dataset), {}};
  out.zoo = build_zoo(cfg, out.data.train, cfg.zoo_dir, [](const std::string& line) { fmt::print("{}\n", line); });
  return out;
}

int cmd_train(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  print_config(experiment_config_json(cfg));
  const Loaded l = load_zoo(cfg);
  for (std::size_t i = 0; i < l.zoo.names.size(); ++i) {
    fmt::print("{}: held-out accuracy {:.4f}\n", l.zoo.names[i], accuracy(l.zoo.models[i], l.data.test));
  }
  return kOk;
}

struct AttackArgs {
  std::string variant = "ci-ab-fgm";
  std::optional<double> epsilon;
  double pixel_scale = 1.0;
  std::optional<std::size_t> iterations;
  std::optional<std::string> final_update;
  std::optional<std::string> fusion;
  std::vector<std::string> sources;
  std::size_t n = 10;
  std::string out_dir = "adv";
};

int cmd_attack(const Common& c, const AttackArgs& a) {
  ExperimentConfig cfg = resolve(c);
  if (a.epsilon) {
    if (!(a.pixel_scale > 0.0)) throw ConfigError("--pixel-scale must be positive");
    cfg.attack.epsilon = *a.epsilon / a.pixel_scale;
  }
  if (a.iterations) cfg.attack.iterations = *a.iterations;
  if (a.final_update) cfg.attack.final_update = parse_final_update(*a.final_update);
  if (a.fusion) cfg.attack.fusion = parse_fusion(*a.fusion);

  EvalConfig ec;
  ec.variant = a.variant;
  ec.sources = a.sources.empty() ? std::vector<std::string>{cfg.models.at(0).name} : a.sources;
  ec.targets = cfg.eval.targets;
  ec.attack = cfg.attack;
  ec.n = a.n;
  ec.selection = cfg.eval.selection;
  ec.seed = cfg.seeds.front();
  ec.workers = cfg.eval.workers;
  if (ec.n == 0) throw ConfigError("--n must be at least 1");

  AttackConfig seeded = cfg.attack;
  seeded.seed = ec.seed;
  const AttackConfig resolved = resolve_variant(parse_variant(a.variant), seeded);
  nlohmann::json doc = experiment_config_json(cfg);
  doc["run"] = {{"variant", a.variant}, {"sources", ec.sources}, {"n", ec.n}, {"out_dir", a.out_dir},
                {"resolved_attack", attack_config_json(resolved)}};
  print_config(doc);
  fmt::print("resolved epsilon: {:.6f}\n", resolved.epsilon);

  const Loaded l = load_zoo(cfg);
  CraftedBatch crafted;
  const SuccessReport report = run_attack_eval(ec, l.zoo, l.data.test, &crafted);

  std::filesystem::create_directories(a.out_dir);
  const std::string tag = variant_name(parse_variant(a.variant));
  for (std::size_t i = 0; i < crafted.examples.size(); ++i) {
    write_ppm(crafted.adversarial[i], dump_path(a.out_dir, crafted.examples[i].source_index, tag));
  }

  // Per-iteration diagnostics for the first example, re-run with an observer.
  std::vector<std::reference_wrapper<const ModelParams>> members;
  for (const auto& s : ec.sources) members.push_back(std::cref(l.zoo.get(s)));
  const EnsembleSpec source = EnsembleSpec::equal(members);
  const auto& first = crafted.examples.front();
  std::ofstream diag(std::filesystem::path(a.out_dir) / "diagnostics.jsonl");
  run_attack(parse_variant(a.variant), source, first.image, first.label, seeded, first.source_index,
             [&](const IterationRecord& rec, const AttackState&) { diag << diagnostics_json_line(rec) << '\n'; });

  emit_report(report, ReportFormat::csv, std::filesystem::path(a.out_dir) / "report.csv");
  fmt::print("{}", report_csv(report));
  return kOk;
}

struct ProbeArgs {
  std::string model;
  std::size_t n = 1000;
  std::string out = "crop_probe.csv";
};

int cmd_probe(const Common& c, const ProbeArgs& p) {
  const ExperimentConfig cfg = resolve(c);
  nlohmann::json doc = experiment_config_json(cfg);
  const std::string model = p.model.empty() ? cfg.models.at(0).name : p.model;
  doc["run"] = {{"model", model}, {"n", p.n}, {"out", p.out}};
  print_config(doc);
  const Loaded l = load_zoo(cfg);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(p.n, l.data.test.size()); ++i) idx.push_back(i);
  const CropProbeReport report = run_probe(l.zoo.get(model), l.data.test.subset(idx), cfg.seeds.front());
  write_crop_curve_csv(report.points, p.out);
  fmt::print("{}", crop_curve_csv(report.points));
  return kOk;
}

struct BenchArgs {
  std::string csv = "bench.csv";
  std::string json = "bench.json";
  std::optional<std::size_t> n;
};

int cmd_bench(const Common& c, const BenchArgs& b) {
  ExperimentConfig cfg = resolve(c);
  if (b.n) {
    if (*b.n == 0) throw ConfigError("--n must be at least 1");
    cfg.eval.n = *b.n;
  }
  print_config(experiment_config_json(cfg));
  const Loaded l = load_zoo(cfg);
  const SuccessReport report = run_bench(cfg, l.zoo, l.data.test);
  emit_report(report, ReportFormat::csv, b.csv);
  emit_report(report, ReportFormat::json, b.json);
  fmt::print("wrote {} rows to {} and {}\n", report.rows.size(), b.csv, b.json);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"advkit: adversarial attack library, desk model zoo, and transfer benchmark"};
  app.require_subcommand(1);
  Common common;
  AttackArgs attack;
  ProbeArgs probe;
  BenchArgs bench;

  auto* train = app.add_subcommand("train", "Train (or load cached) zoo models");
  add_common(train, common);

  auto* atk = app.add_subcommand("attack", "Craft adversarial examples for one variant");
  add_common(atk, common);
  atk->add_option("--variant", attack.variant, "Attack variant, e.g. mi-fgsm, ci-ab-fgm, ci-ab-si-ti-dim")->capture_default_str();
  atk->add_option("--epsilon", attack.epsilon, "Perturbation budget in units of --pixel-scale");
  atk->add_option("--pixel-scale", attack.pixel_scale, "Divisor applied to --epsilon (255 for 8-bit units)")->capture_default_str();
  atk->add_option("--iterations", attack.iterations, "Iterations T");
  atk->add_option("--final-update", attack.final_update, "clip or sign_step");
  atk->add_option("--fusion", attack.fusion, "Ensemble fusion: loss or logits");
  atk->add_option("--source", attack.sources, "Source model(s); several form an equal-weight ensemble");
  atk->add_option("--n", attack.n, "Number of examples")->capture_default_str();
  atk->add_option("--out", attack.out_dir, "Output directory for images, diagnostics, report")->capture_default_str();

  auto* prb = app.add_subcommand("probe-crop", "Loss under crop-and-pad at increasing crop widths");
  add_common(prb, common);
  prb->add_option("--model", probe.model, "Zoo model (default: first)");
  prb->add_option("--n", probe.n, "Number of held-out images")->capture_default_str();
  prb->add_option("--out", probe.out, "CSV output path")->capture_default_str();

  auto* bch = app.add_subcommand("bench", "Full transfer sweep over variants and sources");
  add_common(bch, common);
  bch->add_option("--csv", bench.csv, "CSV report path")->capture_default_str();
  bch->add_option("--json", bench.json, "JSON report path")->capture_default_str();
  bch->add_option("--n", bench.n, "Examples per evaluation (overrides eval.n)");

  auto* ver = app.add_subcommand("verify", "Run the quick invariant and oracle checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*train) return cmd_train(common);
    if (*atk) return cmd_attack(common, attack);
    if (*prb) return cmd_probe(common, probe);
    if (*bch) return cmd_bench(common, bench);
    if (*ver) return cli::run_verify(stdout) ? kOk : kRuntimeError;
  } catch (const ConfigError& e) {
    fmt::print(stderr, "configuration error: {}\n", e.what());
    return kConfigError;
  } catch (const UsageError& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kRuntimeError;
  }
  return kConfigError;
}
