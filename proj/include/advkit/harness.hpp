#pragma once

// Experiment orchestration: the desk model zoo, example selection, success-rate
// evaluation, report emission, and the JSON configuration that drives the CLI.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advkit/attacks.hpp"
#include "advkit/dataset.hpp"
#include "advkit/models.hpp"
#include "advkit/transforms.hpp"

namespace advkit {

inline constexpr const char* kLibraryVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Configuration

/// Built-in architectures: "cnn_a", "cnn_b", "cnn_deep", "mlp".
ModelSpec builtin_architecture(const std::string& name, const Geometry& input, std::size_t classes);
std::vector<std::string> builtin_architecture_names();

struct ZooModelConfig {
  std::string name;
  std::string arch;
  TrainingMode mode = TrainingMode::normal;
  std::vector<std::string> donors;
  double learning_rate = 0.05;
  std::size_t epochs = 8;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  AdversarialCrafting crafting{4.0 / 255.0, 1};
};

struct DatasetConfig {
  enum class Kind { synth, idx } kind = Kind::synth;
  SynthConfig synth;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  std::filesystem::path train_images, train_labels, test_images, test_labels;
};

enum class SelectionRule { all_models, source_only };

struct EvalSettings {
  std::size_t n = 100;
  /// Each entry is one source: a single model or an equal-weight ensemble.
  std::vector<std::vector<std::string>> sources;
  /// Empty means every zoo model.
  std::vector<std::string> targets;
  SelectionRule selection = SelectionRule::all_models;
  std::size_t workers = 1;
};

/// Everything a CLI run needs. Loaded from JSON with keys
/// `dataset`, `models`, `zoo_dir`, `attacks`, `eval`, `seeds`.
struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<ZooModelConfig> models;
  std::filesystem::path zoo_dir = "zoo";
  std::vector<std::string> variants;
  AttackConfig attack;
  EvalSettings eval;
  std::vector<std::uint64_t> seeds{0};
};

/// The default desk configuration: 4 normal models and 3 defended ones.
ExperimentConfig desk_config();

/// Parses a config document; missing keys keep desk_config() defaults.
/// Throws ConfigError on unknown names or invalid values.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Fully resolved config including all defaulted values.
nlohmann::json experiment_config_json(const ExperimentConfig& cfg);

nlohmann::json attack_config_json(const AttackConfig& cfg);
AttackConfig parse_attack_config(const nlohmann::json& doc, AttackConfig base = {});

/// 16 hex digits of a 64-bit FNV-1a hash over the canonical JSON dump.
std::string config_hash(const nlohmann::json& doc);

/// The sweep grid: {MI, NI, ABI, SI-NI, CI-MI, CI-NI, CI-AB} x
/// {plain, DIM, TIM, TI-DIM, SIM, SI-TI-DIM}.
std::vector<std::string> bench_variants();

// ---------------------------------------------------------------------------
// Data and zoo

struct DeskData {
  Dataset train;
  Dataset test;
};

DeskData load_desk_data(const DatasetConfig& cfg);

struct Zoo {
  std::vector<std::string> names;
  std::vector<ModelParams> models;

  const ModelParams& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

/// Trains every model in declaration order. Donors must be declared earlier.
/// When `cache_dir` is set, checkpoints found there are loaded instead of
/// retrained (a checkpoint is reused only if its metadata matches) and newly
/// trained models are saved there. `log` receives one line per model.
Zoo build_zoo(const ExperimentConfig& cfg, const Dataset& train, const std::optional<std::filesystem::path>& cache_dir,
              const std::function<void(const std::string&)>& log = {});

// ---------------------------------------------------------------------------
// Selection and evaluation

/// The first n examples, in a seeded shuffle of the dataset, that every listed
/// model classifies correctly. Throws SelectionError if fewer qualify.
std::vector<LabeledExample> select_correctly_classified(const std::vector<const ModelParams*>& models,
                                                        const Dataset& data, std::size_t n, std::uint64_t seed);

struct SuccessRow {
  std::string attack;
  std::string source;
  std::string target;
  bool white_box = false;
  std::size_t successes = 0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string config_hash;

  double rate() const { return n == 0 ? 0.0 : static_cast<double>(successes) / static_cast<double>(n); }
  friend bool operator==(const SuccessRow&, const SuccessRow&) = default;
};

struct SuccessReport {
  std::vector<SuccessRow> rows;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::string library_version = kLibraryVersion;

  friend bool operator==(const SuccessReport&, const SuccessReport&) = default;
};

struct EvalConfig {
  std::vector<std::string> sources;
  std::vector<std::string> targets;
  std::string variant;
  AttackConfig attack;
  std::size_t n = 100;
  SelectionRule selection = SelectionRule::all_models;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

/// Crafted examples for one evaluation, in selection order.
struct CraftedBatch {
  std::vector<LabeledExample> examples;
  std::vector<Tensor> adversarial;
};

/// Selects examples, crafts them on the (equal-weight) source, and counts
/// misclassifications per target. Results do not depend on `workers`.
SuccessReport run_attack_eval(const EvalConfig& cfg, const Zoo& zoo, const Dataset& data,
                              CraftedBatch* crafted = nullptr);

/// Runs every (seed, source, variant) combination of the experiment.
SuccessReport run_bench(const ExperimentConfig& cfg, const Zoo& zoo, const Dataset& data);

/// Percent with three decimals: 483/1000 -> "48.300".
std::string format_rate(const SuccessRow& row);

enum class ReportFormat { csv, json };

std::string report_csv(const SuccessReport& report);
nlohmann::json report_json(const SuccessReport& report);
SuccessReport report_from_json(const nlohmann::json& doc);
void emit_report(const SuccessReport& report, ReportFormat format, const std::filesystem::path& path);
SuccessReport load_report_json(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Crop probe

struct CropProbeReport {
  std::string model;
  std::uint64_t seed = 0;
  std::vector<CropCurvePoint> points;
};

/// Widths 0, 2, ..., round(H * 40 / 299).
std::vector<std::size_t> probe_widths(std::size_t side);
CropProbeReport run_probe(const ModelParams& model, const Dataset& data, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Image dumps

/// Binary P6 with 8-bit channels; single-channel images are replicated to RGB.
void write_ppm(const Tensor& image, const std::filesystem::path& path);
std::filesystem::path dump_path(const std::filesystem::path& dir, std::size_t example_id, const std::string& variant);

}  // namespace advkit
