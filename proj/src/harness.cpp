#include "advkit/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "advkit/errors.hpp"
#include "advkit/rng.hpp"

namespace advkit {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Architectures

namespace {

// Builds conv/pool stages, tracks the spatial size, then appends the head.
struct ArchBuilder {
  std::vector<LayerSpec> layers;
  std::size_t channels, height, width;

  explicit ArchBuilder(const Geometry& g) : channels(g.channels), height(g.height), width(g.width) {}

  ArchBuilder& conv(std::size_t out, std::size_t k, std::size_t stride = 1) {
    if (k > height || k > width) throw ArchitectureError(fmt::format("input {}x{} too small for a {}x{} kernel", height, width, k, k));
    layers.push_back(LayerSpec::conv2d(channels, out, k, stride));
    layers.push_back(LayerSpec::relu());
    channels = out;
    height = (height - k) / stride + 1;
    width = (width - k) / stride + 1;
    return *this;
  }
  ArchBuilder& pool() {
    layers.push_back(LayerSpec::maxpool2());
    height /= 2;
    width /= 2;
    return *this;
  }
  std::size_t flatten() {
    layers.push_back(LayerSpec::flatten());
    return channels * height * width;
  }
};

}  // namespace

std::vector<std::string> builtin_architecture_names() { return {"cnn_a", "cnn_b", "cnn_deep", "mlp"}; }

ModelSpec builtin_architecture(const std::string& name, const Geometry& input, std::size_t classes) {
  ArchBuilder b(input);
  if (name == "cnn_a") {
    const std::size_t f = b.conv(8, 6, 2).pool().conv(16, 3).pool().flatten();
    b.layers.push_back(LayerSpec::dense(f, classes));
  } else if (name == "cnn_b") {
    const std::size_t f = b.conv(4, 5).pool().conv(8, 5).pool().flatten();
    b.layers.push_back(LayerSpec::dense(f, classes));
  } else if (name == "cnn_deep") {
    const std::size_t f = b.conv(4, 5).pool().conv(8, 3).conv(8, 3).pool().flatten();
    b.layers.push_back(LayerSpec::dense(f, 32));
    b.layers.push_back(LayerSpec::relu());
    b.layers.push_back(LayerSpec::dense(32, classes));
  } else if (name == "mlp") {
    const std::size_t f = b.flatten();
    b.layers.push_back(LayerSpec::dense(f, 48));
    b.layers.push_back(LayerSpec::relu());
    b.layers.push_back(LayerSpec::dense(48, classes));
  } else {
    throw ConfigError(fmt::format("unknown architecture '{}' (cnn_a, cnn_b, cnn_deep, mlp)", name));
  }
  ModelSpec spec{name, std::move(b.layers), input, classes};
  infer_shapes(spec.layers, spec.input, spec.classes);
  return spec;
}

// ---------------------------------------------------------------------------
// Configuration

ExperimentConfig desk_config() {
  ExperimentConfig cfg;
  cfg.dataset.synth.seed = 1;
  cfg.dataset.train_per_class = 500;
  cfg.dataset.test_per_class = 200;

  const AdversarialCrafting crafting{4.0 / 255.0, 1};
  auto model = [&](std::string name, std::string arch, TrainingMode mode, std::uint64_t seed,
                   std::vector<std::string> donors = {}) {
    ZooModelConfig m;
    m.name = std::move(name);
    m.arch = std::move(arch);
    m.mode = mode;
    m.seed = seed;
    m.donors = std::move(donors);
    m.crafting = crafting;
    return m;
  };
  cfg.models = {
      model("cnn_a", "cnn_a", TrainingMode::normal, 11),
      model("cnn_b", "cnn_b", TrainingMode::normal, 12),
      model("cnn_deep", "cnn_deep", TrainingMode::normal, 13),
      model("mlp", "mlp", TrainingMode::normal, 14),
      model("cnn_a_adv", "cnn_a", TrainingMode::adversarial, 21),
      model("cnn_a_ens", "cnn_a", TrainingMode::ensemble_adversarial, 22, {"cnn_b", "mlp"}),
      model("cnn_deep_ens", "cnn_deep", TrainingMode::ensemble_adversarial, 23, {"cnn_a", "cnn_b", "mlp"}),
  };
  cfg.variants = bench_variants();
  cfg.eval.n = 100;
  cfg.eval.sources = {{"cnn_a"}, {"cnn_b"}, {"cnn_deep"}, {"mlp"}, {"cnn_a", "cnn_b", "cnn_deep", "mlp"}};
  cfg.seeds = {7};
  return cfg;
}

std::vector<std::string> bench_variants() {
  const std::vector<std::pair<std::string, std::string>> bases{
      {"mi-fgsm", "mi"},       {"ni-fgsm", "ni"},       {"abi-fgm", "ab"},       {"si-ni-fgsm", "si-ni"},
      {"ci-mi-fgsm", "ci-mi"}, {"ci-ni-fgsm", "ci-ni"}, {"ci-ab-fgm", "ci-ab"},
  };
  std::vector<std::string> out;
  for (const auto& [plain, stem] : bases) {
    out.push_back(plain);
    for (const char* aug : {"dim", "tim", "ti-dim", "sim", "si-ti-dim"}) out.push_back(stem + "-" + aug);
  }
  return out;
}

namespace {

// Rejects keys the schema does not know, which catches typos in config files.
void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(fmt::format("'{}' must be a JSON object", where));
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError(fmt::format("unknown key '{}' in '{}'", key, where));
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("'{}.{}': {}", where, key, e.what()));
  }
}

const char* crop_offsets_name(CropOffsetMode m) { return m == CropOffsetMode::uniform ? "uniform" : "centered"; }

CropOffsetMode parse_crop_offsets(const std::string& s) {
  if (s == "uniform") return CropOffsetMode::uniform;
  if (s == "centered") return CropOffsetMode::centered;
  throw ConfigError(fmt::format("unknown crop offset mode '{}' (uniform, centered)", s));
}

DirectionRule parse_rule(const std::string& s) {
  for (auto r : {DirectionRule::sign_step, DirectionRule::sign_momentum, DirectionRule::sign_nesterov,
                 DirectionRule::adabelief_l2}) {
    if (s == direction_rule_name(r)) return r;
  }
  throw ConfigError(fmt::format("unknown direction rule '{}'", s));
}

const char* selection_name(SelectionRule r) { return r == SelectionRule::all_models ? "all" : "source"; }

SelectionRule parse_selection(const std::string& s) {
  if (s == "all") return SelectionRule::all_models;
  if (s == "source") return SelectionRule::source_only;
  throw ConfigError(fmt::format("unknown selection rule '{}' (all, source)", s));
}

json synth_json(const SynthConfig& s) {
  return {{"classes", s.classes},       {"seed", s.seed},   {"noise", s.noise},
          {"blobs", s.blobs},           {"contrast", s.contrast}, {"background", s.background},
          {"jitter", s.jitter},         {"channels", s.geometry.channels},
          {"height", s.geometry.height}, {"width", s.geometry.width}};
}

json dataset_json(const DatasetConfig& d) {
  json out;
  if (d.kind == DatasetConfig::Kind::synth) {
    out = synth_json(d.synth);
    out["kind"] = "synth";
    out["train_per_class"] = d.train_per_class;
    out["test_per_class"] = d.test_per_class;
  } else {
    out = {{"kind", "idx"},
           {"train_images", d.train_images.string()},
           {"train_labels", d.train_labels.string()},
           {"test_images", d.test_images.string()},
           {"test_labels", d.test_labels.string()}};
  }
  return out;
}

json model_json(const ZooModelConfig& m) {
  return {{"name", m.name},
          {"arch", m.arch},
          {"training", training_mode_name(m.mode)},
          {"donors", m.donors},
          {"learning_rate", m.learning_rate},
          {"epochs", m.epochs},
          {"batch_size", m.batch_size},
          {"seed", m.seed},
          {"craft_epsilon", m.crafting.epsilon},
          {"craft_steps", m.crafting.steps}};
}

}  // namespace

json attack_config_json(const AttackConfig& c) {
  return {{"epsilon", c.epsilon},
          {"iterations", c.iterations},
          {"alpha", c.step()},
          {"mu", c.mu},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"delta", c.delta},
          {"copies", c.copy_count()},
          {"weights", c.copy_weights()},
          {"crops", c.crops},
          {"crop_min_fraction", c.crop_min_fraction},
          {"crop_offsets", crop_offsets_name(c.crop_offsets)},
          {"dim", c.dim},
          {"dim_probability", c.dim_probability},
          {"scale", scale_mode_name(c.scale)},
          {"forced_scale", c.forced_scale ? json(*c.forced_scale) : json(nullptr)},
          {"ti", {{"enabled", c.ti.enabled}, {"size", c.ti.size}, {"sigma", c.ti.resolved_sigma()}}},
          {"rule", direction_rule_name(c.rule)},
          {"final_update", final_update_name(c.final_update)},
          {"fusion", fusion_name(c.fusion)},
          {"lo", c.lo},
          {"hi", c.hi},
          {"seed", c.seed}};
}

AttackConfig parse_attack_config(const json& doc, AttackConfig c) {
  const std::string where = "attack";
  check_keys(doc, where,
             {"epsilon", "pixel_scale", "iterations", "alpha", "mu", "beta1", "beta2", "delta", "copies", "weights",
              "crops", "crop_min_fraction", "crop_offsets", "dim", "dim_probability", "scale", "forced_scale", "ti",
              "rule", "final_update", "fusion", "lo", "hi", "seed"});
  read(doc, "epsilon", c.epsilon, where);
  if (doc.contains("pixel_scale")) {
    double scale = 1.0;
    read(doc, "pixel_scale", scale, where);
    if (!(scale > 0.0)) throw ConfigError("attack.pixel_scale must be positive");
    c.epsilon /= scale;
  }
  read(doc, "iterations", c.iterations, where);
  if (doc.contains("alpha") && !doc["alpha"].is_null()) {
    double a = 0.0;
    read(doc, "alpha", a, where);
    c.alpha = a;
  }
  read(doc, "mu", c.mu, where);
  read(doc, "beta1", c.beta1, where);
  read(doc, "beta2", c.beta2, where);
  read(doc, "delta", c.delta, where);
  read(doc, "copies", c.copies, where);
  read(doc, "weights", c.weights, where);
  read(doc, "crops", c.crops, where);
  read(doc, "crop_min_fraction", c.crop_min_fraction, where);
  std::string s;
  if (doc.contains("crop_offsets")) {
    read(doc, "crop_offsets", s, where);
    c.crop_offsets = parse_crop_offsets(s);
  }
  read(doc, "dim", c.dim, where);
  read(doc, "dim_probability", c.dim_probability, where);
  if (doc.contains("scale")) {
    read(doc, "scale", s, where);
    c.scale = parse_scale_mode(s);
  }
  if (doc.contains("forced_scale") && !doc["forced_scale"].is_null()) {
    double f = 0.0;
    read(doc, "forced_scale", f, where);
    c.forced_scale = f;
  }
  if (doc.contains("ti")) {
    const json& ti = doc["ti"];
    check_keys(ti, "attack.ti", {"enabled", "size", "sigma"});
    read(ti, "enabled", c.ti.enabled, "attack.ti");
    read(ti, "size", c.ti.size, "attack.ti");
    read(ti, "sigma", c.ti.sigma, "attack.ti");
  }
  if (doc.contains("rule")) {
    read(doc, "rule", s, where);
    c.rule = parse_rule(s);
  }
  if (doc.contains("final_update")) {
    read(doc, "final_update", s, where);
    c.final_update = parse_final_update(s);
  }
  if (doc.contains("fusion")) {
    read(doc, "fusion", s, where);
    c.fusion = parse_fusion(s);
  }
  read(doc, "lo", c.lo, where);
  read(doc, "hi", c.hi, where);
  read(doc, "seed", c.seed, where);
  c.validate();
  return c;
}

ExperimentConfig parse_experiment_config(const json& doc) {
  ExperimentConfig cfg = desk_config();
  check_keys(doc, "config", {"dataset", "models", "zoo_dir", "attacks", "eval", "seeds"});

  if (doc.contains("dataset")) {
    const json& d = doc["dataset"];
    const std::string w = "dataset";
    check_keys(d, w,
               {"kind", "classes", "seed", "noise", "blobs", "contrast", "background", "jitter", "channels", "height",
                "width", "train_per_class", "test_per_class", "train_images", "train_labels", "test_images",
                "test_labels"});
    std::string kind = "synth";
    read(d, "kind", kind, w);
    if (kind == "synth") {
      cfg.dataset.kind = DatasetConfig::Kind::synth;
      SynthConfig& s = cfg.dataset.synth;
      read(d, "classes", s.classes, w);
      read(d, "seed", s.seed, w);
      read(d, "noise", s.noise, w);
      read(d, "blobs", s.blobs, w);
      read(d, "contrast", s.contrast, w);
      read(d, "background", s.background, w);
      read(d, "jitter", s.jitter, w);
      read(d, "channels", s.geometry.channels, w);
      read(d, "height", s.geometry.height, w);
      read(d, "width", s.geometry.width, w);
      read(d, "train_per_class", cfg.dataset.train_per_class, w);
      read(d, "test_per_class", cfg.dataset.test_per_class, w);
    } else if (kind == "idx") {
      cfg.dataset.kind = DatasetConfig::Kind::idx;
      std::string p;
      for (auto [key, target] : {std::pair{"train_images", &cfg.dataset.train_images},
                                 std::pair{"train_labels", &cfg.dataset.train_labels},
                                 std::pair{"test_images", &cfg.dataset.test_images},
                                 std::pair{"test_labels", &cfg.dataset.test_labels}}) {
        if (!d.contains(key)) throw ConfigError(fmt::format("dataset.{} is required for idx datasets", key));
        read(d, key, p, w);
        *target = p;
      }
    } else {
      throw ConfigError(fmt::format("unknown dataset kind '{}' (synth, idx)", kind));
    }
  }

  if (doc.contains("models")) {
    if (!doc["models"].is_array()) throw ConfigError("'models' must be an array");
    cfg.models.clear();
    for (const json& m : doc["models"]) {
      check_keys(m, "models[]",
                 {"name", "arch", "training", "donors", "learning_rate", "epochs", "batch_size", "seed",
                  "craft_epsilon", "craft_steps"});
      ZooModelConfig z;
      z.crafting.epsilon = 4.0 / 255.0;
      read(m, "name", z.name, "models[]");
      z.arch = z.name;
      read(m, "arch", z.arch, "models[]");
      std::string mode = "normal";
      read(m, "training", mode, "models[]");
      z.mode = parse_training_mode(mode);
      read(m, "donors", z.donors, "models[]");
      read(m, "learning_rate", z.learning_rate, "models[]");
      read(m, "epochs", z.epochs, "models[]");
      read(m, "batch_size", z.batch_size, "models[]");
      read(m, "seed", z.seed, "models[]");
      read(m, "craft_epsilon", z.crafting.epsilon, "models[]");
      read(m, "craft_steps", z.crafting.steps, "models[]");
      if (z.name.empty()) throw ConfigError("every model needs a name");
      cfg.models.push_back(std::move(z));
    }
  }

  if (doc.contains("zoo_dir")) {
    std::string p;
    read(doc, "zoo_dir", p, "config");
    cfg.zoo_dir = p;
  }

  if (doc.contains("attacks")) {
    const json& a = doc["attacks"];
    check_keys(a, "attacks", {"variants", "config"});
    read(a, "variants", cfg.variants, "attacks");
    if (a.contains("config")) cfg.attack = parse_attack_config(a["config"], cfg.attack);
  }

  if (doc.contains("eval")) {
    const json& e = doc["eval"];
    check_keys(e, "eval", {"n", "sources", "targets", "selection", "workers"});
    read(e, "n", cfg.eval.n, "eval");
    if (e.contains("sources")) {
      cfg.eval.sources.clear();
      for (const json& s : e["sources"]) {
        if (s.is_string()) {
          cfg.eval.sources.push_back({s.get<std::string>()});
        } else if (s.is_array()) {
          cfg.eval.sources.push_back(s.get<std::vector<std::string>>());
        } else {
          throw ConfigError("eval.sources entries must be a model name or a list of names");
        }
      }
    }
    read(e, "targets", cfg.eval.targets, "eval");
    if (e.contains("selection")) {
      std::string s;
      read(e, "selection", s, "eval");
      cfg.eval.selection = parse_selection(s);
    }
    read(e, "workers", cfg.eval.workers, "eval");
  }
  read(doc, "seeds", cfg.seeds, "config");

  // Cross-field checks.
  std::set<std::string> names;
  for (const auto& m : cfg.models) {
    for (const auto& d : m.donors) {
      if (!names.contains(d)) throw ConfigError(fmt::format("model '{}': donor '{}' must be declared earlier", m.name, d));
    }
    if (m.mode == TrainingMode::ensemble_adversarial && m.donors.empty()) {
      throw ConfigError(fmt::format("model '{}': ensemble-adversarial training needs donors", m.name));
    }
    if (!names.insert(m.name).second) throw ConfigError(fmt::format("duplicate model name '{}'", m.name));
  }
  if (cfg.eval.n == 0) throw ConfigError("eval.n must be at least 1");
  if (cfg.eval.workers == 0) throw ConfigError("eval.workers must be at least 1");
  if (cfg.seeds.empty()) throw ConfigError("at least one seed is required");
  for (const auto& src : cfg.eval.sources) {
    if (src.empty()) throw ConfigError("empty source set");
    for (const auto& s : src) {
      if (!names.contains(s)) throw ConfigError(fmt::format("source model '{}' is not in the zoo", s));
    }
  }
  for (const auto& t : cfg.eval.targets) {
    if (!names.contains(t)) throw ConfigError(fmt::format("target model '{}' is not in the zoo", t));
  }
  for (const auto& v : cfg.variants) resolve_variant(parse_variant(v), cfg.attack);
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("'{}': {}", path.string(), e.what()));
  }
  return parse_experiment_config(doc);
}

json experiment_config_json(const ExperimentConfig& cfg) {
  json models = json::array();
  for (const auto& m : cfg.models) models.push_back(model_json(m));
  json sources = json::array();
  for (const auto& s : cfg.eval.sources) sources.push_back(s);
  return {{"dataset", dataset_json(cfg.dataset)},
          {"models", models},
          {"zoo_dir", cfg.zoo_dir.string()},
          {"attacks", {{"variants", cfg.variants}, {"config", attack_config_json(cfg.attack)}}},
          {"eval",
           {{"n", cfg.eval.n},
            {"sources", sources},
            {"targets", cfg.eval.targets},
            {"selection", selection_name(cfg.eval.selection)},
            {"workers", cfg.eval.workers}}},
          {"seeds", cfg.seeds}};
}

std::string config_hash(const json& doc) {
  const std::string text = doc.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

// ---------------------------------------------------------------------------
// Data and zoo

DeskData load_desk_data(const DatasetConfig& cfg) {
  if (cfg.kind == DatasetConfig::Kind::idx) {
    return {load_idx(cfg.train_images, cfg.train_labels), load_idx(cfg.test_images, cfg.test_labels)};
  }
  SynthConfig s = cfg.synth;
  s.per_class = cfg.train_per_class;
  s.split = 0;
  Dataset train = synth_dataset(s);
  s.per_class = cfg.test_per_class;
  s.split = 1;
  return {std::move(train), synth_dataset(s)};
}

const ModelParams& Zoo::get(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return models[i];
  }
  throw ConfigError(fmt::format("model '{}' is not in the zoo", name));
}

bool Zoo::contains(const std::string& name) const {
  return std::find(names.begin(), names.end(), name) != names.end();
}

Zoo build_zoo(const ExperimentConfig& cfg, const Dataset& train_set, const std::optional<std::filesystem::path>& cache_dir,
              const std::function<void(const std::string&)>& log) {
  Zoo zoo;
  std::map<std::string, std::shared_ptr<const ModelParams>> built;
  std::map<std::string, std::string> hashes;
  const std::string data_hash = fmt::format("{:016x}", content_hash(train_set.images));
  if (cache_dir) std::filesystem::create_directories(*cache_dir);

  for (const auto& m : cfg.models) {
    const ModelSpec spec = builtin_architecture(m.arch, train_set.geometry, train_set.classes);
    // The cache key covers the training data, this model's recipe, and its donors' keys.
    json key = model_json(m);
    key["data"] = data_hash;
    for (const auto& d : m.donors) {
      if (!hashes.contains(d)) throw ConfigError(fmt::format("model '{}': donor '{}' must be declared earlier", m.name, d));
      key["donor_keys"].push_back(hashes.at(d));
    }
    const std::string hash = config_hash(key);
    hashes[m.name] = hash;

    std::optional<ModelParams> model;
    std::filesystem::path file;
    if (cache_dir) {
      file = *cache_dir / fmt::format("{}-{}.pbck", m.name, hash);
      if (std::filesystem::exists(file)) {
        try {
          model = load_checkpoint(file);
          if (log) log(fmt::format("{}: loaded {}", m.name, file.string()));
        } catch (const CheckpointError& e) {
          if (log) log(fmt::format("{}: ignoring unreadable checkpoint ({})", m.name, e.what()));
        }
      }
    }
    if (!model) {
      TrainConfig tc;
      tc.learning_rate = m.learning_rate;
      tc.epochs = m.epochs;
      tc.batch_size = m.batch_size;
      tc.seed = m.seed;
      tc.mode = m.mode;
      tc.crafting = m.crafting;
      for (const auto& d : m.donors) tc.donors.push_back(built.at(d));
      ModelParams init = init_model(spec, m.seed);
      init.meta.name = m.name;
      model = train(std::move(init), train_set, tc);
      if (log) log(fmt::format("{}: trained ({}, {} parameters)", m.name, training_mode_name(m.mode), model->parameter_count()));
      if (cache_dir) save_checkpoint(*model, file);
    }
    built[m.name] = std::make_shared<const ModelParams>(*model);
    zoo.names.push_back(m.name);
    zoo.models.push_back(std::move(*model));
  }
  return zoo;
}

// ---------------------------------------------------------------------------
// Selection and evaluation

std::vector<LabeledExample> select_correctly_classified(const std::vector<const ModelParams*>& models,
                                                        const Dataset& data, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("selection size must be at least 1");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng::derive(seed, 0, 0x5e1ec7);
  for (std::size_t i = order.size(); i-- > 1;) {
    std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  }

  std::vector<bool> ok(data.size(), true);
  for (const ModelParams* model : models) {
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
      const auto pred = predict(*model, data.gather(idx));
      for (std::size_t j = 0; j < idx.size(); ++j) {
        if (pred[j] != data.labels[idx[j]]) ok[idx[j]] = false;
      }
    }
  }

  std::vector<LabeledExample> out;
  std::size_t qualified = 0;
  for (auto i : order) {
    if (!ok[i]) continue;
    ++qualified;
    if (out.size() < n) out.push_back({data.image(i), data.labels[i], i});
  }
  if (qualified < n) {
    throw SelectionError(fmt::format("only {} of {} examples are classified correctly by all {} filtering models; {} requested",
                                     qualified, data.size(), models.size(), n),
                         qualified);
  }
  return out;
}

namespace {

std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::vector<const ModelParams*> filtering_models(const EvalConfig& cfg, const Zoo& zoo) {
  std::vector<const ModelParams*> out;
  if (cfg.selection == SelectionRule::all_models) {
    for (const auto& m : zoo.models) out.push_back(&m);
  } else {
    for (const auto& s : cfg.sources) out.push_back(&zoo.get(s));
  }
  return out;
}

// Crafts every example; example i always uses stream (seed, source_index), so
// the partition across workers cannot change any result.
std::vector<Tensor> craft_all(const Variant& variant, const AttackConfig& attack, const EnsembleSpec& source,
                              const std::vector<LabeledExample>& examples, std::size_t workers) {
  std::vector<Tensor> adv(examples.size());
  auto work = [&](std::size_t w, std::size_t stride) {
    for (std::size_t i = w; i < examples.size(); i += stride) {
      adv[i] = run_attack(variant, source, examples[i].image, examples[i].label, attack, examples[i].source_index);
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, examples.size()));
  if (workers == 1) {
    work(0, 1);
    return adv;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        work(w, workers);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return adv;
}

std::vector<SuccessRow> evaluate(const EvalConfig& cfg, const Zoo& zoo, const std::vector<LabeledExample>& examples,
                                 CraftedBatch* crafted) {
  if (cfg.sources.empty()) throw ConfigError("evaluation needs at least one source model");
  const Variant variant = parse_variant(cfg.variant);
  AttackConfig attack = cfg.attack;
  attack.seed = cfg.seed;
  const AttackConfig resolved = resolve_variant(variant, attack);
  const std::string hash = config_hash(attack_config_json(resolved));

  std::vector<std::reference_wrapper<const ModelParams>> members;
  for (const auto& s : cfg.sources) members.push_back(std::cref(zoo.get(s)));
  const EnsembleSpec source = EnsembleSpec::equal(members);

  std::vector<Tensor> adv = craft_all(variant, attack, source, examples, cfg.workers);
  Tensor batch = stack_batch(adv);
  const std::vector<std::string> targets = cfg.targets.empty() ? zoo.names : cfg.targets;

  std::vector<SuccessRow> rows;
  for (const auto& t : targets) {
    const auto pred = predict(zoo.get(t), batch);
    SuccessRow row;
    row.attack = variant_name(variant);
    row.source = join(cfg.sources, "+");
    row.target = t;
    row.white_box = std::find(cfg.sources.begin(), cfg.sources.end(), t) != cfg.sources.end();
    row.n = examples.size();
    for (std::size_t i = 0; i < examples.size(); ++i) row.successes += pred[i] != examples[i].label ? 1 : 0;
    row.seed = cfg.seed;
    row.config_hash = hash;
    rows.push_back(std::move(row));
  }
  if (crafted) *crafted = {examples, std::move(adv)};
  return rows;
}

}  // namespace

SuccessReport run_attack_eval(const EvalConfig& cfg, const Zoo& zoo, const Dataset& data, CraftedBatch* crafted) {
  if (cfg.n == 0) throw ConfigError("example count must be at least 1");
  for (const auto& s : cfg.sources) zoo.get(s);
  for (const auto& t : cfg.targets) zoo.get(t);
  const auto examples = select_correctly_classified(filtering_models(cfg, zoo), data, cfg.n, cfg.seed);
  SuccessReport report;
  report.rows = evaluate(cfg, zoo, examples, crafted);
  json key = attack_config_json(cfg.attack);
  key["variant"] = cfg.variant;
  key["sources"] = cfg.sources;
  key["n"] = cfg.n;
  key["selection"] = selection_name(cfg.selection);
  report.config_hash = config_hash(key);
  report.seeds = {cfg.seed};
  return report;
}

SuccessReport run_bench(const ExperimentConfig& cfg, const Zoo& zoo, const Dataset& data) {
  SuccessReport report;
  json key = experiment_config_json(cfg);
  key["eval"].erase("workers");  // parallelism never changes results
  report.config_hash = config_hash(key);
  report.seeds = cfg.seeds;
  for (auto seed : cfg.seeds) {
    for (const auto& src : cfg.eval.sources) {
      EvalConfig ec;
      ec.sources = src;
      ec.targets = cfg.eval.targets;
      ec.attack = cfg.attack;
      ec.n = cfg.eval.n;
      ec.selection = cfg.eval.selection;
      ec.seed = seed;
      ec.workers = cfg.eval.workers;
      const auto examples = select_correctly_classified(filtering_models(ec, zoo), data, ec.n, seed);
      for (const auto& v : cfg.variants) {
        ec.variant = v;
        auto rows = evaluate(ec, zoo, examples, nullptr);
        report.rows.insert(report.rows.end(), rows.begin(), rows.end());
      }
    }
  }
  return report;
}

std::string format_rate(const SuccessRow& row) {
  // Integer arithmetic keeps the rounding exact: 483/1000 -> 48.300.
  if (row.n == 0) return "0.000";
  const auto scaled = (static_cast<unsigned long long>(row.successes) * 100000ULL * 2 + row.n) / (2 * row.n);
  return fmt::format("{}.{:03}", scaled / 1000, scaled % 1000);
}

std::string report_csv(const SuccessReport& report) {
  std::string out = "attack,source,target,white_box,success_rate,n,seed,config_hash\n";
  for (const auto& r : report.rows) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", r.attack, r.source, r.target, r.white_box ? "true" : "false",
                       format_rate(r), r.n, r.seed, r.config_hash);
  }
  return out;
}

json report_json(const SuccessReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"attack", r.attack},
                    {"source", r.source},
                    {"target", r.target},
                    {"white_box", r.white_box},
                    {"successes", r.successes},
                    {"n", r.n},
                    {"success_rate", format_rate(r)},
                    {"seed", r.seed},
                    {"config_hash", r.config_hash}});
  }
  return {{"library_version", report.library_version},
          {"config_hash", report.config_hash},
          {"seeds", report.seeds},
          {"rows", rows}};
}

SuccessReport report_from_json(const json& doc) {
  try {
    SuccessReport report;
    report.library_version = doc.at("library_version").get<std::string>();
    report.config_hash = doc.at("config_hash").get<std::string>();
    report.seeds = doc.at("seeds").get<std::vector<std::uint64_t>>();
    for (const json& r : doc.at("rows")) {
      SuccessRow row;
      row.attack = r.at("attack").get<std::string>();
      row.source = r.at("source").get<std::string>();
      row.target = r.at("target").get<std::string>();
      row.white_box = r.at("white_box").get<bool>();
      row.successes = r.at("successes").get<std::size_t>();
      row.n = r.at("n").get<std::size_t>();
      row.seed = r.at("seed").get<std::uint64_t>();
      row.config_hash = r.at("config_hash").get<std::string>();
      if (row.successes > row.n) throw ConfigError(fmt::format("row {}/{}: more successes than examples", row.attack, row.target));
      report.rows.push_back(std::move(row));
    }
    return report;
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("malformed report: {}", e.what()));
  }
}

void emit_report(const SuccessReport& report, ReportFormat format, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot write report '{}'", path.string()));
  if (format == ReportFormat::csv) {
    out << report_csv(report);
  } else {
    out << report_json(report).dump(2) << '\n';
  }
  if (!out) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

SuccessReport load_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open report '{}'", path.string()));
  try {
    return report_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("'{}': {}", path.string(), e.what()));
  }
}

// ---------------------------------------------------------------------------
// Crop probe

std::vector<std::size_t> probe_widths(std::size_t side) {
  const auto w_max = static_cast<std::size_t>(std::lround(static_cast<double>(side) * 40.0 / 299.0));
  std::vector<std::size_t> widths;
  for (std::size_t w = 0; w <= w_max && w < side; w += 2) widths.push_back(w);
  return widths;
}

CropProbeReport run_probe(const ModelParams& model, const Dataset& data, std::uint64_t seed) {
  if (data.geometry.height != data.geometry.width) throw ConfigError("the crop probe needs square images");
  return {model.meta.name, seed, crop_invariance_loss_curve(model, data, probe_widths(data.geometry.height), seed)};
}

// ---------------------------------------------------------------------------
// Image dumps

void write_ppm(const Tensor& image, const std::filesystem::path& path) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[0] != 1 || (s[1] != 1 && s[1] != 3)) {
    throw DimensionError("PPM export expects a [1, 1|3, H, W] image");
  }
  const std::size_t c = s[1], h = s[2], w = s[3];
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot write image '{}'", path.string()));
  out << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = image[((c == 1 ? 0 : ch) * h + y) * w + x];
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
      }
    }
  }
  if (!out) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

std::filesystem::path dump_path(const std::filesystem::path& dir, std::size_t example_id, const std::string& variant) {
  return dir / fmt::format("{}_{}.ppm", example_id, variant);
}

}  // namespace advkit
