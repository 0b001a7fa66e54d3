#include "wavg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "wavg/errors.hpp"

namespace wavg {

using nlohmann::json;

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Reads the members of one JSON object, remembering which keys were consumed
// so that leftovers can be reported.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string key_path(const std::string& key) const { return join(path_, key); }

  Section sub(const std::string& key) { return Section(raw(key), key_path(key)); }

  template <typename T>
  void get(const std::string& key, T& dst) {
    if (!has(key)) return;
    dst = convert<T>(raw(key), key_path(key));
  }

  template <typename T>
  void get_optional(const std::string& key, std::optional<T>& dst) {
    if (!has(key)) return;
    const json& v = raw(key);
    if (v.is_null()) {
      dst.reset();
    } else {
      dst = convert<T>(v, key_path(key));
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(key_path(it.key()), "unknown key");
    }
  }

  template <typename T>
  static T convert(const json& v, const std::string& key) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(key, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(key, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(key, "expected a number");
      return v.get<double>();
    } else if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (v.is_number_unsigned()) return static_cast<T>(v.get<std::uint64_t>());
      if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<T>(v.get<std::int64_t>());
      throw ConfigError(key, "expected a non-negative integer");
    } else {
      // std::vector<E>
      using E = typename T::value_type;
      if (!v.is_array()) throw ConfigError(key, "expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<E>(v[i], key + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_dataset(Section s, RunConfig& run) {
  DatasetSpec& d = run.dataset;
  if (s.has("kind")) {
    const std::string kind = Section::convert<std::string>(s.raw("kind"), s.key_path("kind"));
    try {
      d.kind = parse_dataset_kind(kind);
    } catch (const InputError& e) {
      throw ConfigError(s.key_path("kind"), e.what());
    }
  }
  s.get("n_samples", d.n_samples);
  s.get("n_features", d.n_features);
  s.get("n_classes", d.n_classes);
  s.get("class_separation", d.class_separation);
  s.get("clusters_per_class", d.clusters_per_class);
  s.get("center_shift", d.center_shift);
  s.get("seed", d.seed);
  s.get("n_test", run.n_test);
  s.finish();
}

json dataset_json(const DatasetSpec& d) {
  return json{{"kind", to_string(d.kind)},
              {"n_samples", d.n_samples},
              {"n_features", d.n_features},
              {"n_classes", d.n_classes},
              {"class_separation", d.class_separation},
              {"clusters_per_class", d.clusters_per_class},
              {"center_shift", d.center_shift},
              {"seed", d.seed}};
}

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  Section root(j, "");
  root.get("experiment", cfg.experiment);
  root.get("seeds", cfg.seeds);
  if (!root.has("dataset")) throw ConfigError("dataset", "missing required section");
  RunConfig& run = cfg.run;
  parse_dataset(root.sub("dataset"), run);

  if (root.has("noise")) {
    const json& n = root.raw("noise");
    if (n.is_null()) {
      run.noise.reset();
    } else {
      Section s(n, "noise");
      NoiseSpec spec;
      s.get("rate", spec.rate);
      s.get("seed", spec.seed);
      s.finish();
      run.noise = spec;
    }
  }
  if (root.has("split")) {
    Section s = root.sub("split");
    s.get("train_fraction", run.train_fraction);
    s.finish();
  }
  if (root.has("model")) {
    Section s = root.sub("model");
    s.get("hidden_widths", run.model.hidden_widths);
    s.get("batchnorm", run.model.batchnorm);
    s.get("bn_momentum", run.model.bn_momentum);
    s.get("bn_epsilon", run.model.bn_epsilon);
    s.finish();
  }
  if (root.has("train")) {
    Section s = root.sub("train");
    s.get("epochs", run.epochs);
    s.get("batch_size", run.batch_size);
    s.get("track_train_accuracy", run.track_train_accuracy);
    s.finish();
  }
  if (root.has("schedule")) {
    Section s = root.sub("schedule");
    if (s.has("kind")) {
      const std::string kind = Section::convert<std::string>(s.raw("kind"), s.key_path("kind"));
      try {
        run.schedule.kind = parse_schedule_kind(kind);
      } catch (const InputError& e) {
        throw ConfigError(s.key_path("kind"), e.what());
      }
    }
    s.get("base_lr", run.schedule.base_lr);
    s.get("warmup_epochs", run.schedule.warmup_epochs);
    s.get("milestones", run.schedule.milestones);
    s.get("step_factor", run.schedule.step_factor);
    s.get_optional("freeze_after_step", run.schedule.freeze_after_step);
    s.finish();
  }
  if (root.has("sgd")) {
    Section s = root.sub("sgd");
    s.get("momentum", run.sgd.momentum);
    s.get("weight_decay", run.sgd.weight_decay);
    s.get("nesterov", run.sgd.nesterov);
    s.finish();
  }
  if (root.has("ema")) {
    Section s = root.sub("ema");
    s.get("decays", run.ema.decays);
    s.get("sampling_period", run.ema.sampling_period);
    s.get("warmup", run.ema.warmup);
    s.get("update_after_step", run.ema.update_after_step);
    s.get("track_recompute", run.ema.track_recompute);
    s.finish();
  }
  if (root.has("swa")) {
    Section s = root.sub("swa");
    s.get("enabled", run.swa.enabled);
    s.get("start_fraction", run.swa.start_fraction);
    s.finish();
  }
  if (root.has("bootstrap")) {
    Section s = root.sub("bootstrap");
    s.get("enabled", run.bootstrap.enabled);
    s.get_optional("decay", run.bootstrap.decay);
    s.get("keep_momentum", run.bootstrap.keep_momentum);
    s.finish();
  }
  if (root.has("lr_sweep")) {
    Section s = root.sub("lr_sweep");
    s.get("lrs", cfg.sweep_lrs);
    s.finish();
  }
  if (root.has("linear_eval")) {
    Section s = root.sub("linear_eval");
    s.get("epochs", cfg.linear_eval.epochs);
    s.get("lr", cfg.linear_eval.lr);
    s.get("momentum", cfg.linear_eval.momentum);
    s.get("batch_size", cfg.linear_eval.batch_size);
    s.get("center_shift", cfg.transfer.center_shift);
    s.get("dataset_seed_offset", cfg.transfer.dataset_seed_offset);
    s.get("supervised_reference", cfg.transfer.supervised_reference);
    s.finish();
  }
  root.finish();

  if (cfg.experiment.empty() || cfg.experiment.find_first_of("/\\") != std::string::npos ||
      cfg.experiment == "." || cfg.experiment == "..") {
    throw ConfigError("experiment", "must be a plain directory name");
  }
  if (cfg.seeds.empty()) throw ConfigError("seeds", "need at least one seed");
  for (double lr : cfg.sweep_lrs) {
    if (!(lr > 0.0)) throw ConfigError("lr_sweep.lrs", "learning rates must be positive");
  }
  if (cfg.sweep_lrs.empty()) throw ConfigError("lr_sweep.lrs", "need at least one learning rate");
  if (cfg.linear_eval.epochs == 0) throw ConfigError("linear_eval.epochs", "must be positive");
  if (!(cfg.linear_eval.lr > 0.0)) throw ConfigError("linear_eval.lr", "must be positive");
  if (!(cfg.linear_eval.momentum >= 0.0 && cfg.linear_eval.momentum < 1.0)) {
    throw ConfigError("linear_eval.momentum", "must be in [0,1)");
  }
  if (cfg.linear_eval.batch_size < 2) throw ConfigError("linear_eval.batch_size", "must be at least 2");
  if (!(cfg.transfer.center_shift >= 0.0)) throw ConfigError("linear_eval.center_shift", "must be non-negative");
  run.validate();
  return cfg;
}

json to_json(const ExperimentConfig& cfg) {
  const RunConfig& run = cfg.run;
  json dataset = dataset_json(run.dataset);
  dataset["n_test"] = run.n_test;
  json noise = nullptr;
  if (run.noise) noise = json{{"rate", run.noise->rate}, {"seed", run.noise->seed}};
  return json{
      {"experiment", cfg.experiment},
      {"seeds", cfg.seeds},
      {"dataset", dataset},
      {"noise", noise},
      {"split", {{"train_fraction", run.train_fraction}}},
      {"model",
       {{"hidden_widths", run.model.hidden_widths},
        {"batchnorm", run.model.batchnorm},
        {"bn_momentum", run.model.bn_momentum},
        {"bn_epsilon", run.model.bn_epsilon}}},
      {"train",
       {{"epochs", run.epochs}, {"batch_size", run.batch_size}, {"track_train_accuracy", run.track_train_accuracy}}},
      {"schedule",
       {{"kind", to_string(run.schedule.kind)},
        {"base_lr", run.schedule.base_lr},
        {"warmup_epochs", run.schedule.warmup_epochs},
        {"milestones", run.schedule.milestones},
        {"step_factor", run.schedule.step_factor},
        {"freeze_after_step", optional_json(run.schedule.freeze_after_step)}}},
      {"sgd",
       {{"momentum", run.sgd.momentum}, {"weight_decay", run.sgd.weight_decay}, {"nesterov", run.sgd.nesterov}}},
      {"ema",
       {{"decays", run.ema.decays},
        {"sampling_period", run.ema.sampling_period},
        {"warmup", run.ema.warmup},
        {"update_after_step", run.ema.update_after_step},
        {"track_recompute", run.ema.track_recompute}}},
      {"swa", {{"enabled", run.swa.enabled}, {"start_fraction", run.swa.start_fraction}}},
      {"bootstrap",
       {{"enabled", run.bootstrap.enabled},
        {"decay", optional_json(run.bootstrap.decay)},
        {"keep_momentum", run.bootstrap.keep_momentum}}},
      {"lr_sweep", {{"lrs", cfg.sweep_lrs}}},
      {"linear_eval",
       {{"epochs", cfg.linear_eval.epochs},
        {"lr", cfg.linear_eval.lr},
        {"momentum", cfg.linear_eval.momentum},
        {"batch_size", cfg.linear_eval.batch_size},
        {"center_shift", cfg.transfer.center_shift},
        {"dataset_seed_offset", cfg.transfer.dataset_seed_offset},
        {"supervised_reference", cfg.transfer.supervised_reference}}},
  };
}

bool is_builtin_config(const std::string& name) { return name == "base" || name == "noise"; }

json builtin_config(const std::string& name) {
  // Standard recipe: Nesterov momentum 0.9, batch 128, the five decays, decay
  // warm-up. Desk-scale choices: task, widths, epochs, lr, weight decay and
  // the sampling period of 1 step.
  json base = {
      {"experiment", "base"},
      {"seeds", {1, 2, 3}},
      {"dataset",
       {{"kind", "concentric_rings"},
        {"n_samples", 10000},
        {"n_features", 20},
        {"n_classes", 5},
        {"class_separation", 4.0},
        {"seed", 0},
        {"n_test", 2000}}},
      {"model", {{"hidden_widths", {128, 128}}, {"batchnorm", {true, true}}}},
      {"train", {{"epochs", 60}, {"batch_size", 128}}},
      {"schedule", {{"kind", "warmup_cosine"}, {"base_lr", 0.4}, {"warmup_epochs", 3}}},
      {"sgd", {{"momentum", 0.9}, {"weight_decay", 5e-4}, {"nesterov", true}}},
      {"ema",
       {{"decays", {0.968, 0.984, 0.992, 0.996, 0.998}}, {"sampling_period", 1}, {"warmup", true}}},
      {"swa", {{"enabled", true}, {"start_fraction", 0.75}}},
      {"bootstrap", {{"enabled", false}, {"decay", 0.992}}},
  };
  if (name == "base") return base;
  if (name == "noise") {
    json noise = base;
    noise["experiment"] = "noise";
    noise["noise"] = {{"rate", 0.4}, {"seed", 7}};
    noise["train"]["track_train_accuracy"] = true;
    return noise;
  }
  throw ConfigError("config", "unknown built-in config '" + name + "'");
}

json load_config_json(const std::string& source) {
  if (std::filesystem::exists(source)) {
    std::ifstream in(source);
    if (!in) throw ConfigError("config", "cannot open '" + source + "'");
    try {
      return json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config", std::string("malformed JSON: ") + e.what());
    }
  }
  if (is_builtin_config(source)) return builtin_config(source);
  throw ConfigError("config", "no such file or built-in config '" + source + "'");
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) {
    if (part.empty()) throw ConfigError(key, "empty path component");
    path.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    json& next = (*node)[path[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError(key, "'" + path[i] + "' is not a section");
    node = &next;
  }
  (*node)[path.back()] = std::move(value);
}

std::vector<double> parse_decay_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("ema.decays", "cannot parse decay '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("ema.decays", "empty decay list");
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      if (item.empty() || item[0] == '-') throw std::invalid_argument(item);
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("seeds", "cannot parse seed '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("seeds", "empty seed list");
  return out;
}

DatasetSpec transfer_target(const ExperimentConfig& cfg) {
  DatasetSpec d = cfg.run.dataset;
  d.center_shift = cfg.transfer.center_shift;
  d.seed = cfg.run.dataset.seed + cfg.transfer.dataset_seed_offset;
  return d;
}

}  // namespace wavg
