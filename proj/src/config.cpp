#include "sharplens/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <string>

namespace sharplens {

namespace {

using json = nlohmann::json;
using Setter = std::function<void(const json&)>;

template <class T>
T get(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type (got " + std::string(v.type_name()) + ")");
  }
}

std::size_t get_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("config key '" + key + "' must be a nonnegative integer");
  }
  return v.get<std::size_t>();
}

std::uint64_t get_seed(const json& v, const std::string& key) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
    throw ConfigError("config key '" + key + "' must be a nonnegative integer");
  }
  return v.get<std::uint64_t>();
}

std::vector<std::size_t> get_counts(const json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError("config key '" + key + "' must be an array of integers");
  std::vector<std::size_t> out;
  for (const auto& e : v) out.push_back(get_count(e, key));
  return out;
}

void apply(const json& j, const std::map<std::string, Setter>& setters, const std::string& scope) {
  if (!j.is_object()) throw ConfigError(scope.empty() ? "config must be a JSON object" : "'" + scope + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) {
      throw ConfigError("unknown config key '" + (scope.empty() ? key : scope + "." + key) + "'");
    }
    it->second(value);
  }
}

template <class F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

}  // namespace

SweepConfig config_from_json(const json& j, SweepConfig c) {
  auto& t = c.train;
  auto& d = c.data;
  auto& s = d.synthetic;
  const std::map<std::string, Setter> synthetic{
      {"texture_seed", [&](const json& v) { s.texture_seed = get_seed(v, "texture_seed"); }},
      {"components", [&](const json& v) { s.components = get_count(v, "components"); }},
      {"phase_jitter", [&](const json& v) { s.phase_jitter = get<double>(v, "phase_jitter"); }},
      {"amplitude_jitter", [&](const json& v) { s.amplitude_jitter = get<double>(v, "amplitude_jitter"); }},
      {"pixel_noise", [&](const json& v) { s.pixel_noise = get<double>(v, "pixel_noise"); }},
      {"distractor_weight", [&](const json& v) { s.distractor_weight = get<double>(v, "distractor_weight"); }},
  };
  const std::map<std::string, Setter> top{
      {"epochs", [&](const json& v) { t.epochs = get_count(v, "epochs"); }},
      {"batch_size", [&](const json& v) { t.batch_size = get_count(v, "batch_size"); }},
      {"base_lr", [&](const json& v) { t.base_lr = get<double>(v, "base_lr"); }},
      {"warmup_start_lr", [&](const json& v) { t.warmup_start_lr = get<double>(v, "warmup_start_lr"); }},
      {"warmup_epochs", [&](const json& v) { t.warmup_epochs = get_count(v, "warmup_epochs"); }},
      {"momentum", [&](const json& v) { t.momentum = get<double>(v, "momentum"); }},
      {"weight_decay", [&](const json& v) { t.weight_decay = get<double>(v, "weight_decay"); }},
      {"seed", [&](const json& v) { c.seed = get_seed(v, "seed"); }},
      {"threads", [&](const json& v) { c.threads = get_count(v, "threads"); }},
      {"out", [&](const json& v) { c.out_dir = get<std::string>(v, "out"); }},
      {"widths", [&](const json& v) { c.widths = get_counts(v, "widths"); }},
      {"measure_epochs", [&](const json& v) { c.measure_epochs = get_counts(v, "measure_epochs"); }},
      {"noise_fraction", [&](const json& v) { c.noise_fraction = get<double>(v, "noise_fraction"); }},
      {"num_paths", [&](const json& v) { c.num_paths = get_count(v, "num_paths"); }},
      {"max_neighborhood", [&](const json& v) { c.max_neighborhood = get_count(v, "max_neighborhood"); }},
      {"tangent_directions", [&](const json& v) { c.tangent_directions = get_count(v, "tangent_directions"); }},
      {"tangent_step", [&](const json& v) { c.tangent_step = get<double>(v, "tangent_step"); }},
      {"hessian_normalization",
       [&](const json& v) {
         c.normalization = wrap("hessian_normalization", [&] {
           return normalization_from_string(get<std::string>(v, "hessian_normalization"));
         });
       }},
      {"volume_at_final", [&](const json& v) { c.volume_at_final = get<bool>(v, "volume_at_final"); }},
      {"save_checkpoints", [&](const json& v) { c.save_checkpoints = get<bool>(v, "save_checkpoints"); }},
      {"dataset",
       [&](const json& v) {
         d.source = wrap("dataset", [&] { return data_source_from_string(get<std::string>(v, "dataset")); });
       }},
      {"train_files",
       [&](const json& v) {
         d.train_files.clear();
         for (const auto& f : get<std::vector<std::string>>(v, "train_files")) d.train_files.emplace_back(f);
       }},
      {"test_file", [&](const json& v) { d.test_file = get<std::string>(v, "test_file"); }},
      {"num_train", [&](const json& v) { d.num_train = get_count(v, "num_train"); }},
      {"num_test", [&](const json& v) { d.num_test = get_count(v, "num_test"); }},
      {"num_classes", [&](const json& v) { d.num_classes = get_count(v, "num_classes"); }},
      {"synthetic", [&](const json& v) { apply(v, synthetic, "synthetic"); }},
  };
  apply(j, top, "");
  return c;
}

SweepConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path.string() + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

nlohmann::ordered_json config_to_json(const SweepConfig& c) {
  nlohmann::ordered_json j;
  j["epochs"] = c.train.epochs;
  j["batch_size"] = c.train.batch_size;
  j["base_lr"] = c.train.base_lr;
  j["warmup_start_lr"] = c.train.warmup_start_lr;
  j["warmup_epochs"] = c.train.warmup_epochs;
  j["momentum"] = c.train.momentum;
  j["weight_decay"] = c.train.weight_decay;
  j["seed"] = c.seed;
  j["widths"] = c.widths;
  j["measure_epochs"] = c.measure_epochs;
  j["noise_fraction"] = c.noise_fraction;
  j["num_paths"] = c.num_paths;
  j["max_neighborhood"] = c.max_neighborhood;
  j["tangent_directions"] = c.tangent_directions;
  j["tangent_step"] = c.tangent_step;
  j["hessian_normalization"] = to_string(c.normalization);
  j["volume_at_final"] = c.volume_at_final;
  j["save_checkpoints"] = c.save_checkpoints;
  j["dataset"] = to_string(c.data.source);
  std::vector<std::string> files;
  for (const auto& f : c.data.train_files) files.push_back(f.string());
  j["train_files"] = files;
  j["test_file"] = c.data.test_file.string();
  j["num_train"] = c.data.num_train;
  j["num_test"] = c.data.num_test;
  j["num_classes"] = c.data.num_classes;
  const auto& s = c.data.synthetic;
  j["synthetic"] = {{"texture_seed", s.texture_seed},         {"components", s.components},
                    {"phase_jitter", s.phase_jitter},         {"amplitude_jitter", s.amplitude_jitter},
                    {"pixel_noise", s.pixel_noise},           {"distractor_weight", s.distractor_weight}};
  return j;
}

}  // namespace sharplens
