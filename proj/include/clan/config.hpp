#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "clan/data.hpp"
#include "clan/model.hpp"

namespace clan {

struct OptimConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch = 32;
  std::size_t epochs = 30;
  double lr_gamma = 0.5;     // lr multiplied by gamma ...
  std::size_t lr_step = 10;  // ... every lr_step epochs

  bool operator==(const OptimConfig&) const = default;

  double lr_at(std::size_t epoch) const {
    double v = lr;
    for (std::size_t k = 0; k < epoch / lr_step; ++k) v *= lr_gamma;
    return v;
  }
};

enum class Precision { F32, F64 };

struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  SyntheticSpec data;
  std::uint64_t seed = 1;
  Precision precision = Precision::F64;
  std::string output_dir = "clan_run";

  bool operator==(const RunConfig&) const = default;

  /// Cross-section consistency: the model reads the data section's image
  /// size and class count.
  void sync_and_validate() {
    model.backbone.input_size = data.image_size;
    model.num_classes = data.num_classes;
    data.validate();
    model.backbone.validate();
    if (model.num_classes < 2) throw ConfigError("config: data.num_classes must be >= 2");
    const std::size_t branches = branch_names(model).size();
    if (!model.branch_weights.empty() && model.branch_weights.size() != branches)
      throw ConfigError("config: model.branch_weights has " + std::to_string(model.branch_weights.size()) + " entries, model has " +
                        std::to_string(branches) + " branches");
    if (optim.batch == 0 || optim.lr_step == 0) throw ConfigError("config: optim.batch and optim.lr_step must be positive");
    if (optim.lr < 0 || optim.momentum < 0 || optim.weight_decay < 0) throw ConfigError("config: optimizer values must be >= 0");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename N>
N parse_number(const std::string& s) {
  N v{};
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) throw ConfigError("invalid number '" + s + "'");
  return v;
}

template <typename N>
std::vector<N> parse_list(const std::string& s) {
  std::vector<N> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<N>(trim(item)));
  return out;
}

template <typename N>
std::string format_list(const std::vector<N>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<N>) out += format_double(v[i]);
    else out += std::to_string(v[i]);
  }
  return out;
}

template <typename E>
E parse_enum(const std::string& s, const std::vector<std::pair<std::string, E>>& table) {
  std::string options;
  for (const auto& [name, value] : table) {
    if (name == s) return value;
    options += (options.empty() ? "" : "|") + name;
  }
  throw ConfigError("invalid value '" + s + "', expected one of " + options);
}

template <typename E>
std::string enum_name(E e, const std::vector<std::pair<std::string, E>>& table) {
  for (const auto& [name, value] : table)
    if (value == e) return name;
  return "?";
}

inline const std::vector<std::pair<std::string, RelationMetric>> kMetricNames = {
    {"gaussian", RelationMetric::Gaussian}, {"embedded_gaussian", RelationMetric::EmbeddedGaussian}, {"dot_product", RelationMetric::DotProduct}};
inline const std::vector<std::pair<std::string, ClsaPooling>> kPoolingNames = {
    {"avg", ClsaPooling::Avg}, {"max", ClsaPooling::Max}, {"avg_max", ClsaPooling::AvgAndMax}};
inline const std::vector<std::pair<std::string, Gate>> kGateNames = {{"linear", Gate::Linear}, {"sigmoid", Gate::Sigmoid}};
inline const std::vector<std::pair<std::string, ResampleMode>> kUpsampleNames = {{"nearest", ResampleMode::Nearest},
                                                                                 {"bilinear", ResampleMode::Bilinear}};
inline const std::vector<std::pair<std::string, Precision>> kPrecisionNames = {{"f32", Precision::F32}, {"f64", Precision::F64}};
inline const std::vector<std::pair<std::string, bool>> kBoolNames = {{"true", true}, {"false", false}};

/// Key table: name -> (setter, getter). One place defines the file schema.
struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<std::pair<std::string, Field>>& config_fields() {
  using C = RunConfig;
  using S = const std::string&;
  static const std::vector<std::pair<std::string, Field>> fields = {
      {"run.seed", {[](C& c, S v) { c.seed = parse_number<std::uint64_t>(v); }, [](const C& c) { return std::to_string(c.seed); }}},
      {"run.precision",
       {[](C& c, S v) { c.precision = parse_enum(v, kPrecisionNames); }, [](const C& c) { return enum_name(c.precision, kPrecisionNames); }}},
      {"run.output_dir", {[](C& c, S v) { c.output_dir = v; }, [](const C& c) { return c.output_dir; }}},

      {"model.stage_channels",
       {[](C& c, S v) { c.model.backbone.stage_channels = parse_list<std::size_t>(v); },
        [](const C& c) { return format_list(c.model.backbone.stage_channels); }}},
      {"model.stage_blocks",
       {[](C& c, S v) { c.model.backbone.stage_blocks = parse_list<std::size_t>(v); },
        [](const C& c) { return format_list(c.model.backbone.stage_blocks); }}},
      {"model.tap_stages",
       {[](C& c, S v) { c.model.backbone.tap_stages = parse_list<int>(v); }, [](const C& c) { return format_list(c.model.backbone.tap_stages); }}},
      {"model.top_stage",
       {[](C& c, S v) { c.model.backbone.top_stage = parse_number<int>(v); }, [](const C& c) { return std::to_string(c.model.backbone.top_stage); }}},
      {"model.metric",
       {[](C& c, S v) { c.model.metric = parse_enum(v, kMetricNames); }, [](const C& c) { return enum_name(c.model.metric, kMetricNames); }}},
      {"model.pooling",
       {[](C& c, S v) { c.model.pooling = parse_enum(v, kPoolingNames); }, [](const C& c) { return enum_name(c.model.pooling, kPoolingNames); }}},
      {"model.gate", {[](C& c, S v) { c.model.gate = parse_enum(v, kGateNames); }, [](const C& c) { return enum_name(c.model.gate, kGateNames); }}},
      {"model.upsample",
       {[](C& c, S v) { c.model.upsample = parse_enum(v, kUpsampleNames); }, [](const C& c) { return enum_name(c.model.upsample, kUpsampleNames); }}},
      {"model.c_int", {[](C& c, S v) { c.model.c_int = parse_number<std::size_t>(v); }, [](const C& c) { return std::to_string(c.model.c_int); }}},
      {"model.attention",
       {[](C& c, S v) { c.model.attention = parse_enum(v, kBoolNames); }, [](const C& c) { return enum_name(c.model.attention, kBoolNames); }}},
      {"model.branch_weights",
       {[](C& c, S v) { c.model.branch_weights = parse_list<double>(v); }, [](const C& c) { return format_list(c.model.branch_weights); }}},

      {"optim.lr", {[](C& c, S v) { c.optim.lr = parse_number<double>(v); }, [](const C& c) { return format_double(c.optim.lr); }}},
      {"optim.momentum",
       {[](C& c, S v) { c.optim.momentum = parse_number<double>(v); }, [](const C& c) { return format_double(c.optim.momentum); }}},
      {"optim.weight_decay",
       {[](C& c, S v) { c.optim.weight_decay = parse_number<double>(v); }, [](const C& c) { return format_double(c.optim.weight_decay); }}},
      {"optim.batch", {[](C& c, S v) { c.optim.batch = parse_number<std::size_t>(v); }, [](const C& c) { return std::to_string(c.optim.batch); }}},
      {"optim.epochs", {[](C& c, S v) { c.optim.epochs = parse_number<std::size_t>(v); }, [](const C& c) { return std::to_string(c.optim.epochs); }}},
      {"optim.lr_gamma",
       {[](C& c, S v) { c.optim.lr_gamma = parse_number<double>(v); }, [](const C& c) { return format_double(c.optim.lr_gamma); }}},
      {"optim.lr_step",
       {[](C& c, S v) { c.optim.lr_step = parse_number<std::size_t>(v); }, [](const C& c) { return std::to_string(c.optim.lr_step); }}},

      {"data.num_classes",
       {[](C& c, S v) { c.data.num_classes = parse_number<std::size_t>(v); }, [](const C& c) { return std::to_string(c.data.num_classes); }}},
      {"data.image_size",
       {[](C& c, S v) { c.data.image_size = parse_number<std::size_t>(v); }, [](const C& c) { return std::to_string(c.data.image_size); }}},
      {"data.base_shapes",
       {[](C& c, S v) { c.data.base_shapes = parse_number<std::size_t>(v); }, [](const C& c) { return std::to_string(c.data.base_shapes); }}},
      {"data.patch_size",
       {[](C& c, S v) { c.data.patch_size = parse_number<std::size_t>(v); }, [](const C& c) { return std::to_string(c.data.patch_size); }}},
      {"data.noise_std",
       {[](C& c, S v) { c.data.noise_std = parse_number<double>(v); }, [](const C& c) { return format_double(c.data.noise_std); }}},
      {"data.train_per_class",
       {[](C& c, S v) { c.data.samples_per_class = parse_number<std::size_t>(v); },
        [](const C& c) { return std::to_string(c.data.samples_per_class); }}},
      {"data.test_per_class",
       {[](C& c, S v) { c.data.test_samples_per_class = parse_number<std::size_t>(v); },
        [](const C& c) { return std::to_string(c.data.test_samples_per_class); }}},
      {"data.seed", {[](C& c, S v) { c.data.seed = parse_number<std::uint64_t>(v); }, [](const C& c) { return std::to_string(c.data.seed); }}},
  };
  return fields;
}

}  // namespace detail

/// Parses flat "section.key = value" text. Blank lines and lines starting
/// with '#' or ';' are ignored; unknown or repeated keys are errors. Keys not
/// present keep their defaults. `origin` prefixes error messages.
inline RunConfig parse_config(const std::string& text, const std::string& origin = "config") {
  RunConfig cfg;
  std::map<std::string, const detail::Field*> index;
  for (const auto& [name, field] : detail::config_fields()) index[name] = &field;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'section.key = value'");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    auto it = index.find(key);
    if (it == index.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      it->second->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  try {
    cfg.sync_and_validate();
  } catch (const Error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

/// Canonical text form listing every key.
inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& [name, field] : detail::config_fields()) {
    const std::string sec = name.substr(0, name.find('.'));
    if (sec != section) {
      if (!section.empty()) out += "\n";
      section = sec;
    }
    out += name + " = " + field.get(cfg) + "\n";
  }
  return out;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path + ": cannot read config file");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path);
}

}  // namespace clan
