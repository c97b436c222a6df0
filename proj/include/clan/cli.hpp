#pragma once

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "clan/config.hpp"
#include "clan/gradcheck_suite.hpp"
#include "clan/train.hpp"
#include "clan/viz.hpp"

namespace clan {

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitConfig = 2, kExitNumeric = 3 };

struct CliOptions {
  std::string command;  // train | eval | viz | gradcheck
  std::string config;
  std::string checkpoint;
  std::string branches;
  std::optional<std::size_t> sample;
  std::string out;
  std::string precision_override;  // value of CLAN_PRECISION, empty when unset
};

inline std::string precision_from_env() {
  const char* v = std::getenv("CLAN_PRECISION");
  return v ? std::string(v) : std::string();
}

inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw ConfigError("CLAN_PRECISION must be f32 or f64, got '" + s + "'");
}

/// Explicit --config wins; otherwise a config.ini next to the checkpoint;
/// otherwise built-in defaults. The precision override applies last.
inline RunConfig resolve_config(const CliOptions& opt) {
  RunConfig cfg;
  if (!opt.config.empty()) {
    cfg = load_config(opt.config);
  } else if (!opt.checkpoint.empty()) {
    const auto sibling = std::filesystem::path(opt.checkpoint).parent_path() / "config.ini";
    if (std::filesystem::exists(sibling)) cfg = load_config(sibling.string());
    else cfg.sync_and_validate();
  } else {
    cfg.sync_and_validate();
  }
  if (!opt.precision_override.empty()) cfg.precision = parse_precision(opt.precision_override);
  return cfg;
}

namespace detail {

template <typename T>
ClanModel<T> load_model(const RunConfig& cfg, const std::string& checkpoint) {
  if (checkpoint.empty()) throw UsageError("--checkpoint is required");
  auto model = ClanModel<T>::init(cfg.model, cfg.seed);
  model.load_state(read_checkpoint(checkpoint));
  return model;
}

template <typename T>
int cmd_train(const RunConfig& cfg, const CliOptions& opt, std::ostream& out) {
  const std::string dir = opt.out.empty() ? cfg.output_dir : opt.out;
  train<T>(cfg, &out, dir);
  out << "checkpoint=" << dir << "/checkpoint.clan\n";
  return kExitOk;
}

template <typename T>
int cmd_eval(const RunConfig& cfg, const CliOptions& opt, std::ostream& out) {
  const auto model = load_model<T>(cfg, opt.checkpoint);
  const auto subsets = opt.branches.empty() ? default_subsets(model.branches) : parse_subsets(opt.branches, model.branches);
  const auto test_set = synth_generate(cfg.data, Split::Test);
  const auto acc = evaluate(model, test_set, subsets);
  for (std::size_t s = 0; s < subsets.size(); ++s)
    out << "subset=" << subsets[s].name << " accuracy=" << format_double(acc[s]) << " samples=" << test_set.size() << "\n";
  return kExitOk;
}

template <typename T>
int cmd_viz(const RunConfig& cfg, const CliOptions& opt, std::ostream& out) {
  const auto model = load_model<T>(cfg, opt.checkpoint);
  const std::size_t index = opt.sample.value_or(0);
  const std::size_t n = cfg.data.count(Split::Test);
  if (index >= n) throw UsageError("--sample " + std::to_string(index) + " out of range (test split has " + std::to_string(n) + ")");
  const auto sample = synth_sample(cfg.data, Split::Test, index, class_patterns(cfg.data));
  const std::string dir = opt.out.empty() ? cfg.output_dir + "/viz" : opt.out;
  for (const auto& path : export_attention(model, sample, dir)) out << "wrote=" << path << "\n";
  return kExitOk;
}

}  // namespace detail

/// Runs a check list, prints one key=value line per check, lists failures
/// on `err`. Returns 0 or 1.
inline int run_gradcheck_command(const std::vector<GradCheck>& checks, std::ostream& out, std::ostream& err) {
  const auto results = run_gradchecks(checks);
  for (const auto& r : results)
    out << "check=" << r.name << " max_rel_error=" << detail::format_double(r.error) << " threshold=" << detail::format_double(r.threshold)
        << " status=" << (r.passed() ? "pass" : "FAIL") << "\n";
  const int code = gradcheck_exit_code(results);
  if (code != 0) {
    err << "gradcheck failed:";
    for (const auto& r : results)
      if (!r.passed()) err << " " << r.name;
    err << "\n";
  }
  return code;
}

inline std::vector<GradCheck> default_gradchecks(std::uint64_t seed) {
  auto checks = primitive_checks(seed);
  for (auto& c : composed_checks(seed)) checks.push_back(std::move(c));
  return checks;
}

/// Dispatches one subcommand and maps errors to exit codes.
inline int run_cli(const CliOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    const RunConfig cfg = resolve_config(opt);
    const bool f64 = cfg.precision == Precision::F64;
    if (opt.command == "train") return f64 ? detail::cmd_train<double>(cfg, opt, out) : detail::cmd_train<float>(cfg, opt, out);
    if (opt.command == "eval") return f64 ? detail::cmd_eval<double>(cfg, opt, out) : detail::cmd_eval<float>(cfg, opt, out);
    if (opt.command == "viz") return f64 ? detail::cmd_viz<double>(cfg, opt, out) : detail::cmd_viz<float>(cfg, opt, out);
    if (opt.command == "gradcheck") {
      if (!f64) throw ConfigError("gradcheck needs precision f64");
      return run_gradcheck_command(default_gradchecks(cfg.seed), out, err);
    }
    throw UsageError("unknown command '" + opt.command + "'");
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace clan
