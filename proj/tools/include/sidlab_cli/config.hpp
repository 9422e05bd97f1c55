#pragma once

// Run configuration document. Parsing is strict: unknown keys and wrongly
// typed values are rejected with the dotted path of the offending field, and
// the resolved form (every default filled in) round-trips through the parser.
//
//   {
//     "mixture":  {"preset": "rings", ...} | {"classes": [...], "prior": [...]},
//     "schedule": {"kind": "linear", "T", "beta_1", "beta_T"},
//     "network":  {"hidden", "time_embed_dim", "sigma_data"},
//     "teacher":  {"train_pairs", "batch_size", "learning_rate", "lr_schedule",
//                  "cond_dropout", "log_every_pairs"},
//     "distill":  {"K", "matching", "guidance": {"preset", "kappa", "kappa1".."kappa4",
//                  "kappa1_theta_only"}, "lambda_sid", ..., "budget_images", "init_generator"},
//     "eval":     {"every_images", "num_samples", "fisher_samples", "fisher_t_set",
//                  "wall_clock"},
//     "output_dir": "...",
//     "seed": 0,
//     "matrix":   {"distill.K": [1, 4], ...}
//   }
//
// Only "mixture" is required.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "sidlab/distill.hpp"
#include "sidlab/nets.hpp"
#include "sidlab/oracle.hpp"
#include "sidlab/schedule.hpp"
#include "sidlab/teacher.hpp"

namespace sidlab::cli {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr const char* kOutputRootEnv = "SIDLAB_OUTPUT_ROOT";
inline constexpr const char* kResolvedConfigName = "resolved_config.json";

struct RunConfig {
  ConditionalMixture mixture = ConditionalMixture::rings();
  DiffusionSchedule schedule = DiffusionSchedule::linear(1000, 1e-4, 0.02);
  // data_dim and num_classes follow the mixture.
  NetworkSpec network;
  TeacherConfig teacher;
  DistillConfig distill;
  // Scale the lsg/cfg presets were built from.
  double guidance_kappa = 1.5;
  EvalConfig eval;
  std::optional<std::string> output_dir;
  std::uint64_t seed = 0;
  // Sweep axes: dotted config path -> list of values. Null when absent.
  nlohmann::json matrix;

  // The resolved document; parse_run_config(to_json()) reproduces *this.
  nlohmann::json to_json() const;
};

RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json load_json(const std::filesystem::path& path);

// --output-dir, then the config's output_dir, then
// $SIDLAB_OUTPUT_ROOT/<command>-seed<seed> (root defaults to "runs").
std::filesystem::path resolve_output_dir(const RunConfig& cfg, const std::string& command,
                                         const std::optional<std::string>& override_dir);

// Writes output_dir/resolved_config.json.
void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& output_dir);

// Replaces the value at a dotted path ("distill.guidance.preset"), creating
// intermediate objects.
void set_dotted(nlohmann::json& doc, const std::string& path, const nlohmann::json& value);

}  // namespace sidlab::cli
