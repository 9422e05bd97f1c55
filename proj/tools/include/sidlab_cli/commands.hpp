#pragma once

// Subcommands of the `sidlab` tool. Each writes only inside its output
// directory and reports failures through the exit-code contract below.

#include <cstdint>
#include <exception>
#include <optional>
#include <string>

namespace sidlab::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitNumeric = 3,
  kExitCheckpoint = 4,
};

// Maps an in-flight exception to its exit code.
ExitCode exit_code_for(const std::exception& e);

struct TrainTeacherOptions {
  std::string config;
  std::optional<std::string> output_dir;
  // Optimizer steps; overrides teacher.train_pairs as steps × batch_size.
  std::optional<long long> steps;
};

struct DistillOptions {
  std::string config;
  std::optional<std::string> output_dir;
  std::optional<std::string> teacher;
  bool oracle_teacher = false;
  std::optional<std::string> init_generator;
  // Overrides distill.data_enhanced when set.
  std::optional<bool> data_enhanced;
  bool resume = false;
  std::optional<long long> stop_at_images;
};

struct EvalOptions {
  std::string config;
  std::optional<std::string> output_dir;
  // Exactly one source: a generator checkpoint, or a teacher sampled ancestrally.
  std::optional<std::string> generator;
  std::optional<std::string> teacher;
  bool oracle_teacher = false;
  bool per_step = false;
  // Ancestral sampling of a teacher.
  std::optional<double> kappa;
  int ancestral_steps = 100;
};

struct SweepOptions {
  std::string config;
  std::optional<std::string> output_dir;
  std::optional<std::string> teacher;
  bool oracle_teacher = false;
  std::optional<bool> data_enhanced;
  int jobs = 1;
  // Executable spawned for each run; defaults to the running binary.
  std::string self_exe;
};

void cmd_train_teacher(const TrainTeacherOptions& opts);
void cmd_distill(const DistillOptions& opts);
void cmd_eval(const EvalOptions& opts);
// Returns kExitOk unless every run failed.
ExitCode cmd_sweep(const SweepOptions& opts);

// Parses argv and dispatches; never throws.
int run_cli(int argc, char** argv);

}  // namespace sidlab::cli
