#include "sidlab_cli/commands.hpp"

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sidlab/checkpoint.hpp"
#include "sidlab/distill.hpp"
#include "sidlab/metrics.hpp"
#include "sidlab/teacher.hpp"
#include "sidlab_cli/config.hpp"

extern char** environ;

namespace sidlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

ExitCode exit_code_for(const std::exception& e) {
  if (dynamic_cast<const CheckpointError*>(&e)) return kExitCheckpoint;
  if (dynamic_cast<const tg::NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const tg::DomainError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const std::invalid_argument*>(&e)) return kExitConfig;
  return kExitFailure;
}

namespace {

constexpr const char* kTeacherPrefix = "teacher";
constexpr const char* kTeacherFile = "teacher.ckpt";

// Everything a trained teacher depends on; a stored teacher is reused only
// when this matches exactly.
json teacher_key(const RunConfig& cfg) {
  const json full = cfg.to_json();
  return {{"mixture", full.at("mixture")},
          {"schedule", full.at("schedule")},
          {"network", full.at("network")},
          {"teacher", full.at("teacher")},
          {"seed", cfg.seed}};
}

void require_compatible(const Checkpoint& ckpt, const ScoreNet& net, const RunConfig& cfg,
                        const std::string& what) {
  auto fail = [&](const std::string& why) {
    throw CheckpointError(CheckpointError::Kind::kIncompatible, what + ": " + why);
  };
  if (net.spec().data_dim != 2 || net.spec().num_classes != cfg.mixture.num_classes()) {
    fail("network class count does not match the configured mixture");
  }
  if (schedule_to_json(net.schedule()) != schedule_to_json(cfg.schedule)) {
    fail("diffusion schedule differs from the configured one");
  }
  if (ckpt.metadata.contains("mixture_hash") &&
      ckpt.metadata.at("mixture_hash").get<std::uint64_t>() != cfg.mixture.hash()) {
    fail("trained on a different mixture");
  }
}

void write_loss_csv(const fs::path& path, const TeacherTrainResult& result) {
  std::ofstream out(path, std::ios::trunc);
  out << "pairs_seen,loss\n";
  out.precision(17);
  for (std::size_t i = 0; i < result.loss_trajectory.size(); ++i) {
    out << result.pairs_seen[i] << "," << result.loss_trajectory[i] << "\n";
  }
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

ScoreNet train_and_save_teacher(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  TeacherTrainResult result = train_teacher(cfg.teacher, cfg.mixture, cfg.schedule, cfg.network);
  Checkpoint ckpt;
  add_network(ckpt, kTeacherPrefix, result.net);
  ckpt.metadata["kind"] = "teacher";
  ckpt.metadata["mixture_hash"] = cfg.mixture.hash();
  ckpt.metadata["teacher_key"] = teacher_key(cfg);
  save_checkpoint(out / kTeacherFile, ckpt);
  write_loss_csv(out / "teacher_loss.csv", result);
  return std::move(result.net);
}

ScoreNet load_teacher(const fs::path& path, const RunConfig& cfg) {
  const Checkpoint ckpt = load_checkpoint(path);
  ScoreNet net = network_from_checkpoint(ckpt, kTeacherPrefix);
  require_compatible(ckpt, net, cfg, path.string());
  return net;
}

// The oracle still needs a network to initialize θ and ψ: an explicit
// checkpoint, a matching teacher already in `out`, or a fresh training run.
ScoreNet oracle_init_net(const RunConfig& cfg, const std::optional<std::string>& teacher,
                         const fs::path& out) {
  if (teacher) return load_teacher(*teacher, cfg);
  const fs::path stored = out / kTeacherFile;
  if (fs::exists(stored)) {
    const Checkpoint ckpt = load_checkpoint(stored);
    if (ckpt.metadata.value("teacher_key", json()) == teacher_key(cfg)) {
      return network_from_checkpoint(ckpt, kTeacherPrefix);
    }
  }
  std::cerr << "training initialization network into " << stored.string() << "\n";
  return train_and_save_teacher(cfg, out);
}

// Re-runs the distill checks after command-line overrides.
void revalidate(const RunConfig& cfg) {
  try {
    cfg.distill.validate(cfg.schedule.steps());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("distill: ") + e.what());
  }
}

void print_report(const std::string& label, const MetricsReport& r, long long images_seen,
                  const fs::path& out) {
  std::printf("%s: images_seen=%lld frechet_uncond=%.6g alignment=%.6g fisher=%.6g -> %s\n",
              label.c_str(), images_seen, r.frechet_uncond, r.alignment, r.fisher_estimate,
              out.string().c_str());
}

std::string csv_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

// f_κ score of a denoiser, evaluated in chunks without a tape.
ScoreFn guided_score(Denoiser& model, double kappa, const DiffusionSchedule& sched) {
  return [&model, kappa, &sched](const tg::Tensor& x_t, std::span<const int> t,
                                 std::span<const ClassId> c) {
    tg::Tensor x0;
    if (kappa == 0.0) {
      const std::vector<ClassId> null_c(c.size(), kNullClass);
      x0 = model.predict(x_t, t, null_c);
    } else if (kappa == 1.0) {
      x0 = model.predict(x_t, t, c);
    } else {
      const std::vector<ClassId> null_c(c.size(), kNullClass);
      const tg::Tensor cond = model.predict(x_t, t, c);
      x0 = model.predict(x_t, t, null_c);
      for (std::size_t i = 0; i < x0.size(); ++i) x0[i] += kappa * (cond[i] - x0[i]);
    }
    return x0_to_score(x0, x_t, t, sched);
  };
}

MetricsReport ancestral_report(Denoiser& model, double kappa, int steps, const RunConfig& cfg,
                               std::uint64_t seed) {
  Rng sample_rng = Rng::derive(seed, 1);
  Rng fisher_rng = Rng::derive(seed, 2);
  const auto c =
      sample_classes(cfg.mixture, static_cast<std::size_t>(cfg.eval.num_samples), sample_rng);
  const tg::Tensor samples = ancestral_sample(model, cfg.schedule, c, kappa, steps, sample_rng);
  const tg::Tensor reference = sample_data(cfg.mixture, c, sample_rng);
  MetricsReport report = sample_metrics(samples, c, reference, c, cfg.mixture);

  const auto n = std::min<std::size_t>(c.size(), static_cast<std::size_t>(cfg.eval.fisher_samples));
  tg::Tensor head(tg::Shape{n, 2});
  std::copy_n(samples.data().begin(), 2 * n, head.storage().begin());
  const std::span<const ClassId> head_c(c.data(), n);
  report.fisher_estimate = fisher_estimate(guided_score(model, kappa, cfg.schedule), head, head_c,
                                           cfg.mixture, cfg.schedule, cfg.eval.fisher_t_set,
                                           fisher_rng);
  report.seed = seed;
  report.validate();
  return report;
}

void write_eval_outputs(const fs::path& out, const json& source,
                        const std::vector<MetricsReport>& reports, int num_classes,
                        bool per_step) {
  json doc = {{"source", source}, {"reports", json::array()}};
  for (std::size_t i = 0; i < reports.size(); ++i) {
    json r = reports[i].to_json();
    r["step"] = per_step ? static_cast<int>(i) + 1 : source.value("K", 1);
    doc["reports"].push_back(std::move(r));
  }
  {
    std::ofstream f(out / "eval_report.json", std::ios::trunc);
    f << doc.dump(2) << "\n";
    if (!f) throw std::runtime_error("cannot write eval_report.json");
  }
  std::ofstream csv(out / "eval_metrics.csv", std::ios::trunc);
  csv << "step,frechet_uncond";
  for (int k = 0; k < num_classes; ++k) csv << ",frechet_class_" << k;
  csv << ",alignment,fisher_est,num_samples,seed\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    csv << doc["reports"][i]["step"].get<int>() << "," << csv_double(r.frechet_uncond);
    for (double f : r.frechet_per_class) csv << "," << csv_double(f);
    csv << "," << csv_double(r.alignment) << "," << csv_double(r.fisher_estimate) << ","
        << r.num_samples << "," << r.seed << "\n";
  }
  if (!csv) throw std::runtime_error("cannot write eval_metrics.csv");
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"') q += '"';
    q += ch;
  }
  return q + "\"";
}

std::string axis_value(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

struct SweepRun {
  std::vector<json> values;
  fs::path dir;
  int exit_code = -1;
  std::string status = "pending";
  MetricsReport report;
};

pid_t spawn(const std::string& exe, const std::vector<std::string>& args, const fs::path& log) {
  std::vector<char*> argv;
  argv.push_back(const_cast<char*>(exe.c_str()));
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  const std::string log_path = log.string();
  posix_spawn_file_actions_addopen(&actions, 1, log_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC,
                                   0644);
  posix_spawn_file_actions_adddup2(&actions, 1, 2);
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, exe.c_str(), &actions, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) throw std::runtime_error("cannot spawn " + exe);
  return pid;
}

}  // namespace

void cmd_train_teacher(const TrainTeacherOptions& opts) {
  RunConfig cfg = load_run_config(opts.config);
  if (opts.steps) {
    if (*opts.steps < 0) throw ConfigError("--steps: must be >= 0");
    cfg.teacher.train_pairs = *opts.steps * cfg.teacher.batch_size;
  }
  const fs::path out = resolve_output_dir(cfg, "train-teacher", opts.output_dir);
  write_resolved_config(cfg, out);
  train_and_save_teacher(cfg, out);
  std::printf("train-teacher: %lld pairs -> %s\n", cfg.teacher.train_pairs,
              (out / kTeacherFile).string().c_str());
}

void cmd_distill(const DistillOptions& opts) {
  RunConfig cfg = load_run_config(opts.config);
  if (opts.data_enhanced) cfg.distill.data_enhanced = *opts.data_enhanced;
  if (opts.init_generator) cfg.distill.init_generator = *opts.init_generator;
  revalidate(cfg);
  if (!opts.teacher && !opts.oracle_teacher) {
    throw ConfigError("distill needs --teacher <ckpt> or --oracle-teacher");
  }
  const fs::path out = resolve_output_dir(cfg, "distill", opts.output_dir);
  if (opts.resume) {
    const fs::path previous = out / kResolvedConfigName;
    if (!fs::exists(previous)) {
      throw CheckpointError(CheckpointError::Kind::kIo,
                            "--resume: no run to resume in " + out.string());
    }
    RunConfig echoed = cfg;
    echoed.output_dir = out.string();
    if (load_json(previous) != echoed.to_json()) {
      throw ConfigError("--resume: resolved config differs from the interrupted run's");
    }
  } else {
    write_resolved_config(cfg, out);
  }

  ScoreNet teacher_net = opts.oracle_teacher ? oracle_init_net(cfg, opts.teacher, out)
                                             : load_teacher(*opts.teacher, cfg);
  std::unique_ptr<OracleTeacher> oracle;
  if (opts.oracle_teacher) oracle = std::make_unique<OracleTeacher>(cfg.mixture, cfg.schedule);
  Denoiser& teacher = oracle ? static_cast<Denoiser&>(*oracle) : teacher_net;

  std::optional<ScoreNet> init;
  if (!cfg.distill.init_generator.empty()) {
    const Checkpoint ckpt = load_checkpoint(cfg.distill.init_generator);
    init.emplace(network_from_checkpoint(ckpt, "generator"));
    require_compatible(ckpt, *init, cfg, cfg.distill.init_generator);
  }

  RunOptions run_opts;
  run_opts.resume = opts.resume;
  run_opts.stop_at_images = opts.stop_at_images;
  const DistillRunResult result =
      run_distillation(cfg.distill, cfg.eval, teacher, teacher_net, cfg.mixture, cfg.schedule,
                       out, init ? &*init : nullptr, run_opts);
  print_report(result.completed ? "distill" : "distill (stopped)", result.final_report,
               result.images_seen, out);
}

void cmd_eval(const EvalOptions& opts) {
  const RunConfig cfg = load_run_config(opts.config);
  const int sources = (opts.generator ? 1 : 0) + ((opts.teacher || opts.oracle_teacher) ? 1 : 0);
  if (sources != 1) {
    throw ConfigError("eval needs exactly one of --generator <ckpt> or --teacher/--oracle-teacher");
  }
  if (opts.ancestral_steps < 1) throw ConfigError("--ancestral-steps: must be >= 1");
  const fs::path out = resolve_output_dir(cfg, "eval", opts.output_dir);
  write_resolved_config(cfg, out);
  const std::uint64_t seed = Rng::derive(cfg.seed, 6).next_u64();

  std::vector<MetricsReport> reports;
  json source;
  bool per_step = false;
  if (opts.generator) {
    const Checkpoint ckpt = load_checkpoint(*opts.generator);
    ScoreNet generator = network_from_checkpoint(ckpt, "generator");
    ScoreNet fake = network_from_checkpoint(ckpt, "fake");
    require_compatible(ckpt, generator, cfg, *opts.generator);
    if (!ckpt.metadata.contains("generator")) {
      throw CheckpointError(CheckpointError::Kind::kIncompatible,
                            *opts.generator + ": no generator metadata");
    }
    const json& meta = ckpt.metadata.at("generator");
    const int K = meta.at("K").get<int>();
    const int t_init = meta.at("t_init").get<int>();
    if (K < 1 || t_init < 1 || t_init > cfg.schedule.steps() ||
        meta.at("tau").get<std::vector<int>>() != tau_schedule(K, t_init)) {
      throw CheckpointError(CheckpointError::Kind::kIncompatible,
                            *opts.generator + ": inconsistent K / tau metadata");
    }
    const json& g = meta.at("guidance");
    const double fisher_kappa =
        g.value("kappa1_theta_only", false) ? 1.0 : g.at("kappa1").get<double>();
    per_step = opts.per_step;
    reports = evaluate_generator(generator, K, t_init, fake, fisher_kappa, generator, cfg.mixture,
                                 cfg.schedule, cfg.eval, seed, per_step);
    source = {{"generator", *opts.generator}, {"K", K}, {"t_init", t_init}};
  } else {
    if (opts.per_step) throw ConfigError("--per-step applies to generator checkpoints only");
    const double kappa = opts.kappa.value_or(cfg.distill.guidance.kappa4);
    std::unique_ptr<OracleTeacher> oracle;
    std::optional<ScoreNet> net;
    if (opts.oracle_teacher) {
      oracle = std::make_unique<OracleTeacher>(cfg.mixture, cfg.schedule);
    } else {
      net.emplace(load_teacher(*opts.teacher, cfg));
    }
    Denoiser& model = oracle ? static_cast<Denoiser&>(*oracle) : *net;
    reports.push_back(ancestral_report(model, kappa, opts.ancestral_steps, cfg, seed));
    source = {{"teacher", opts.oracle_teacher ? std::string("oracle") : *opts.teacher},
              {"kappa", kappa},
              {"ancestral_steps", opts.ancestral_steps}};
  }
  write_eval_outputs(out, source, reports, cfg.mixture.num_classes(), per_step);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    print_report(per_step ? "eval step " + std::to_string(i + 1) : std::string("eval"), reports[i],
                 0, out);
  }
}

ExitCode cmd_sweep(const SweepOptions& opts) {
  json raw = load_json(opts.config);
  const RunConfig base = parse_run_config(raw);
  if (base.matrix.is_null()) throw ConfigError("matrix: required by sweep");
  if (opts.jobs < 1) throw ConfigError("--jobs: must be >= 1");
  if (!opts.teacher && !opts.oracle_teacher) {
    throw ConfigError("sweep needs --teacher <ckpt> or --oracle-teacher");
  }
  const fs::path out = resolve_output_dir(base, "sweep", opts.output_dir);
  write_resolved_config(base, out);

  std::vector<std::string> keys;
  std::vector<json> axes;
  for (const auto& [key, values] : base.matrix.items()) {
    keys.push_back(key);
    axes.push_back(values);
  }

  std::optional<std::string> teacher_path;
  if (opts.teacher) teacher_path = fs::absolute(*opts.teacher).string();
  const bool shared_teacher = std::all_of(keys.begin(), keys.end(), [](const std::string& k) {
    return k.starts_with("distill.") || k.starts_with("eval.") || k == "output_dir";
  });
  if (!teacher_path && shared_teacher) {
    oracle_init_net(base, std::nullopt, out);
    teacher_path = fs::absolute(out / kTeacherFile).string();
  }

  std::vector<SweepRun> runs;
  std::vector<std::size_t> index(axes.size(), 0);
  while (true) {
    SweepRun run;
    for (std::size_t a = 0; a < axes.size(); ++a) run.values.push_back(axes[a][index[a]]);
    runs.push_back(std::move(run));
    std::size_t a = axes.size();
    while (a > 0 && ++index[a - 1] == axes[a - 1].size()) index[--a] = 0;
    if (a == 0) break;
  }

  std::vector<std::pair<std::size_t, std::vector<std::string>>> pending;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "run_%03zu", i);
    SweepRun& run = runs[i];
    run.dir = fs::absolute(out / "runs" / name);
    fs::create_directories(run.dir);
    json child = raw;
    child.erase("matrix");
    for (std::size_t a = 0; a < keys.size(); ++a) set_dotted(child, keys[a], run.values[a]);
    child["output_dir"] = run.dir.string();
    try {
      parse_run_config(child);
    } catch (const std::invalid_argument& e) {
      run.exit_code = kExitConfig;
      run.status = std::string("config: ") + e.what();
      continue;
    }
    const fs::path child_config = run.dir / "config.json";
    {
      std::ofstream f(child_config, std::ios::trunc);
      f << child.dump(2) << "\n";
    }
    std::vector<std::string> args{"distill", child_config.string(), "--output-dir",
                                  run.dir.string()};
    if (teacher_path) args.insert(args.end(), {"--teacher", *teacher_path});
    if (opts.oracle_teacher) args.push_back("--oracle-teacher");
    if (opts.data_enhanced) args.push_back(*opts.data_enhanced ? "--data-enhanced" : "--data-free");
    pending.emplace_back(i, std::move(args));
  }

  std::map<pid_t, std::size_t> running;
  auto reap_one = [&] {
    int status = 0;
    const pid_t pid = waitpid(-1, &status, 0);
    if (pid < 0) throw std::runtime_error("waitpid failed");
    const auto it = running.find(pid);
    if (it == running.end()) return;
    SweepRun& run = runs[it->second];
    run.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : kExitFailure;
    running.erase(it);
    if (run.exit_code != 0) {
      run.status = "failed (see log.txt)";
      return;
    }
    try {
      const json report = load_json(run.dir / "final_metrics.json");
      run.report.frechet_uncond = report.at("frechet_uncond").get<double>();
      run.report.alignment = report.at("alignment").get<double>();
      run.report.fisher_estimate = report.at("fisher_estimate").get<double>();
      run.status = "ok";
    } catch (const std::exception& e) {
      run.exit_code = kExitFailure;
      run.status = std::string("unreadable final_metrics.json: ") + e.what();
    }
  };
  for (const auto& [i, args] : pending) {
    while (static_cast<int>(running.size()) >= opts.jobs) reap_one();
    running.emplace(spawn(opts.self_exe, args, runs[i].dir / "log.txt"), i);
  }
  while (!running.empty()) reap_one();

  auto run_name = [&](std::size_t i) { return runs[i].dir.filename().string(); };
  {
    std::ofstream csv(out / "sweep.csv", std::ios::trunc);
    csv << "run";
    for (const auto& k : keys) csv << "," << csv_field(k);
    csv << ",status,exit_code,frechet_uncond,alignment,fisher_estimate\n";
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const SweepRun& r = runs[i];
      csv << run_name(i);
      for (const auto& v : r.values) csv << "," << csv_field(axis_value(v));
      const bool ok = r.exit_code == 0;
      csv << "," << csv_field(r.status) << "," << r.exit_code << ","
          << (ok ? csv_double(r.report.frechet_uncond) : "") << ","
          << (ok ? csv_double(r.report.alignment) : "") << ","
          << (ok ? csv_double(r.report.fisher_estimate) : "") << "\n";
    }
    if (!csv) throw std::runtime_error("cannot write sweep.csv");
  }

  std::vector<std::size_t> ranked;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (runs[i].exit_code == 0) ranked.push_back(i);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
    const auto& ra = runs[a].report;
    const auto& rb = runs[b].report;
    if (ra.alignment != rb.alignment) return ra.alignment > rb.alignment;
    return ra.frechet_uncond < rb.frechet_uncond;
  });
  std::ofstream rank(out / "rank.csv", std::ios::trunc);
  rank << "rank,run";
  for (const auto& k : keys) rank << "," << csv_field(k);
  rank << ",alignment,frechet_uncond\n";
  std::printf("%-5s %-8s", "rank", "run");
  for (const auto& k : keys) std::printf(" %-22s", k.c_str());
  std::printf(" %-10s %-10s\n", "alignment", "frechet");
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const std::size_t i = ranked[r];
    rank << r + 1 << "," << run_name(i);
    std::printf("%-5zu %-8s", r + 1, run_name(i).c_str());
    for (const auto& v : runs[i].values) {
      rank << "," << csv_field(axis_value(v));
      std::printf(" %-22s", axis_value(v).c_str());
    }
    rank << "," << csv_double(runs[i].report.alignment) << ","
         << csv_double(runs[i].report.frechet_uncond) << "\n";
    std::printf(" %-10.6g %-10.6g\n", runs[i].report.alignment, runs[i].report.frechet_uncond);
  }
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (runs[i].exit_code != 0) {
      std::printf("%s: %s (exit %d)\n", run_name(i).c_str(), runs[i].status.c_str(),
                  runs[i].exit_code);
    }
  }
  return ranked.empty() ? kExitFailure : kExitOk;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"sidlab: score identity distillation on 2-D conditional Gaussian mixtures"};
  app.require_subcommand(1);

  TrainTeacherOptions tt;
  long long steps = 0;
  auto* train = app.add_subcommand("train-teacher", "Pretrain the diffusion teacher");
  train->add_option("config", tt.config, "Run config (JSON)")->required();
  train->add_option("--output-dir", tt.output_dir, "Output directory");
  auto* steps_opt = train->add_option("--steps", steps, "Optimizer steps (overrides train_pairs)");

  DistillOptions ds;
  auto* distill = app.add_subcommand("distill", "Distill a one-step or K-step generator");
  distill->add_option("config", ds.config, "Run config (JSON)")->required();
  distill->add_option("--output-dir", ds.output_dir, "Output directory");
  distill->add_option("--teacher", ds.teacher, "Teacher checkpoint");
  distill->add_flag("--oracle-teacher", ds.oracle_teacher,
                    "Use the exact posterior mean as teacher");
  distill->add_option("--init-generator", ds.init_generator,
                      "Generator checkpoint initializing theta");
  bool data_free = false;
  bool data_enhanced = false;
  auto* df = distill->add_flag("--data-free", data_free, "Disable the adversarial terms");
  auto* de = distill->add_flag("--data-enhanced", data_enhanced, "Enable the adversarial terms");
  df->excludes(de);
  distill->add_flag("--resume", ds.resume, "Continue from checkpoints/state.ckpt");
  distill->add_option("--stop-at", ds.stop_at_images, "Stop after this many images");

  EvalOptions ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a generator or a teacher's ancestral samples");
  eval->add_option("config", ev.config, "Run config (JSON)")->required();
  eval->add_option("--output-dir", ev.output_dir, "Output directory");
  eval->add_option("--generator", ev.generator, "Generator checkpoint");
  eval->add_option("--teacher", ev.teacher, "Teacher checkpoint (ancestral sampling)");
  eval->add_flag("--oracle-teacher", ev.oracle_teacher, "Ancestral sampling of the exact teacher");
  eval->add_flag("--per-step", ev.per_step, "One report per generator step");
  eval->add_option("--kappa", ev.kappa, "Guidance scale for ancestral sampling");
  eval->add_option("--ancestral-steps", ev.ancestral_steps, "Ancestral sampling steps");

  SweepOptions sw;
  auto* sweep = app.add_subcommand("sweep", "Run the config's matrix and rank the results");
  sweep->add_option("config", sw.config, "Run config with a matrix section (JSON)")->required();
  sweep->add_option("--output-dir", sw.output_dir, "Output directory");
  sweep->add_option("--teacher", sw.teacher, "Teacher checkpoint");
  sweep->add_flag("--oracle-teacher", sw.oracle_teacher, "Use the exact posterior mean as teacher");
  bool sweep_free = false;
  bool sweep_enhanced = false;
  auto* sdf = sweep->add_flag("--data-free", sweep_free, "Force data-free runs");
  auto* sde = sweep->add_flag("--data-enhanced", sweep_enhanced, "Force data-enhanced runs");
  sdf->excludes(sde);
  sweep->add_option("--jobs", sw.jobs, "Concurrent child processes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) {
      if (steps_opt->count() > 0) tt.steps = steps;
      cmd_train_teacher(tt);
    } else if (distill->parsed()) {
      if (data_free) ds.data_enhanced = false;
      if (data_enhanced) ds.data_enhanced = true;
      cmd_distill(ds);
    } else if (eval->parsed()) {
      cmd_eval(ev);
    } else if (sweep->parsed()) {
      if (sweep_free) sw.data_enhanced = false;
      if (sweep_enhanced) sw.data_enhanced = true;
      std::error_code ec;
      const fs::path self = fs::read_symlink("/proc/self/exe", ec);
      sw.self_exe = ec ? std::string(argv[0]) : self.string();
      return cmd_sweep(sw);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}

}  // namespace sidlab::cli
