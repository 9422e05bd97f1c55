#pragma once

// Score identity distillation: alternating fake-score / generator updates with
// four guidance scales, one-step and multistep generators, and the optional
// adversarial enhancement from a limited pool of real pairs.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sidlab/checkpoint.hpp"
#include "sidlab/metrics.hpp"
#include "sidlab/nets.hpp"
#include "sidlab/optim.hpp"
#include "sidlab/oracle.hpp"
#include "sidlab/rng.hpp"
#include "sidlab/schedule.hpp"
#include "sidlab/tensorgrad.hpp"

namespace sidlab {

class DistillError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// (κ1, κ2, κ3, κ4): κ1 for the fake score update, κ2/κ3 for the fake score
// branches of the generator loss, κ4 for the teacher.
struct GuidanceStrategy {
  double kappa1 = 1.0;
  double kappa2 = 1.0;
  double kappa3 = 1.0;
  double kappa4 = 1.0;
  std::string preset = "no-cfg";
  // Run the fake score update at κ = 1 regardless of κ1.
  bool kappa1_theta_only = false;

  static GuidanceStrategy lsg(double kappa);
  static GuidanceStrategy cfg(double kappa4);
  static GuidanceStrategy no_cfg();
  static GuidanceStrategy zero_cfg();
  static GuidanceStrategy anti_cfg();
  // `kappa` is the LSG scale or the CFG teacher scale; ignored otherwise.
  static GuidanceStrategy from_preset(const std::string& name, double kappa = 1.0);
  static GuidanceStrategy custom(double k1, double k2, double k3, double k4);

  double psi_update_kappa() const noexcept { return kappa1_theta_only ? 1.0 : kappa1; }
  void validate() const;
  nlohmann::json to_json() const;
};

enum class Matching { kFinalStep, kUniformStep };
Matching parse_matching(const std::string& name);
std::string to_string(Matching matching);

struct DistillConfig {
  int K = 1;
  Matching matching = Matching::kUniformStep;
  GuidanceStrategy guidance = GuidanceStrategy::lsg(1.5);
  double lambda_sid = 1.0;
  double lambda_adv_psi = 10.0;
  double lambda_adv_theta = 0.001;
  bool data_enhanced = false;
  // Size of the real-pair pool drawn once at the start; 0 means unset.
  long long real_pairs = 0;
  long long warmup_images = 2'000;
  long long b_switch_images = 4'000;
  TimeParams time;
  double lr_psi = 1e-4;
  double lr_theta = 1e-4;
  int batch_size = 256;
  double ema_half_life_images = 0.0;
  long long budget_images = 200'000;
  std::uint64_t seed = 0;
  // Checkpoint whose generator initializes θ instead of the teacher.
  std::string init_generator;

  void validate(int schedule_steps) const;
  nlohmann::json to_json() const;

  // Final-step matching shrinks batch and η_θ by 1/K.
  int effective_batch() const;
  double effective_lr_theta() const;
};

struct GenRollout {
  // x_g^(1..k); the last entry is the rollout's output.
  std::vector<tg::Var> outputs;
  int k = 1;
  std::vector<int> taus;
  std::vector<tg::Tensor> noise;
  // Whether each output was cut from the θ gradient.
  std::vector<bool> stop_gradient;

  const tg::Var& output() const { return outputs.back(); }
};

// x_g^(0) = 0, x_g^(j) = G(a_τj·x_g^(j-1) + σ_τj·z_j, τ_j, c) for j = 1..K,
// differentiable through every call.
GenRollout generate_final_step(ScoreNet& generator, tg::Tape& tape, int K, int t_init,
                               std::span<const ClassId> c, const DiffusionSchedule& sched,
                               Rng& rng, tg::ParamGrad grad = tg::ParamGrad::kTrack);

// Draws k uniformly from {1..K} and rolls k steps; only the k-th generator
// call carries gradient.
GenRollout generate_uniform_step(ScoreNet& generator, tg::Tape& tape, int K, int t_init,
                                 std::span<const ClassId> c, const DiffusionSchedule& sched,
                                 Rng& rng, tg::ParamGrad grad = tg::ParamGrad::kTrack);

// Gradient-free K-step sampling; returns x_g^(1..K).
std::vector<tg::Tensor> sample_generator(ScoreNet& generator, int K, int t_init,
                                         std::span<const ClassId> c,
                                         const DiffusionSchedule& sched, Rng& rng);

// Real branch of the discriminator loss: diffused real samples at the fake
// branch's noise levels.
struct PsiAdversarial {
  DiscriminatorHead* head = nullptr;
  tg::Var real_x_t;
  std::span<const ClassId> real_c;
};

struct PsiLoss {
  tg::Var total;
  double denoise = 0.0;
  // Unweighted mean of -½[ln D(real) + ln(1 - D(fake))].
  double bce = 0.0;
  // Weighted contribution to `total`.
  double adversarial = 0.0;
};

// mean_rows SNR_t·‖f_ψ,κ1(x_t, c) - x_g‖², plus in data-enhanced mode
// mean_rows (4 + SNR_t)·λ_adv,ψ·BCE(D(real), D(fake)). With κ1 = 0 the
// discriminator sees ∅ as well.
PsiLoss loss_psi(ScoreNet& f_psi, tg::Tape& tape, const tg::Var& x_t, const tg::Tensor& x_g,
                 std::span<const int> t, std::span<const ClassId> c, double kappa1,
                 const DiffusionSchedule& sched, bool data_enhanced = false,
                 double lambda_adv_psi = 0.0, const PsiAdversarial* adv = nullptr,
                 tg::ParamGrad grad = tg::ParamGrad::kTrack);

// mean_rows (f_phi - f_psi_a)ᵀ(f_psi_b - x_g).
tg::Var sid_inner_product(const tg::Var& f_phi, const tg::Var& f_psi_a, const tg::Var& f_psi_b,
                          const tg::Var& x_g);

// 1/(d·mean|f_phi - x_g| + 1e-8), the batch-adaptive stand-in for ω(t)a_t²/σ_t⁴.
double omega_coefficient(const tg::Tensor& f_phi, const tg::Tensor& x_g);

struct ThetaLoss {
  tg::Var total;
  // Weighted contributions to `total`.
  double sid = 0.0;
  double adversarial = 0.0;
  double coefficient = 0.0;
};

// (1/2)^b·λ_sid·ω·SID + (b/2)·λ_adv,θ·(ω/2)·d·(-mean ln D(fake)); the adversarial
// term needs data_enhanced and a head. Teacher and fake parameters stay frozen.
ThetaLoss loss_theta(Denoiser& f_phi, ScoreNet& f_psi, tg::Tape& tape, const tg::Var& x_t,
                     const tg::Var& x_g, std::span<const int> t, std::span<const ClassId> c,
                     const GuidanceStrategy& strategy, int b, const DistillConfig& cfg,
                     DiscriminatorHead* head = nullptr);

struct StepMetrics {
  long long images_seen = 0;
  double loss_psi = 0.0;
  double loss_theta = 0.0;
  double loss_theta_adv = 0.0;
  int b = 0;
  int k = 1;
  bool theta_updated = false;
};

// Training state of one run: θ, ψ, the discriminator head, both optimizers,
// EMA, the images counter and the random streams.
class Distiller {
 public:
  // θ and ψ start as copies of `teacher_net` (θ from `init_generator` when
  // given). `teacher` answers the κ4 branch and may be `teacher_net` itself.
  Distiller(DistillConfig cfg, Denoiser& teacher, const ScoreNet& teacher_net,
            ConditionalMixture mix, DiffusionSchedule sched,
            const ScoreNet* init_generator = nullptr);

  StepMetrics step();

  const DistillConfig& config() const noexcept { return cfg_; }
  ScoreNet& generator() noexcept { return generator_; }
  ScoreNet& fake() noexcept { return fake_; }
  DiscriminatorHead& head() noexcept { return head_; }
  EmaState& ema() noexcept { return ema_; }
  long long images_seen() const noexcept { return images_seen_; }
  const ConditionalMixture& mixture() const noexcept { return mix_; }
  const DiffusionSchedule& schedule() const noexcept { return sched_; }
  // The generator evaluated for samples: EMA shadow when enabled.
  ScoreNet ema_generator() const;

  void save_state(Checkpoint& ckpt) const;
  void load_state(const Checkpoint& ckpt);

 private:
  void fill_real_batch(std::vector<ClassId>& c, tg::Tensor& x0);

  DistillConfig cfg_;
  Denoiser& teacher_;
  ConditionalMixture mix_;
  DiffusionSchedule sched_;
  ScoreNet generator_;
  ScoreNet fake_;
  DiscriminatorHead head_;
  std::vector<tg::Parameter*> theta_params_;
  std::vector<tg::Parameter*> psi_params_;
  Adam opt_theta_;
  Adam opt_psi_;
  EmaState ema_;
  long long images_seen_ = 0;
  Rng rng_;
  Rng real_rng_;
  std::vector<ClassId> real_c_;
  tg::Tensor real_x0_;
};

struct EvalConfig {
  long long every_images = 50'000;
  int num_samples = 20'000;
  int fisher_samples = 20'000;
  std::vector<int> fisher_t_set{100, 400, 700};
  // Record elapsed time in the metrics CSV; off keeps the CSV reproducible.
  bool wall_clock = false;

  void validate(int schedule_steps) const;
  nlohmann::json to_json() const;
};

// Metrics of a K-step generator, one report per step output when `per_step`
// (otherwise only x_g^(K)). The Fisher estimate uses `fake` at `fisher_kappa`
// on samples of `fisher_generator` (the live generator during training).
std::vector<MetricsReport> evaluate_generator(ScoreNet& generator, int K, int t_init,
                                              ScoreNet& fake, double fisher_kappa,
                                              ScoreNet& fisher_generator,
                                              const ConditionalMixture& mix,
                                              const DiffusionSchedule& sched,
                                              const EvalConfig& eval, std::uint64_t seed,
                                              bool per_step = false);

struct RunOptions {
  // Stop early (state saved) once this many images are seen.
  std::optional<long long> stop_at_images;
  // Continue from run_dir/checkpoints/state.ckpt.
  bool resume = false;
};

struct DistillRunResult {
  MetricsReport final_report;
  long long images_seen = 0;
  bool completed = false;
};

// Runs distill steps until the image budget is spent. Writes into `run_dir`:
// metrics.csv, steps.csv, checkpoints/{generator_ema,generator_raw,state}.ckpt,
// final_metrics.json and plotdata/<column>.csv.
DistillRunResult run_distillation(const DistillConfig& cfg, const EvalConfig& eval,
                                  Denoiser& teacher, const ScoreNet& teacher_net,
                                  const ConditionalMixture& mix, const DiffusionSchedule& sched,
                                  const std::filesystem::path& run_dir,
                                  const ScoreNet* init_generator = nullptr,
                                  const RunOptions& options = {});

// Generator checkpoint layout shared by run_distillation and the eval command.
void add_generator(Checkpoint& ckpt, const ScoreNet& generator, const ScoreNet& fake,
                   const DistillConfig& cfg);

// One two-column CSV per metrics column, read back from metrics.csv.
void write_plotdata(const std::filesystem::path& run_dir);

}  // namespace sidlab
