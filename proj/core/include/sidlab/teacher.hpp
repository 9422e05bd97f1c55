#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "sidlab/nets.hpp"
#include "sidlab/optim.hpp"
#include "sidlab/oracle.hpp"
#include "sidlab/rng.hpp"
#include "sidlab/schedule.hpp"

namespace sidlab {

struct TeacherConfig {
  long long train_pairs = 1'000'000;
  int batch_size = 256;
  double learning_rate = 1e-3;
  LrSchedule lr_schedule = LrSchedule::kCosine;
  // Probability of replacing the condition by ∅ for a training pair.
  double cond_dropout = 0.1;
  // Loss trajectory granularity: one mean loss per this many pairs.
  long long log_every_pairs = 50'000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TeacherTrainResult {
  ScoreNet net;
  // Mean ε-loss over each logging window.
  std::vector<double> loss_trajectory;
  std::vector<long long> pairs_seen;
};

// Denoising score matching with condition dropout: minimizes
// E‖ε_φ(x_t, c̃) - ε‖² with t uniform on {1..T}. Starts from a freshly
// initialized network seeded from `cfg.seed`.
TeacherTrainResult train_teacher(const TeacherConfig& cfg, const ConditionalMixture& mix,
                                 const DiffusionSchedule& sched, const NetworkSpec& spec);
// Same, continuing from `init`.
TeacherTrainResult train_teacher(const TeacherConfig& cfg, const ConditionalMixture& mix,
                                 const DiffusionSchedule& sched, ScoreNet init);

// A teacher at its theoretical optimum: answers with the exact posterior mean
// E[x0 | x_t, c] of the mixture, differentiable in x_t.
class OracleTeacher final : public Denoiser {
 public:
  OracleTeacher(ConditionalMixture mix, DiffusionSchedule sched);

  tg::Var predict_x0(tg::Tape& tape, const tg::Var& x_t, std::span<const int> t,
                     std::span<const ClassId> c,
                     tg::ParamGrad grad = tg::ParamGrad::kFreeze) override;

  const ConditionalMixture& mixture() const noexcept { return mix_; }

 private:
  ConditionalMixture mix_;
  DiffusionSchedule sched_;
};

// Ancestral (DDPM posterior) sampling from a denoiser guided at scale κ, on
// `num_steps` evenly spaced time indices from T down to 1.
tg::Tensor ancestral_sample(Denoiser& model, const DiffusionSchedule& sched,
                            std::span<const ClassId> c, double kappa, int num_steps, Rng& rng);

}  // namespace sidlab
