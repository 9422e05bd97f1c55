#pragma once

// x0-prediction networks, guidance mixing, the discriminator head that reuses
// the fake score network's encoder, and EMA of generator parameters.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sidlab/oracle.hpp"
#include "sidlab/schedule.hpp"
#include "sidlab/tensorgrad.hpp"

namespace sidlab {

struct NetworkSpec {
  int data_dim = 2;
  int num_classes = 4;
  std::vector<int> hidden{128, 128, 128};
  int time_embed_dim = 32;
  // Data scale used by the input/skip/output preconditioning.
  double sigma_data = 2.0;

  void validate() const;
  nlohmann::json to_json() const;
  static NetworkSpec from_json(const nlohmann::json& j);
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

// Anything that answers x0-predictions f(x_t, t, c) on a tape. One entry of
// `t` and `c` per row of `x_t`; `c` may hold kNullClass.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual tg::Var predict_x0(tg::Tape& tape, const tg::Var& x_t, std::span<const int> t,
                             std::span<const ClassId> c,
                             tg::ParamGrad grad = tg::ParamGrad::kFreeze) = 0;

  // Gradient-free evaluation in row chunks.
  tg::Tensor predict(const tg::Tensor& x_t, std::span<const int> t,
                     std::span<const ClassId> c);

  // Number of predict_x0 calls made so far (instrumentation).
  std::size_t forward_calls() const noexcept { return forward_calls_; }
  void reset_forward_calls() noexcept { forward_calls_ = 0; }

 protected:
  void count_forward() noexcept { ++forward_calls_; }

 private:
  std::size_t forward_calls_ = 0;
};

// Condition- and time-embedded MLP predicting x0. Used for the teacher f_φ,
// the fake score network f_ψ and the generator G_θ alike.
class ScoreNet final : public Denoiser {
 public:
  ScoreNet(NetworkSpec spec, DiffusionSchedule sched, std::uint64_t seed);

  tg::Var predict_x0(tg::Tape& tape, const tg::Var& x_t, std::span<const int> t,
                     std::span<const ClassId> c,
                     tg::ParamGrad grad = tg::ParamGrad::kFreeze) override;

  // Activations of the middle hidden layer, [rows × width].
  tg::Var encode(tg::Tape& tape, const tg::Var& x_t, std::span<const int> t,
                 std::span<const ClassId> c, tg::ParamGrad grad = tg::ParamGrad::kFreeze);

  const NetworkSpec& spec() const noexcept { return spec_; }
  const DiffusionSchedule& schedule() const noexcept { return sched_; }

  std::vector<tg::Parameter>& parameters() noexcept { return params_; }
  const std::vector<tg::Parameter>& parameters() const noexcept { return params_; }
  std::size_t parameter_count() const;
  // Copies parameter values from a network with the same spec.
  void copy_parameters_from(const ScoreNet& other);
  void zero_grad();

  std::size_t encoder_layer() const noexcept { return (spec_.hidden.size() - 1) / 2; }

 private:
  // Runs hidden layers [0, last_layer], returning each activation.
  std::vector<tg::Var> trunk(tg::Tape& tape, const tg::Var& x_t, std::span<const int> t,
                             std::span<const ClassId> c, tg::ParamGrad grad,
                             std::size_t last_layer);
  tg::Tensor time_features(std::span<const int> t) const;
  tg::Tensor condition_onehot(std::span<const ClassId> c) const;

  NetworkSpec spec_;
  DiffusionSchedule sched_;
  std::vector<tg::Parameter> params_;
};

// ε = (x_t - a_t·x0)/σ_t, row-wise.
tg::Var x0_to_eps(const tg::Var& x0_pred, const tg::Var& x_t, std::span<const int> t,
                  const DiffusionSchedule& sched);
tg::Tensor x0_to_eps(const tg::Tensor& x0_pred, const tg::Tensor& x_t, std::span<const int> t,
                     const DiffusionSchedule& sched);
// score = -ε/σ_t, row-wise.
tg::Tensor x0_to_score(const tg::Tensor& x0_pred, const tg::Tensor& x_t,
                       std::span<const int> t, const DiffusionSchedule& sched);
// x0 = (x_t - σ_t·ε)/a_t, row-wise.
tg::Tensor eps_to_x0(const tg::Tensor& eps, const tg::Tensor& x_t, std::span<const int> t,
                     const DiffusionSchedule& sched);

// f_κ(x_t, c) = f(x_t, ∅) + κ[f(x_t, c) - f(x_t, ∅)]. κ = 1 and κ = 0 each
// cost a single forward pass.
tg::Var apply_cfg(Denoiser& net, tg::Tape& tape, const tg::Var& x_t, std::span<const int> t,
                  std::span<const ClassId> c, double kappa,
                  tg::ParamGrad grad = tg::ParamGrad::kFreeze);

// Evaluates f(x_t, c) and f(x_t, ∅) at most once each and mixes them for any
// number of guidance scales.
class GuidedEvaluator {
 public:
  GuidedEvaluator(Denoiser& net, tg::Tape& tape, tg::Var x_t, std::span<const int> t,
                  std::span<const ClassId> c, tg::ParamGrad grad = tg::ParamGrad::kFreeze);
  tg::Var at(double kappa);

 private:
  const tg::Var& conditional();
  const tg::Var& unconditional();

  Denoiser& net_;
  tg::Tape& tape_;
  tg::Var x_t_;
  std::span<const int> t_;
  std::vector<ClassId> c_;
  tg::ParamGrad grad_;
  tg::Var cond_;
  tg::Var uncond_;
};

// Linear map + sigmoid over the mean-pooled encoder activations of a fake
// score network: D(c, x_t) ∈ (0, 1), a 1×1 discriminator map.
class DiscriminatorHead {
 public:
  DiscriminatorHead();

  // Pre-sigmoid logits, [rows × 1].
  tg::Var logits(tg::Tape& tape, ScoreNet& encoder_net, const tg::Var& x_t,
                 std::span<const int> t, std::span<const ClassId> c,
                 tg::ParamGrad head_grad = tg::ParamGrad::kFreeze,
                 tg::ParamGrad encoder_grad = tg::ParamGrad::kFreeze);
  tg::Var discriminate(tg::Tape& tape, ScoreNet& encoder_net, const tg::Var& x_t,
                       std::span<const int> t, std::span<const ClassId> c,
                       tg::ParamGrad head_grad = tg::ParamGrad::kFreeze,
                       tg::ParamGrad encoder_grad = tg::ParamGrad::kFreeze);

  std::vector<tg::Parameter>& parameters() noexcept { return params_; }
  const std::vector<tg::Parameter>& parameters() const noexcept { return params_; }

 private:
  std::vector<tg::Parameter> params_;
};

class EmaError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Shadow copy of a parameter set decaying with a half-life measured in
// generated images. Half-life 0 keeps the shadow equal to the live values.
class EmaState {
 public:
  EmaState() = default;
  EmaState(double half_life_images, const std::vector<tg::Parameter>& live);

  void update(const std::vector<tg::Parameter>& live, long long images_this_batch);

  double half_life() const noexcept { return half_life_; }
  long long images_seen() const noexcept { return images_seen_; }
  void set_images_seen(long long n) noexcept { images_seen_ = n; }
  std::vector<tg::Tensor>& shadow() noexcept { return shadow_; }
  const std::vector<tg::Tensor>& shadow() const noexcept { return shadow_; }

 private:
  double half_life_ = 0.0;
  long long images_seen_ = 0;
  std::vector<tg::Tensor> shadow_;
};

}  // namespace sidlab
