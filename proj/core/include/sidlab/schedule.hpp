#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "sidlab/rng.hpp"
#include "sidlab/tensorgrad.hpp"

namespace sidlab {

class ScheduleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Discrete variance-preserving forward process q(x_t | x_0) = N(a_t x_0, σ_t² I)
// for t ∈ {1..T}.
class DiffusionSchedule {
 public:
  // β linearly interpolated from beta_1 to beta_T; a_t = sqrt(∏_{s≤t}(1-β_s)).
  static DiffusionSchedule linear(int steps, double beta_1, double beta_T);

  int steps() const noexcept { return steps_; }
  double beta_1() const noexcept { return beta_1_; }
  double beta_T() const noexcept { return beta_T_; }

  double a(int t) const { return a_[index(t)]; }
  double sigma(int t) const { return sigma_[index(t)]; }
  double beta(int t) const { return beta_[index(t)]; }
  // a_t² / σ_t²
  double snr(int t) const;

  void check_t(int t) const;

 private:
  DiffusionSchedule() = default;
  std::size_t index(int t) const {
    check_t(t);
    return static_cast<std::size_t>(t - 1);
  }

  int steps_ = 0;
  double beta_1_ = 0.0;
  double beta_T_ = 0.0;
  std::vector<double> a_;
  std::vector<double> sigma_;
  std::vector<double> beta_;
};

// (t_min, t_init, t_max): the range t is drawn from during distillation and
// the generator's starting time.
struct TimeParams {
  int t_min = 20;
  int t_init = 625;
  int t_max = 979;

  void validate(int steps) const;
};

// a_t·x0 + σ_t·eps with one t for the whole batch.
tg::Tensor diffuse(const tg::Tensor& x0, int t, const tg::Tensor& eps,
                   const DiffusionSchedule& sched);

// Row-wise a_{t_r}·x0_r + σ_{t_r}·eps_r, recorded on x0's tape.
tg::Var diffuse(const tg::Var& x0, std::span<const int> t, const tg::Tensor& eps,
                const DiffusionSchedule& sched);

// τ_k = ⌊(1 - (k-1)/K)·t_init⌋ for k = 1..K.
std::vector<int> tau_schedule(int steps, int t_init);

// Uniform draw from {t_min, ..., t_max}.
int sample_t(const TimeParams& params, Rng& rng);

}  // namespace sidlab
