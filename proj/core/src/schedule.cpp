#include "sidlab/schedule.hpp"

#include <cmath>
#include <string>

namespace sidlab {

DiffusionSchedule DiffusionSchedule::linear(int steps, double beta_1, double beta_T) {
  if (steps < 2) throw ScheduleError("schedule needs T >= 2");
  if (!(beta_1 > 0.0 && beta_1 <= beta_T && beta_T < 1.0)) {
    throw ScheduleError("schedule needs 0 < beta_1 <= beta_T < 1");
  }
  DiffusionSchedule s;
  s.steps_ = steps;
  s.beta_1_ = beta_1;
  s.beta_T_ = beta_T;
  s.a_.resize(steps);
  s.sigma_.resize(steps);
  s.beta_.resize(steps);
  // Accumulate ln ∏(1-β) so σ_t² = -expm1(·) keeps full precision near t = 1.
  double log_alpha_bar = 0.0;
  for (int i = 0; i < steps; ++i) {
    const double beta =
        beta_1 + (beta_T - beta_1) * static_cast<double>(i) / static_cast<double>(steps - 1);
    log_alpha_bar += std::log1p(-beta);
    s.beta_[i] = beta;
    s.a_[i] = std::exp(0.5 * log_alpha_bar);
    s.sigma_[i] = std::sqrt(-std::expm1(log_alpha_bar));
  }
  return s;
}

double DiffusionSchedule::snr(int t) const {
  const double a = this->a(t);
  const double s = sigma(t);
  return (a * a) / (s * s);
}

void DiffusionSchedule::check_t(int t) const {
  if (t < 1 || t > steps_) {
    throw ScheduleError("time index " + std::to_string(t) + " outside [1, " +
                        std::to_string(steps_) + "]");
  }
}

void TimeParams::validate(int steps) const {
  if (!(1 <= t_min && t_min < t_init && t_init < t_max && t_max <= steps)) {
    throw ScheduleError("time params need 1 <= t_min < t_init < t_max <= T (got " +
                        std::to_string(t_min) + ", " + std::to_string(t_init) + ", " +
                        std::to_string(t_max) + ")");
  }
}

tg::Tensor diffuse(const tg::Tensor& x0, int t, const tg::Tensor& eps,
                   const DiffusionSchedule& sched) {
  if (x0.shape() != eps.shape()) {
    throw tg::DimensionError("diffuse: noise shape " + tg::shape_string(eps.shape()) +
                             " != data shape " + tg::shape_string(x0.shape()));
  }
  const double a = sched.a(t);
  const double s = sched.sigma(t);
  tg::Tensor out(x0.shape());
  for (std::size_t j = 0; j < x0.size(); ++j) out[j] = a * x0[j] + s * eps[j];
  return out;
}

tg::Var diffuse(const tg::Var& x0, std::span<const int> t, const tg::Tensor& eps,
                const DiffusionSchedule& sched) {
  const tg::Tensor& xv = x0.value();
  if (xv.shape() != eps.shape()) {
    throw tg::DimensionError("diffuse: noise shape " + tg::shape_string(eps.shape()) +
                             " != data shape " + tg::shape_string(xv.shape()));
  }
  const std::size_t m = xv.rows();
  const std::size_t d = xv.cols();
  if (t.size() != m) throw tg::DimensionError("diffuse: one time index per row required");
  tg::Tensor coef(xv.shape());
  tg::Tensor noise(xv.shape());
  for (std::size_t r = 0; r < m; ++r) {
    const double a = sched.a(t[r]);
    const double s = sched.sigma(t[r]);
    for (std::size_t j = 0; j < d; ++j) {
      coef[r * d + j] = a;
      noise[r * d + j] = s * eps[r * d + j];
    }
  }
  tg::Tape& tape = x0.tape();
  return tg::add(tg::mul(x0, tape.constant(std::move(coef))), tape.constant(std::move(noise)));
}

std::vector<int> tau_schedule(int steps, int t_init) {
  if (steps < 1) throw ScheduleError("tau_schedule needs K >= 1");
  if (t_init < steps) throw ScheduleError("tau_schedule needs t_init >= K");
  std::vector<int> taus;
  taus.reserve(static_cast<std::size_t>(steps));
  for (int k = 1; k <= steps; ++k) {
    // Integer form of ⌊(1 - (k-1)/K)·t_init⌋, exact for all inputs.
    const long long num = static_cast<long long>(steps - (k - 1)) * t_init;
    taus.push_back(static_cast<int>(num / steps));
  }
  return taus;
}

int sample_t(const TimeParams& params, Rng& rng) {
  return rng.uniform_int(params.t_min, params.t_max);
}

}  // namespace sidlab
