#pragma once

#include <string>
#include <vector>

#include "sidlab/tensorgrad.hpp"

namespace sidlab {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction over an ordered list of parameters. The list
// order is part of the state: moments are stored positionally.
class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig config, const std::vector<tg::Parameter*>& params);

  // Applies one update from each parameter's accumulated grad, then zeroes it.
  void step(const std::vector<tg::Parameter*>& params);

  const AdamConfig& config() const noexcept { return config_; }
  void set_learning_rate(double lr) noexcept { config_.learning_rate = lr; }
  long long steps() const noexcept { return steps_; }
  void set_steps(long long n) noexcept { steps_ = n; }
  std::vector<tg::Tensor>& first_moments() noexcept { return m_; }
  std::vector<tg::Tensor>& second_moments() noexcept { return v_; }
  const std::vector<tg::Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<tg::Tensor>& second_moments() const noexcept { return v_; }

 private:
  AdamConfig config_;
  long long steps_ = 0;
  std::vector<tg::Tensor> m_;
  std::vector<tg::Tensor> v_;
};

enum class LrSchedule { kConstant, kCosine };

LrSchedule parse_lr_schedule(const std::string& name);
std::string to_string(LrSchedule schedule);
// Learning rate after `done` of `total` units of progress; cosine decays to 0.
double scheduled_learning_rate(LrSchedule schedule, double base, long long done, long long total);

template <typename... Lists>
std::vector<tg::Parameter*> collect_parameters(Lists&... lists) {
  std::vector<tg::Parameter*> out;
  (
      [&] {
        for (auto& p : lists) out.push_back(&p);
      }(),
      ...);
  return out;
}

}  // namespace sidlab
