#include "sidlab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace sidlab {

Adam::Adam(AdamConfig config, const std::vector<tg::Parameter*>& params) : config_(config) {
  for (const auto* p : params) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step(const std::vector<tg::Parameter*>& params) {
  if (params.size() != m_.size()) {
    throw std::invalid_argument("Adam::step: parameter list does not match optimizer state");
  }
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double lr = config_.learning_rate;
  for (std::size_t i = 0; i < params.size(); ++i) {
    tg::Parameter& p = *params[i];
    if (p.grad.shape() != p.value.shape()) {
      p.zero_grad();
      continue;
    }
    tg::Tensor& m = m_[i];
    tg::Tensor& v = v_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      p.value[j] -= lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
    }
    p.zero_grad();
  }
}

LrSchedule parse_lr_schedule(const std::string& name) {
  if (name == "constant") return LrSchedule::kConstant;
  if (name == "cosine") return LrSchedule::kCosine;
  throw std::invalid_argument("unknown lr schedule '" + name + "' (expected constant or cosine)");
}

std::string to_string(LrSchedule schedule) {
  return schedule == LrSchedule::kCosine ? "cosine" : "constant";
}

double scheduled_learning_rate(LrSchedule schedule, double base, long long done, long long total) {
  if (schedule == LrSchedule::kConstant || total <= 0) return base;
  const double frac = std::clamp(static_cast<double>(done) / static_cast<double>(total), 0.0, 1.0);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace sidlab
