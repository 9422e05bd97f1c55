#pragma once

// Desk-scale evaluation: Fréchet distance between Gaussian fits in data
// space, a Bayes-posterior alignment score, and a Monte Carlo estimate of the
// model-based Fisher divergence against the analytic data score.

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "sidlab/oracle.hpp"
#include "sidlab/rng.hpp"
#include "sidlab/schedule.hpp"
#include "sidlab/tensorgrad.hpp"

namespace sidlab {

class MetricsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ‖μ_a - μ_b‖² + tr(Σ_a + Σ_b - 2(Σ_a Σ_b)^{1/2}); rows are samples. Both
// covariances get +1e-6·I.
double frechet_gaussian(const tg::Tensor& samples_a, const tg::Tensor& samples_b);

// Mean over samples of p(c_i | x_i) under the clean mixture.
double alignment_score(const tg::Tensor& samples, std::span<const ClassId> c,
                       const ConditionalMixture& mix);

// Model score s(x_t, t, c) for a batch at a single t.
using ScoreFn = std::function<tg::Tensor(const tg::Tensor& x_t, std::span<const int> t,
                                         std::span<const ClassId> c)>;

// E_t E_{x_t ~ p_θ} ‖∇ln p_data(x_t | c) - s(x_t, t, c)‖², with x_t the
// forward-diffused `x_g` rows and t drawn from `t_set` in turn.
double fisher_estimate(const ScoreFn& model_score, const tg::Tensor& x_g,
                       std::span<const ClassId> c, const ConditionalMixture& mix,
                       const DiffusionSchedule& sched, std::span<const int> t_set, Rng& rng);

struct MetricsReport {
  double frechet_uncond = 0.0;
  std::vector<double> frechet_per_class;
  double alignment = 0.0;
  double fisher_estimate = 0.0;
  long long num_samples = 0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

// Fills the sample-based fields: Fréchet (unconditional and per class) against
// `reference` drawn from the data, and alignment.
MetricsReport sample_metrics(const tg::Tensor& generated, std::span<const ClassId> c,
                             const tg::Tensor& reference, std::span<const ClassId> reference_c,
                             const ConditionalMixture& mix);

// Rows drawn from p_data(· | c_i).
tg::Tensor sample_data(const ConditionalMixture& mix, std::span<const ClassId> c, Rng& rng);
// Classes drawn from the prior.
std::vector<ClassId> sample_classes(const ConditionalMixture& mix, std::size_t n, Rng& rng);

}  // namespace sidlab
