#pragma once

// Ground-truth conditional data distribution: a 2-D Gaussian mixture per class.
// Everything the forward process does to it is available in closed form.

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "sidlab/rng.hpp"
#include "sidlab/schedule.hpp"

namespace sidlab {

using ClassId = int;
// The null condition ∅: the class-marginal mixture.
inline constexpr ClassId kNullClass = -1;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2, Vec2) = default;
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
};

// Symmetric 2×2 matrix [[xx, xy], [xy, yy]].
struct Sym2 {
  double xx = 0.0;
  double xy = 0.0;
  double yy = 0.0;

  static Sym2 identity(double s = 1.0) { return {s, 0.0, s}; }
  double det() const { return xx * yy - xy * xy; }
  double min_eigenvalue() const;
  Sym2 inverse() const;
  Vec2 operator*(Vec2 v) const { return {xx * v.x + xy * v.y, xy * v.x + yy * v.y}; }
  friend Sym2 operator+(Sym2 a, Sym2 b) { return {a.xx + b.xx, a.xy + b.xy, a.yy + b.yy}; }
  friend Sym2 operator*(double s, Sym2 a) { return {s * a.xx, s * a.xy, s * a.yy}; }
};

// Row-major 2×2 matrix, used for Jacobians.
using Mat2 = std::array<double, 4>;

struct Component {
  double weight = 1.0;
  Vec2 mean;
  Sym2 cov;
};

class MixtureError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConditionalMixture {
 public:
  // One component list per class; `prior` defaults to uniform.
  ConditionalMixture(std::vector<std::vector<Component>> classes,
                     std::vector<double> prior = {});

  // Four classes, two components each: inner ring (radius 2) at angle
  // c·π/2, outer ring (radius 4) at angle c·π/2 + π/4, covariance 0.15·I.
  static ConditionalMixture rings(int num_classes = 4, double inner_radius = 2.0,
                                  double outer_radius = 4.0, double variance = 0.15);
  // A single class holding a single Gaussian.
  static ConditionalMixture single_gaussian(Vec2 mean, Sym2 cov);

  static ConditionalMixture from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  // FNV-1a over the canonical JSON dump.
  std::uint64_t hash() const;

  int num_classes() const noexcept { return static_cast<int>(classes_.size()); }
  const std::vector<double>& prior() const noexcept { return prior_; }
  // Components of p(x0 | c); for kNullClass the prior-weighted union.
  std::vector<Component> components(ClassId c) const;

  struct Pair {
    ClassId c;
    Vec2 x0;
  };
  Pair sample_pair(Rng& rng) const;
  Vec2 sample(ClassId c, Rng& rng) const;
  ClassId sample_class(Rng& rng) const;

  // Law of x_t: means a_t·μ_i, covariances a_t²Σ_i + σ_t²I.
  std::vector<Component> diffused_params(int t, const DiffusionSchedule& sched,
                                         ClassId c) const;

  double log_density(Vec2 x_t, int t, const DiffusionSchedule& sched, ClassId c) const;
  // ∇ ln p(x_t | c).
  Vec2 score(Vec2 x_t, int t, const DiffusionSchedule& sched, ClassId c) const;
  // ∇² ln p(x_t | c), row-major.
  Mat2 score_jacobian(Vec2 x_t, int t, const DiffusionSchedule& sched, ClassId c) const;
  // E[x0 | x_t, c] = (x_t + σ_t²·score)/a_t.
  Vec2 posterior_mean(Vec2 x_t, int t, const DiffusionSchedule& sched, ClassId c) const;
  // ∂E[x0 | x_t, c]/∂x_t = (I + σ_t²·∇²ln p)/a_t.
  Mat2 posterior_mean_jacobian(Vec2 x_t, int t, const DiffusionSchedule& sched,
                               ClassId c) const;

  // Density of the clean data (t = 0).
  double clean_log_density(Vec2 x, ClassId c) const;
  // Bayes posterior p(c | x) under the clean class mixtures.
  std::vector<double> class_posterior(Vec2 x) const;

  void check_class(ClassId c) const;

 private:
  std::vector<std::vector<Component>> classes_;
  std::vector<double> prior_;
};

double gaussian_log_density(Vec2 x, Vec2 mean, const Sym2& cov);

}  // namespace sidlab
