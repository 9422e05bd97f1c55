#include "sidlab/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace sidlab {
namespace {

constexpr double kMinEigenvalue = 1e-9;

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

// Responsibilities r_k ∝ w_k N(x; m_k, V_k) and their log normalizer.
double responsibilities(const std::vector<Component>& comps, Vec2 x,
                        std::vector<double>& r) {
  r.resize(comps.size());
  for (std::size_t k = 0; k < comps.size(); ++k) {
    r[k] = std::log(comps[k].weight) + gaussian_log_density(x, comps[k].mean, comps[k].cov);
  }
  const double lse = log_sum_exp(r);
  for (double& v : r) v = std::exp(v - lse);
  return lse;
}

}  // namespace

double Sym2::min_eigenvalue() const {
  const double half_tr = 0.5 * (xx + yy);
  const double disc = std::sqrt(0.25 * (xx - yy) * (xx - yy) + xy * xy);
  return half_tr - disc;
}

Sym2 Sym2::inverse() const {
  const double d = det();
  return {yy / d, -xy / d, xx / d};
}

double gaussian_log_density(Vec2 x, Vec2 mean, const Sym2& cov) {
  const Vec2 r = x - mean;
  const Sym2 inv = cov.inverse();
  return -0.5 * r.dot(inv * r) - std::log(2.0 * std::numbers::pi) - 0.5 * std::log(cov.det());
}

ConditionalMixture::ConditionalMixture(std::vector<std::vector<Component>> classes,
                                       std::vector<double> prior)
    : classes_(std::move(classes)), prior_(std::move(prior)) {
  if (classes_.empty()) throw MixtureError("mixture needs at least one class");
  if (prior_.empty()) {
    prior_.assign(classes_.size(), 1.0 / static_cast<double>(classes_.size()));
  }
  if (prior_.size() != classes_.size()) {
    throw MixtureError("class prior length does not match the number of classes");
  }
  const double prior_sum = std::accumulate(prior_.begin(), prior_.end(), 0.0);
  if (std::abs(prior_sum - 1.0) > 1e-12 ||
      std::any_of(prior_.begin(), prior_.end(), [](double p) { return !(p > 0.0); })) {
    throw MixtureError("class prior must be positive and sum to 1");
  }
  for (std::size_t c = 0; c < classes_.size(); ++c) {
    const auto& comps = classes_[c];
    if (comps.empty()) throw MixtureError("class " + std::to_string(c) + " has no components");
    double wsum = 0.0;
    for (const auto& comp : comps) {
      if (!(comp.weight > 0.0)) {
        throw MixtureError("class " + std::to_string(c) + ": component weight must be > 0");
      }
      if (!(comp.cov.min_eigenvalue() > kMinEigenvalue)) {
        throw MixtureError("class " + std::to_string(c) +
                           ": covariance is not symmetric positive definite");
      }
      wsum += comp.weight;
    }
    if (std::abs(wsum - 1.0) > 1e-12) {
      throw MixtureError("class " + std::to_string(c) + ": component weights must sum to 1");
    }
  }
}

ConditionalMixture ConditionalMixture::rings(int num_classes, double inner_radius,
                                             double outer_radius, double variance) {
  if (num_classes < 1) throw MixtureError("rings preset needs at least one class");
  std::vector<std::vector<Component>> classes;
  const double step = 2.0 * std::numbers::pi / num_classes;
  for (int c = 0; c < num_classes; ++c) {
    const double inner = step * c;
    const double outer = inner + 0.5 * step;
    classes.push_back({
        Component{0.5, {inner_radius * std::cos(inner), inner_radius * std::sin(inner)},
                  Sym2::identity(variance)},
        Component{0.5, {outer_radius * std::cos(outer), outer_radius * std::sin(outer)},
                  Sym2::identity(variance)},
    });
  }
  return ConditionalMixture(std::move(classes));
}

ConditionalMixture ConditionalMixture::single_gaussian(Vec2 mean, Sym2 cov) {
  return ConditionalMixture({{Component{1.0, mean, cov}}});
}

nlohmann::json ConditionalMixture::to_json() const {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& comps : classes_) {
    nlohmann::json jc = nlohmann::json::array();
    for (const auto& comp : comps) {
      jc.push_back({{"weight", comp.weight},
                    {"mean", {comp.mean.x, comp.mean.y}},
                    {"cov", {{comp.cov.xx, comp.cov.xy}, {comp.cov.xy, comp.cov.yy}}}});
    }
    classes.push_back({{"components", jc}});
  }
  return {{"classes", classes}, {"prior", prior_}};
}

ConditionalMixture ConditionalMixture::from_json(const nlohmann::json& j) {
  std::vector<std::vector<Component>> classes;
  for (const auto& jc : j.at("classes")) {
    std::vector<Component> comps;
    for (const auto& jp : jc.at("components")) {
      const auto& m = jp.at("mean");
      const auto& v = jp.at("cov");
      if (m.size() != 2 || v.size() != 2 || v[0].size() != 2 || v[1].size() != 2) {
        throw MixtureError("component mean must be a 2-vector and cov a 2x2 matrix");
      }
      const double xy = v[0][1].get<double>();
      if (std::abs(xy - v[1][0].get<double>()) > 1e-12) {
        throw MixtureError("component covariance must be symmetric");
      }
      comps.push_back(Component{jp.value("weight", 1.0),
                                {m[0].get<double>(), m[1].get<double>()},
                                {v[0][0].get<double>(), xy, v[1][1].get<double>()}});
    }
    classes.push_back(std::move(comps));
  }
  std::vector<double> prior;
  if (j.contains("prior")) prior = j.at("prior").get<std::vector<double>>();
  return ConditionalMixture(std::move(classes), std::move(prior));
}

std::uint64_t ConditionalMixture::hash() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void ConditionalMixture::check_class(ClassId c) const {
  if (c != kNullClass && (c < 0 || c >= num_classes())) {
    throw MixtureError("unknown class id " + std::to_string(c));
  }
}

std::vector<Component> ConditionalMixture::components(ClassId c) const {
  check_class(c);
  if (c != kNullClass) return classes_[static_cast<std::size_t>(c)];
  std::vector<Component> all;
  for (std::size_t k = 0; k < classes_.size(); ++k) {
    for (Component comp : classes_[k]) {
      comp.weight *= prior_[k];
      all.push_back(comp);
    }
  }
  return all;
}

ClassId ConditionalMixture::sample_class(Rng& rng) const {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < prior_.size(); ++k) {
    acc += prior_[k];
    if (u < acc) return static_cast<ClassId>(k);
  }
  return static_cast<ClassId>(prior_.size() - 1);
}

Vec2 ConditionalMixture::sample(ClassId c, Rng& rng) const {
  const auto comps = components(c);
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t pick = comps.size() - 1;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    acc += comps[k].weight;
    if (u < acc) {
      pick = k;
      break;
    }
  }
  const Component& comp = comps[pick];
  // Cholesky of the 2×2 covariance.
  const double l11 = std::sqrt(comp.cov.xx);
  const double l21 = comp.cov.xy / l11;
  const double l22 = std::sqrt(comp.cov.yy - l21 * l21);
  const double z1 = rng.normal();
  const double z2 = rng.normal();
  return {comp.mean.x + l11 * z1, comp.mean.y + l21 * z1 + l22 * z2};
}

ConditionalMixture::Pair ConditionalMixture::sample_pair(Rng& rng) const {
  const ClassId c = sample_class(rng);
  return {c, sample(c, rng)};
}

std::vector<Component> ConditionalMixture::diffused_params(int t, const DiffusionSchedule& sched,
                                                           ClassId c) const {
  const double a = sched.a(t);
  const double s = sched.sigma(t);
  auto comps = components(c);
  for (auto& comp : comps) {
    comp.mean = a * comp.mean;
    comp.cov = (a * a) * comp.cov + Sym2::identity(s * s);
  }
  return comps;
}

double ConditionalMixture::log_density(Vec2 x_t, int t, const DiffusionSchedule& sched,
                                       ClassId c) const {
  std::vector<double> r;
  return responsibilities(diffused_params(t, sched, c), x_t, r);
}

Vec2 ConditionalMixture::score(Vec2 x_t, int t, const DiffusionSchedule& sched,
                               ClassId c) const {
  const auto comps = diffused_params(t, sched, c);
  std::vector<double> r;
  responsibilities(comps, x_t, r);
  Vec2 s;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const Vec2 g = comps[k].cov.inverse() * (comps[k].mean - x_t);
    s = s + r[k] * g;
  }
  return s;
}

Mat2 ConditionalMixture::score_jacobian(Vec2 x_t, int t, const DiffusionSchedule& sched,
                                        ClassId c) const {
  const auto comps = diffused_params(t, sched, c);
  std::vector<double> r;
  responsibilities(comps, x_t, r);
  // ∇² ln Σ_k w_k N_k = Σ_k r_k (g_k g_kᵀ - V_k⁻¹) - s sᵀ
  Mat2 h{0.0, 0.0, 0.0, 0.0};
  Vec2 s;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const Sym2 inv = comps[k].cov.inverse();
    const Vec2 g = inv * (comps[k].mean - x_t);
    s = s + r[k] * g;
    h[0] += r[k] * (g.x * g.x - inv.xx);
    h[1] += r[k] * (g.x * g.y - inv.xy);
    h[2] += r[k] * (g.y * g.x - inv.xy);
    h[3] += r[k] * (g.y * g.y - inv.yy);
  }
  h[0] -= s.x * s.x;
  h[1] -= s.x * s.y;
  h[2] -= s.y * s.x;
  h[3] -= s.y * s.y;
  return h;
}

Vec2 ConditionalMixture::posterior_mean(Vec2 x_t, int t, const DiffusionSchedule& sched,
                                        ClassId c) const {
  const double a = sched.a(t);
  if (a < 1e-12) throw MixtureError("posterior mean undefined: a_t below 1e-12");
  const double s2 = sched.sigma(t) * sched.sigma(t);
  return (1.0 / a) * (x_t + s2 * score(x_t, t, sched, c));
}

Mat2 ConditionalMixture::posterior_mean_jacobian(Vec2 x_t, int t, const DiffusionSchedule& sched,
                                                 ClassId c) const {
  const double a = sched.a(t);
  if (a < 1e-12) throw MixtureError("posterior mean undefined: a_t below 1e-12");
  const double s2 = sched.sigma(t) * sched.sigma(t);
  Mat2 h = score_jacobian(x_t, t, sched, c);
  return {(1.0 + s2 * h[0]) / a, s2 * h[1] / a, s2 * h[2] / a, (1.0 + s2 * h[3]) / a};
}

double ConditionalMixture::clean_log_density(Vec2 x, ClassId c) const {
  std::vector<double> r;
  return responsibilities(components(c), x, r);
}

std::vector<double> ConditionalMixture::class_posterior(Vec2 x) const {
  std::vector<double> logp(classes_.size());
  for (std::size_t k = 0; k < classes_.size(); ++k) {
    logp[k] = std::log(prior_[k]) + clean_log_density(x, static_cast<ClassId>(k));
  }
  const double lse = log_sum_exp(logp);
  for (double& v : logp) v = std::exp(v - lse);
  return logp;
}

}  // namespace sidlab
