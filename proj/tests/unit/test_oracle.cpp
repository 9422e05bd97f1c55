#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "sidlab/oracle.hpp"
#include "sidlab/schedule.hpp"

namespace sidlab {
namespace {

DiffusionSchedule default_schedule() { return DiffusionSchedule::linear(1000, 1e-4, 0.02); }

ConditionalMixture two_component() {
  return ConditionalMixture({{Component{0.3, {-1.5, 0.5}, {0.4, 0.1, 0.3}},
                              Component{0.7, {1.0, -0.5}, {0.2, -0.05, 0.5}}}});
}

double normal_cdf(double x, double mean, double var) {
  return 0.5 * std::erfc(-(x - mean) / std::sqrt(2.0 * var));
}

// Asymptotic Kolmogorov p-value for statistic D on n samples.
double ks_p_value(double d, std::size_t n) {
  const double lambda = (std::sqrt(static_cast<double>(n)) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) {
    p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  }
  return std::clamp(p, 0.0, 1.0);
}

TEST(Mixture, RejectsInvalidSpecs) {
  EXPECT_THROW(ConditionalMixture(std::vector<std::vector<Component>>{}), MixtureError);
  EXPECT_THROW(ConditionalMixture(std::vector<std::vector<Component>>(1)), MixtureError);
  EXPECT_THROW(ConditionalMixture({{Component{1.0, {0, 0}, {1, 2, 1}}}}), MixtureError);
  EXPECT_THROW(ConditionalMixture({{Component{0.5, {0, 0}, Sym2::identity()}}}), MixtureError);
  EXPECT_THROW(ConditionalMixture({{Component{1.0, {0, 0}, Sym2::identity()}}}, {0.5}),
               MixtureError);
  EXPECT_THROW(ConditionalMixture::rings().check_class(4), MixtureError);
}

TEST(Mixture, RingsPresetGeometry) {
  const auto mix = ConditionalMixture::rings();
  ASSERT_EQ(mix.num_classes(), 4);
  for (int c = 0; c < 4; ++c) {
    const auto comps = mix.components(c);
    ASSERT_EQ(comps.size(), 2u);
    EXPECT_NEAR(std::hypot(comps[0].mean.x, comps[0].mean.y), 2.0, 1e-12);
    EXPECT_NEAR(std::hypot(comps[1].mean.x, comps[1].mean.y), 4.0, 1e-12);
    EXPECT_DOUBLE_EQ(comps[0].cov.xx, 0.15);
    EXPECT_DOUBLE_EQ(comps[0].cov.xy, 0.0);
  }
  EXPECT_EQ(mix.components(kNullClass).size(), 8u);
}

TEST(Mixture, JsonRoundTripPreservesHash) {
  const auto mix = two_component();
  const auto back = ConditionalMixture::from_json(mix.to_json());
  EXPECT_EQ(back.to_json(), mix.to_json());
  EXPECT_EQ(back.hash(), mix.hash());
  EXPECT_NE(ConditionalMixture::rings().hash(), mix.hash());
}

TEST(SamplePair, DegenerateVarianceReturnsMean) {
  const auto mix = ConditionalMixture::single_gaussian({1.25, -0.5}, Sym2::identity(1e-8));
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto p = mix.sample_pair(rng);
    EXPECT_EQ(p.c, 0);
    EXPECT_NEAR(p.x0.x, 1.25, 1e-3);
    EXPECT_NEAR(p.x0.y, -0.5, 1e-3);
  }
}

TEST(SamplePair, ClassFrequenciesMatchPrior) {
  const std::vector<double> prior{0.1, 0.2, 0.3, 0.4};
  const auto rings = ConditionalMixture::rings();
  std::vector<std::vector<Component>> classes;
  for (int c = 0; c < 4; ++c) classes.push_back(rings.components(c));
  const ConditionalMixture mix(classes, prior);
  Rng rng(2);
  const int n = 100000;
  std::vector<int> counts(4, 0);
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(mix.sample_pair(rng).c)];
  for (int c = 0; c < 4; ++c) {
    const double p = prior[static_cast<std::size_t>(c)];
    EXPECT_NEAR(counts[static_cast<std::size_t>(c)] / double(n), p, 3.0 * std::sqrt(p * (1 - p) / n));
  }
}

TEST(SamplePair, PerClassMeanWithinThreeStandardErrors) {
  const auto mix = ConditionalMixture::rings();
  Rng rng(3);
  const int n = 40000;
  for (int c = 0; c < 4; ++c) {
    Vec2 mean{0, 0};
    double var_x = 0.0;
    double var_y = 0.0;
    const auto comps = mix.components(c);
    for (const auto& k : comps) mean = mean + k.weight * k.mean;
    for (const auto& k : comps) {
      var_x += k.weight * (k.cov.xx + (k.mean.x - mean.x) * (k.mean.x - mean.x));
      var_y += k.weight * (k.cov.yy + (k.mean.y - mean.y) * (k.mean.y - mean.y));
    }
    Vec2 acc{0, 0};
    for (int i = 0; i < n; ++i) acc = acc + mix.sample(c, rng);
    EXPECT_NEAR(acc.x / n, mean.x, 3.0 * std::sqrt(var_x / n));
    EXPECT_NEAR(acc.y / n, mean.y, 3.0 * std::sqrt(var_y / n));
  }
}

TEST(DiffusedParams, StandardNormalIsInvariant) {
  const auto mix = ConditionalMixture::single_gaussian({0, 0}, Sym2::identity());
  const auto s = default_schedule();
  for (int t : {1, 300, 1000}) {
    const auto d = mix.diffused_params(t, s, 0);
    ASSERT_EQ(d.size(), 1u);
    EXPECT_NEAR(d[0].cov.xx, 1.0, 1e-12);
    EXPECT_NEAR(d[0].cov.yy, 1.0, 1e-12);
    EXPECT_NEAR(d[0].cov.xy, 0.0, 1e-12);
  }
}

TEST(DiffusedParams, MeansVanishAtLastStep) {
  const auto s = default_schedule();
  for (const auto& comp : ConditionalMixture::rings().diffused_params(1000, s, kNullClass)) {
    EXPECT_LT(std::hypot(comp.mean.x, comp.mean.y), 0.03);
  }
}

TEST(DiffusedParams, SmallestStepIsCloseToCleanMixture) {
  const auto mix = two_component();
  const auto s = default_schedule();
  for (Vec2 x : {Vec2{0, 0}, Vec2{-1.5, 0.5}, Vec2{1, 1}}) {
    EXPECT_NEAR(mix.log_density(x, 1, s, 0), mix.clean_log_density(x, 0), 2e-3);
  }
}

TEST(DiffusedParams, TwoComponentMarginalPassesKolmogorovSmirnov) {
  const auto mix = two_component();
  const auto s = default_schedule();
  const int t = 200;
  const auto comps = mix.diffused_params(t, s, 0);
  Rng rng(4);
  const std::size_t n = 20000;
  std::vector<double> xs(n);
  for (auto& x : xs) x = s.a(t) * mix.sample(0, rng).x + s.sigma(t) * rng.normal();
  std::sort(xs.begin(), xs.end());
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double cdf = 0.0;
    for (const auto& k : comps) cdf += k.weight * normal_cdf(xs[i], k.mean.x, k.cov.xx);
    d = std::max({d, std::abs(cdf - double(i) / n), std::abs(cdf - double(i + 1) / n)});
  }
  EXPECT_GT(ks_p_value(d, n), 0.01);
}

TEST(Score, GaussianClosedForm) {
  const Sym2 cov{0.5, 0.2, 0.8};
  const auto mix = ConditionalMixture::single_gaussian({1.0, -2.0}, cov);
  const auto s = default_schedule();
  const int t = 400;
  const auto d = mix.diffused_params(t, s, 0)[0];
  const Vec2 x{0.3, 0.7};
  const Vec2 expected = -1.0 * (d.cov.inverse() * (x - d.mean));
  const Vec2 got = mix.score(x, t, s, 0);
  EXPECT_NEAR(got.x, expected.x, 1e-12);
  EXPECT_NEAR(got.y, expected.y, 1e-12);
  const Vec2 at_mode = mix.score(d.mean, t, s, 0);
  EXPECT_NEAR(at_mode.x, 0.0, 1e-12);
  EXPECT_NEAR(at_mode.y, 0.0, 1e-12);
}

TEST(Score, SymmetricPairHasNoPullAtMidpoint) {
  const ConditionalMixture mix({{Component{0.5, {-2, 1}, Sym2::identity(0.3)},
                                 Component{0.5, {2, 1}, Sym2::identity(0.3)}}});
  const auto s = default_schedule();
  for (int t : {10, 300, 800}) EXPECT_NEAR(mix.score({0.0, 0.4}, t, s, 0).x, 0.0, 1e-12);
}

TEST(Score, MatchesFiniteDifferenceOfLogDensity) {
  const auto mix = ConditionalMixture::rings();
  const auto s = default_schedule();
  Rng rng(5);
  const double h = 1e-5;
  for (int i = 0; i < 100; ++i) {
    const int t = rng.uniform_int(1, 1000);
    const ClassId c = rng.uniform_int(-1, 3);
    const Vec2 x{4.0 * rng.normal(), 4.0 * rng.normal()};
    const Vec2 g = mix.score(x, t, s, c);
    const double gx = (mix.log_density({x.x + h, x.y}, t, s, c) -
                       mix.log_density({x.x - h, x.y}, t, s, c)) / (2 * h);
    const double gy = (mix.log_density({x.x, x.y + h}, t, s, c) -
                       mix.log_density({x.x, x.y - h}, t, s, c)) / (2 * h);
    const double err = std::hypot(g.x - gx, g.y - gy) / std::max(std::hypot(g.x, g.y), 1e-3);
    EXPECT_LE(err, 1e-6) << "t=" << t << " c=" << c;
  }
}

TEST(Score, JacobiansMatchFiniteDifferences) {
  const auto mix = ConditionalMixture::rings();
  const auto s = default_schedule();
  Rng rng(6);
  const double h = 1e-6;
  for (int i = 0; i < 50; ++i) {
    const int t = rng.uniform_int(20, 979);
    const ClassId c = rng.uniform_int(-1, 3);
    const Vec2 x{3.0 * rng.normal(), 3.0 * rng.normal()};
    const Mat2 js = mix.score_jacobian(x, t, s, c);
    const Mat2 jm = mix.posterior_mean_jacobian(x, t, s, c);
    for (int col = 0; col < 2; ++col) {
      const Vec2 e = col == 0 ? Vec2{h, 0} : Vec2{0, h};
      const Vec2 ds = (1.0 / (2 * h)) * (mix.score(x + e, t, s, c) - mix.score(x - e, t, s, c));
      const Vec2 dm = (1.0 / (2 * h)) *
                      (mix.posterior_mean(x + e, t, s, c) - mix.posterior_mean(x - e, t, s, c));
      const double scale_s = 1.0 + std::abs(js[col]) + std::abs(js[2 + col]);
      const double scale_m = 1.0 + std::abs(jm[col]) + std::abs(jm[2 + col]);
      EXPECT_NEAR(js[col], ds.x, 1e-5 * scale_s);
      EXPECT_NEAR(js[2 + col], ds.y, 1e-5 * scale_s);
      EXPECT_NEAR(jm[col], dm.x, 1e-5 * scale_m);
      EXPECT_NEAR(jm[2 + col], dm.y, 1e-5 * scale_m);
    }
  }
}

TEST(PosteriorMean, DegenerateComponentReturnsItsMean) {
  const auto mix = ConditionalMixture::single_gaussian({0.7, -1.1}, Sym2::identity(1e-8));
  const auto s = default_schedule();
  for (int t : {50, 500, 950}) {
    for (Vec2 x : {Vec2{0, 0}, Vec2{3, -2}}) {
      const Vec2 m = mix.posterior_mean(x, t, s, 0);
      EXPECT_NEAR(m.x, 0.7, 1e-6);
      EXPECT_NEAR(m.y, -1.1, 1e-6);
    }
  }
}

TEST(PosteriorMean, StandardNormalPriorShrinksByA) {
  const auto mix = ConditionalMixture::single_gaussian({0, 0}, Sym2::identity());
  const auto s = default_schedule();
  for (int t : {1, 250, 999}) {
    const Vec2 x{1.3, -0.4};
    const Vec2 m = mix.posterior_mean(x, t, s, 0);
    EXPECT_NEAR(m.x, s.a(t) * x.x, 1e-12);
    EXPECT_NEAR(m.y, s.a(t) * x.y, 1e-12);
  }
}

TEST(PosteriorMean, MatchesQuadrature) {
  const auto mix = ConditionalMixture::rings();
  const auto s = default_schedule();
  const double step = 0.01;
  for (const auto& [t, c, x] : {std::tuple{500, 0, Vec2{0.5, 0.5}}, std::tuple{300, kNullClass, Vec2{-1.0, 2.0}},
                                std::tuple{800, 2, Vec2{0.1, -0.3}}}) {
    const double a = s.a(t);
    const double var = s.sigma(t) * s.sigma(t);
    double z = 0.0;
    Vec2 acc{0, 0};
    for (double u = -7.0; u <= 7.0; u += step) {
      for (double v = -7.0; v <= 7.0; v += step) {
        const double prior = std::exp(mix.clean_log_density({u, v}, c));
        const double dx = x.x - a * u;
        const double dy = x.y - a * v;
        const double w = prior * std::exp(-0.5 * (dx * dx + dy * dy) / var);
        z += w;
        acc = acc + w * Vec2{u, v};
      }
    }
    const Vec2 m = mix.posterior_mean(x, t, s, c);
    EXPECT_NEAR(m.x, acc.x / z, 1e-4);
    EXPECT_NEAR(m.y, acc.y / z, 1e-4);
  }
}

TEST(PosteriorMean, TweedieIdentity) {
  const auto mix = ConditionalMixture::rings();
  const auto s = default_schedule();
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const int t = rng.uniform_int(1, 1000);
    const ClassId c = rng.uniform_int(-1, 3);
    const Vec2 x{4.0 * rng.normal(), 4.0 * rng.normal()};
    const Vec2 lhs = s.a(t) * mix.posterior_mean(x, t, s, c) - x;
    const Vec2 rhs = (s.sigma(t) * s.sigma(t)) * mix.score(x, t, s, c);
    EXPECT_NEAR(lhs.x, rhs.x, 1e-10);
    EXPECT_NEAR(lhs.y, rhs.y, 1e-10);
  }
}

TEST(ClassPosterior, OneHotAtSeparatedMeans) {
  const auto mix = ConditionalMixture::rings();
  for (int c = 0; c < 4; ++c) {
    for (const auto& comp : mix.components(c)) {
      EXPECT_GE(mix.class_posterior(comp.mean)[static_cast<std::size_t>(c)], 0.999);
    }
  }
}

TEST(ClassPosterior, SymmetryAxisIsEven) {
  const ConditionalMixture mix({{Component{1.0, {-1, 0}, Sym2::identity(0.5)}},
                                {Component{1.0, {1, 0}, Sym2::identity(0.5)}}});
  for (double y : {-2.0, 0.0, 3.0}) {
    const auto p = mix.class_posterior({0.0, y});
    EXPECT_NEAR(p[0], 0.5, 1e-15);
    EXPECT_NEAR(p[1], 0.5, 1e-15);
  }
}

TEST(ClassPosterior, MatchesDirectDensityRatio) {
  const auto mix = ConditionalMixture::rings();
  const Vec2 x{1.1, 1.7};
  std::vector<double> dens(4);
  double total = 0.0;
  for (int c = 0; c < 4; ++c) {
    double d = 0.0;
    for (const auto& k : mix.components(c)) {
      const Vec2 r = x - k.mean;
      d += k.weight * std::exp(-0.5 * r.dot(r) / k.cov.xx) / (2 * std::numbers::pi * k.cov.xx);
    }
    dens[static_cast<std::size_t>(c)] = 0.25 * d;
    total += 0.25 * d;
  }
  const auto p = mix.class_posterior(x);
  double sum = 0.0;
  for (int c = 0; c < 4; ++c) {
    EXPECT_NEAR(p[static_cast<std::size_t>(c)], dens[static_cast<std::size_t>(c)] / total, 1e-12);
    sum += p[static_cast<std::size_t>(c)];
  }
  EXPECT_NEAR(sum, 1.0, 1e-15);
}

}  // namespace
}  // namespace sidlab
