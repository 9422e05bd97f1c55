#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "sidlab/metrics.hpp"
#include "test_support.hpp"

namespace sidlab {
namespace {

using tg::Tensor;

DiffusionSchedule default_schedule() { return DiffusionSchedule::linear(1000, 1e-4, 0.02); }

struct Moments {
  double mx = 0.0, my = 0.0, xx = 0.0, xy = 0.0, yy = 0.0;
};

Moments sample_moments(const Tensor& s) {
  Moments m;
  const double n = static_cast<double>(s.rows());
  for (std::size_t r = 0; r < s.rows(); ++r) {
    m.mx += s.at(r, 0) / n;
    m.my += s.at(r, 1) / n;
  }
  for (std::size_t r = 0; r < s.rows(); ++r) {
    const double dx = s.at(r, 0) - m.mx;
    const double dy = s.at(r, 1) - m.my;
    m.xx += dx * dx / (n - 1);
    m.xy += dx * dy / (n - 1);
    m.yy += dy * dy / (n - 1);
  }
  m.xx += 1e-6;
  m.yy += 1e-6;
  return m;
}

// For 2×2 M with positive eigenvalues, tr√M = √(tr M + 2√det M).
double frechet_closed_form(const Moments& a, const Moments& b) {
  const double m00 = a.xx * b.xx + a.xy * b.xy;
  const double m01 = a.xx * b.xy + a.xy * b.yy;
  const double m10 = a.xy * b.xx + a.yy * b.xy;
  const double m11 = a.xy * b.xy + a.yy * b.yy;
  const double tr = m00 + m11;
  const double det = m00 * m11 - m01 * m10;
  const double cross = std::sqrt(tr + 2.0 * std::sqrt(det));
  const double dm = (a.mx - b.mx) * (a.mx - b.mx) + (a.my - b.my) * (a.my - b.my);
  return dm + a.xx + a.yy + b.xx + b.yy - 2.0 * cross;
}

Tensor correlated_samples(std::size_t n, Vec2 mean, double sx, double sy, double rho, Rng& rng) {
  Tensor out(tg::Shape{n, 2});
  for (std::size_t r = 0; r < n; ++r) {
    const double z1 = rng.normal();
    const double z2 = rng.normal();
    out.at(r, 0) = mean.x + sx * z1;
    out.at(r, 1) = mean.y + sy * (rho * z1 + std::sqrt(1.0 - rho * rho) * z2);
  }
  return out;
}

TEST(Frechet, IdenticalSetsGiveZero) {
  Rng rng(1);
  const Tensor a = testing::random_tensor({500, 2}, rng, 1.7);
  EXPECT_NEAR(frechet_gaussian(a, a), 0.0, 1e-8);
}

TEST(Frechet, UnitCovarianceShiftIsSquaredDistance) {
  // Exact N(0, I) and N(μ, I) moments: the 4 points (±1, ±1) have mean 0 and
  // unbiased covariance (4/3)·I, so scale them to unit covariance.
  const double s = std::sqrt(0.75);
  const Tensor a = Tensor::matrix(4, 2, {s, s, s, -s, -s, s, -s, -s});
  const Vec2 mu{1.5, -2.0};
  Tensor b = a;
  for (std::size_t r = 0; r < 4; ++r) {
    b.at(r, 0) += mu.x;
    b.at(r, 1) += mu.y;
  }
  EXPECT_NEAR(frechet_gaussian(a, b), mu.x * mu.x + mu.y * mu.y, 1e-10);
}

TEST(Frechet, MatchesTwoByTwoClosedForm) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = correlated_samples(300, {rng.normal(), rng.normal()}, 0.3 + rng.uniform(),
                                        0.3 + rng.uniform(), 1.8 * rng.uniform() - 0.9, rng);
    const Tensor b = correlated_samples(200, {rng.normal(), rng.normal()}, 0.3 + rng.uniform(),
                                        0.3 + rng.uniform(), 1.8 * rng.uniform() - 0.9, rng);
    const double oracle = frechet_closed_form(sample_moments(a), sample_moments(b));
    EXPECT_LE(std::abs(frechet_gaussian(a, b) - oracle), 1e-8 * std::max(1.0, oracle));
  }
}

TEST(Frechet, SymmetricAndNonnegative) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = testing::random_tensor({50, 2}, rng, 1.0 + trial);
    const Tensor b = testing::random_tensor({80, 2}, rng, 0.5);
    const double ab = frechet_gaussian(a, b);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, frechet_gaussian(b, a), 1e-10 * std::max(1.0, ab));
  }
}

TEST(Frechet, RejectsTooFewSamples) {
  const Tensor two = Tensor::matrix(2, 2, {0, 0, 1, 1});
  const Tensor three = Tensor::matrix(3, 2, {0, 0, 1, 1, 2, 0});
  EXPECT_THROW(frechet_gaussian(two, three), MetricsError);
  EXPECT_NO_THROW(frechet_gaussian(three, three));
}

TEST(Alignment, SeparatedClassMeansScoreNearOne) {
  const auto mix = ConditionalMixture::rings();
  std::vector<ClassId> c;
  std::vector<double> rows;
  for (ClassId k = 0; k < 4; ++k) {
    for (const auto& comp : mix.components(k)) {
      c.push_back(k);
      rows.push_back(comp.mean.x);
      rows.push_back(comp.mean.y);
    }
  }
  const Tensor x(tg::Shape{c.size(), 2}, std::move(rows));
  EXPECT_GE(alignment_score(x, c, mix), 0.999);
}

TEST(Alignment, ShuffledConditionsScoreAtChance) {
  const auto mix = ConditionalMixture::rings();
  Rng rng(4);
  const std::size_t n = 20000;
  auto c = sample_classes(mix, n, rng);
  const Tensor x = sample_data(mix, c, rng);
  std::vector<ClassId> shuffled(n);
  for (auto& v : shuffled) v = rng.uniform_int(0, 3);
  // Each term lies in [0, 1], so its standard deviation is at most 1/2.
  EXPECT_NEAR(alignment_score(x, shuffled, mix), 0.25, 3.0 * 0.5 / std::sqrt(double(n)));
}

TEST(Alignment, OrderInvariant) {
  const auto mix = ConditionalMixture::rings();
  Rng rng(5);
  auto c = sample_classes(mix, 200, rng);
  const Tensor x = sample_data(mix, c, rng);
  std::vector<std::size_t> perm(200);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = 199; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  Tensor xp(x.shape());
  std::vector<ClassId> cp(200);
  for (std::size_t i = 0; i < 200; ++i) {
    xp.at(i, 0) = x.at(perm[i], 0);
    xp.at(i, 1) = x.at(perm[i], 1);
    cp[i] = c[perm[i]];
  }
  EXPECT_NEAR(alignment_score(x, c, mix), alignment_score(xp, cp, mix), 1e-14);
  EXPECT_THROW(alignment_score(x, std::vector<ClassId>(200, kNullClass), mix), MetricsError);
}

TEST(Fisher, AnalyticScoreGivesZero) {
  const auto sched = default_schedule();
  const auto mix = ConditionalMixture::rings();
  Rng rng(6);
  auto c = sample_classes(mix, 500, rng);
  const Tensor x_g = sample_data(mix, c, rng);
  const ScoreFn exact = [&](const Tensor& x_t, std::span<const int> t,
                            std::span<const ClassId> cc) {
    Tensor s(x_t.shape());
    for (std::size_t r = 0; r < x_t.rows(); ++r) {
      const Vec2 v = mix.score({x_t.at(r, 0), x_t.at(r, 1)}, t[r], sched, cc[r]);
      s.at(r, 0) = v.x;
      s.at(r, 1) = v.y;
    }
    return s;
  };
  const std::vector<int> t_set{100, 400, 700};
  EXPECT_EQ(fisher_estimate(exact, x_g, c, mix, sched, t_set, rng), 0.0);
}

TEST(Fisher, GaussianShiftClosedForm) {
  // Data N(0, I); model N(m, I): both diffuse to variance a² + σ² = 1, so the
  // score offset is the constant a·m.
  const auto sched = default_schedule();
  const auto mix = ConditionalMixture::single_gaussian({0.0, 0.0}, Sym2::identity());
  const Vec2 m{0.8, -0.6};
  Rng rng(7);
  const std::vector<ClassId> c(1000, 0);
  Tensor x_g = testing::random_tensor({1000, 2}, rng);
  for (std::size_t r = 0; r < 1000; ++r) {
    x_g.at(r, 0) += m.x;
    x_g.at(r, 1) += m.y;
  }
  for (int t : {50, 400, 900}) {
    const double a = sched.a(t);
    const ScoreFn model = [&](const Tensor& x_t, std::span<const int>, std::span<const ClassId>) {
      Tensor s(x_t.shape());
      for (std::size_t r = 0; r < x_t.rows(); ++r) {
        s.at(r, 0) = -(x_t.at(r, 0) - a * m.x);
        s.at(r, 1) = -(x_t.at(r, 1) - a * m.y);
      }
      return s;
    };
    const std::vector<int> t_set{t};
    EXPECT_NEAR(fisher_estimate(model, x_g, c, mix, sched, t_set, rng), a * a * 1.0, 1e-12)
        << "t=" << t;
  }
}

TEST(Fisher, EstimateVarianceShrinksWithSampleCount) {
  const auto sched = default_schedule();
  const auto mix = ConditionalMixture::single_gaussian({0.0, 0.0}, Sym2::identity());
  const ScoreFn model = [](const Tensor& x_t, std::span<const int>, std::span<const ClassId>) {
    Tensor s(x_t.shape());
    for (std::size_t i = 0; i < x_t.size(); ++i) s[i] = -0.6 * x_t[i];
    return s;
  };
  const std::vector<int> t_set{400};
  auto variance = [&](std::size_t n) {
    Rng rng(8 + n);
    const std::vector<ClassId> c(n, 0);
    std::vector<double> est;
    for (int rep = 0; rep < 200; ++rep) {
      const Tensor x_g = testing::random_tensor({n, 2}, rng);
      est.push_back(fisher_estimate(model, x_g, c, mix, sched, t_set, rng));
    }
    const double mean = std::accumulate(est.begin(), est.end(), 0.0) / est.size();
    double v = 0.0;
    for (double e : est) v += (e - mean) * (e - mean);
    return v / (est.size() - 1);
  };
  const double ratio = variance(50) / variance(800);
  EXPECT_GT(ratio, 16.0 * 0.6);
  EXPECT_LT(ratio, 16.0 / 0.6);
}

TEST(MetricsReport, ValidationAndJson) {
  MetricsReport r;
  r.frechet_per_class = {0.1, 0.2};
  r.alignment = 0.9;
  EXPECT_NO_THROW(r.validate());
  const auto j = r.to_json();
  EXPECT_EQ(j.at("frechet_per_class").size(), 2u);
  r.alignment = 1.5;
  EXPECT_THROW(r.validate(), MetricsError);
  r.alignment = 0.5;
  r.fisher_estimate = std::nan("");
  EXPECT_THROW(r.validate(), MetricsError);
}

TEST(SampleMetrics, DataAgainstDataIsSmall) {
  const auto mix = ConditionalMixture::rings();
  Rng rng(9);
  auto c = sample_classes(mix, 8000, rng);
  const Tensor a = sample_data(mix, c, rng);
  auto c2 = sample_classes(mix, 8000, rng);
  const Tensor b = sample_data(mix, c2, rng);
  const MetricsReport r = sample_metrics(a, c, b, c2, mix);
  EXPECT_LT(r.frechet_uncond, 0.05);
  ASSERT_EQ(r.frechet_per_class.size(), 4u);
  for (double f : r.frechet_per_class) EXPECT_LT(f, 0.1);
  EXPECT_GT(r.alignment, 0.9);
  EXPECT_EQ(r.num_samples, 8000);
}

}  // namespace
}  // namespace sidlab
