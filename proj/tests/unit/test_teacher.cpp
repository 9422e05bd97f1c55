#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "sidlab/teacher.hpp"
#include "test_support.hpp"

namespace sidlab {
namespace {

using tg::Tape;
using tg::Tensor;

DiffusionSchedule default_schedule() { return DiffusionSchedule::linear(1000, 1e-4, 0.02); }

ConditionalMixture gaussian_target() {
  return ConditionalMixture::single_gaussian({1.0, -0.5}, {0.5, 0.1, 0.3});
}

NetworkSpec gaussian_spec() {
  NetworkSpec s;
  s.num_classes = 1;
  s.hidden = {64, 64, 64};
  s.time_embed_dim = 32;
  return s;
}

TeacherConfig gaussian_config(long long pairs) {
  TeacherConfig cfg;
  cfg.train_pairs = pairs;
  cfg.learning_rate = 3e-3;
  cfg.log_every_pairs = 25'600;
  return cfg;
}

// 21×21 grid over ±2 marginal standard deviations of x_t around a_t·μ.
Tensor support_grid(const ConditionalMixture& mix, int t, const DiffusionSchedule& sched) {
  const Component comp = mix.components(0).front();
  const double a = sched.a(t);
  const double s2 = sched.sigma(t) * sched.sigma(t);
  const double sx = std::sqrt(a * a * comp.cov.xx + s2);
  const double sy = std::sqrt(a * a * comp.cov.yy + s2);
  Tensor x(tg::Shape{441, 2});
  for (int i = 0; i < 21; ++i) {
    for (int j = 0; j < 21; ++j) {
      const std::size_t r = static_cast<std::size_t>(i * 21 + j);
      x.at(r, 0) = a * comp.mean.x + 2.0 * sx * (i - 10) / 10.0;
      x.at(r, 1) = a * comp.mean.y + 2.0 * sy * (j - 10) / 10.0;
    }
  }
  return x;
}

double posterior_mean_rmse(ScoreNet& net, const ConditionalMixture& mix, int t,
                           const DiffusionSchedule& sched) {
  const Tensor x = support_grid(mix, t, sched);
  const std::vector<int> ts(441, t);
  const std::vector<ClassId> cs(441, 0);
  const Tensor p = net.predict(x, ts, cs);
  double se = 0.0;
  for (std::size_t r = 0; r < 441; ++r) {
    const Vec2 m = mix.posterior_mean({x.at(r, 0), x.at(r, 1)}, t, sched, 0);
    se += (p.at(r, 0) - m.x) * (p.at(r, 0) - m.x) + (p.at(r, 1) - m.y) * (p.at(r, 1) - m.y);
  }
  return std::sqrt(se / 441.0);
}

double score_rmse(ScoreNet& net, const ConditionalMixture& mix, const DiffusionSchedule& sched) {
  double se = 0.0;
  std::size_t n = 0;
  for (int t : {100, 500, 900}) {
    const Tensor x = support_grid(mix, t, sched);
    const std::vector<int> ts(441, t);
    const std::vector<ClassId> cs(441, 0);
    const Tensor score = x0_to_score(net.predict(x, ts, cs), x, ts, sched);
    for (std::size_t r = 0; r < 441; ++r) {
      const Vec2 s = mix.score({x.at(r, 0), x.at(r, 1)}, t, sched, 0);
      se += (score.at(r, 0) - s.x) * (score.at(r, 0) - s.x) +
            (score.at(r, 1) - s.y) * (score.at(r, 1) - s.y);
      ++n;
    }
  }
  return std::sqrt(se / static_cast<double>(n));
}

TEST(TeacherConfig, Validation) {
  TeacherConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.cond_dropout = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = TeacherConfig{};
  cfg.train_pairs = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = TeacherConfig{};
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(TrainTeacher, ZeroPairsReturnsInitialization) {
  const auto sched = default_schedule();
  TeacherConfig cfg = gaussian_config(0);
  cfg.seed = 5;
  const auto result = train_teacher(cfg, gaussian_target(), sched, gaussian_spec());
  const ScoreNet fresh(gaussian_spec(), sched, 5);
  ASSERT_EQ(result.net.parameters().size(), fresh.parameters().size());
  for (std::size_t i = 0; i < fresh.parameters().size(); ++i) {
    EXPECT_EQ(result.net.parameters()[i].value, fresh.parameters()[i].value);
  }
  EXPECT_TRUE(result.loss_trajectory.empty());
}

TEST(TrainTeacher, RejectsMismatchedNetwork) {
  NetworkSpec spec = gaussian_spec();
  spec.num_classes = 4;
  EXPECT_THROW(train_teacher(gaussian_config(1000), gaussian_target(), default_schedule(), spec),
               std::invalid_argument);
}

TEST(TrainTeacher, DeterministicForSeed) {
  const auto sched = default_schedule();
  NetworkSpec spec = gaussian_spec();
  spec.hidden = {16, 16};
  spec.num_classes = 4;
  TeacherConfig cfg = gaussian_config(5'000);
  cfg.batch_size = 64;
  cfg.log_every_pairs = 1'000;
  const auto a = train_teacher(cfg, ConditionalMixture::rings(), sched, spec);
  const auto b = train_teacher(cfg, ConditionalMixture::rings(), sched, spec);
  EXPECT_EQ(a.loss_trajectory, b.loss_trajectory);
  EXPECT_EQ(a.pairs_seen, b.pairs_seen);
  for (std::size_t i = 0; i < a.net.parameters().size(); ++i) {
    EXPECT_EQ(a.net.parameters()[i].value, b.net.parameters()[i].value);
  }
}

TEST(TrainTeacher, ConvergesToPosteriorMeanOnSingleGaussian) {
  const auto sched = default_schedule();
  const auto mix = gaussian_target();
  auto result = train_teacher(gaussian_config(400'000), mix, sched, gaussian_spec());
  ASSERT_FALSE(result.loss_trajectory.empty());
  EXPECT_LT(result.loss_trajectory.back(), result.loss_trajectory.front());
  for (int t : {100, 500, 900}) {
    EXPECT_LE(posterior_mean_rmse(result.net, mix, t, sched), 0.05) << "t=" << t;
  }
}

TEST(TrainTeacher, ScoreErrorShrinksWithTraining) {
  const auto sched = default_schedule();
  const auto mix = gaussian_target();
  TeacherConfig cfg = gaussian_config(0);
  ScoreNet net(gaussian_spec(), sched, cfg.seed);
  std::vector<double> errors{score_rmse(net, mix, sched)};
  for (long long pairs : {20'000LL, 100'000LL, 300'000LL}) {
    cfg.train_pairs = pairs;
    ++cfg.seed;
    net = train_teacher(cfg, mix, sched, std::move(net)).net;
    errors.push_back(score_rmse(net, mix, sched));
  }
  for (std::size_t i = 1; i < errors.size(); ++i) {
    EXPECT_LT(errors[i], errors[i - 1]) << "checkpoint " << i;
  }
}

TEST(OracleTeacher, AnswersExactPosteriorMeans) {
  const auto sched = default_schedule();
  const auto mix = ConditionalMixture::rings();
  OracleTeacher oracle(mix, sched);
  Rng rng(3);
  const Tensor x = testing::random_tensor({40, 2}, rng, 3.0);
  std::vector<int> ts;
  std::vector<ClassId> cs;
  for (int i = 0; i < 40; ++i) {
    ts.push_back(rng.uniform_int(1, 1000));
    cs.push_back(rng.uniform_int(-1, 3));
  }
  Tape tape;
  const Tensor out = oracle.predict_x0(tape, tape.constant(x), ts, cs).value();
  for (std::size_t r = 0; r < 40; ++r) {
    const Vec2 m = mix.posterior_mean({x.at(r, 0), x.at(r, 1)}, ts[r], sched, cs[r]);
    EXPECT_EQ(out.at(r, 0), m.x);
    EXPECT_EQ(out.at(r, 1), m.y);
  }
}

TEST(OracleTeacher, InputJacobianMatchesClosedForm) {
  const auto sched = default_schedule();
  const auto mix = ConditionalMixture::rings();
  OracleTeacher oracle(mix, sched);
  const Tensor x = Tensor::matrix(1, 2, {0.7, -1.3});
  const std::vector<int> ts{300};
  const std::vector<ClassId> cs{2};
  for (std::size_t k = 0; k < 2; ++k) {
    Tape tape;
    const auto xv = tape.input(x);
    const auto y = oracle.predict_x0(tape, xv, ts, cs);
    Tensor w(tg::Shape{1, 2});
    w[k] = 1.0;
    tape.backward(tg::sum(tg::mul(y, tape.constant(w))));
    const Tensor g = tape.grad(xv);
    const Mat2 j = mix.posterior_mean_jacobian({0.7, -1.3}, 300, sched, 2);
    EXPECT_NEAR(g[0], j[2 * k], 1e-12);
    EXPECT_NEAR(g[1], j[2 * k + 1], 1e-12);
  }
}

TEST(AncestralSample, OracleRecoversGaussianMoments) {
  const auto sched = default_schedule();
  const auto mix = gaussian_target();
  OracleTeacher oracle(mix, sched);
  Rng rng(11);
  const std::vector<ClassId> cs(4000, 0);
  const Tensor x = ancestral_sample(oracle, sched, cs, 1.0, 200, rng);
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t r = 0; r < 4000; ++r) {
    mx += x.at(r, 0);
    my += x.at(r, 1);
  }
  mx /= 4000.0;
  my /= 4000.0;
  double vxx = 0.0;
  double vyy = 0.0;
  double vxy = 0.0;
  for (std::size_t r = 0; r < 4000; ++r) {
    vxx += (x.at(r, 0) - mx) * (x.at(r, 0) - mx);
    vyy += (x.at(r, 1) - my) * (x.at(r, 1) - my);
    vxy += (x.at(r, 0) - mx) * (x.at(r, 1) - my);
  }
  // Five standard errors of the sample moments.
  EXPECT_NEAR(mx, 1.0, 5.0 * std::sqrt(0.5 / 4000));
  EXPECT_NEAR(my, -0.5, 5.0 * std::sqrt(0.3 / 4000));
  EXPECT_NEAR(vxx / 3999, 0.5, 5.0 * 0.5 * std::sqrt(2.0 / 4000) + 0.02);
  EXPECT_NEAR(vyy / 3999, 0.3, 5.0 * 0.3 * std::sqrt(2.0 / 4000) + 0.02);
  EXPECT_NEAR(vxy / 3999, 0.1, 0.03);
}

TEST(AncestralSample, RejectsZeroSteps) {
  const auto sched = default_schedule();
  OracleTeacher oracle(gaussian_target(), sched);
  Rng rng(1);
  const std::vector<ClassId> cs(2, 0);
  EXPECT_THROW(ancestral_sample(oracle, sched, cs, 1.0, 0, rng), std::invalid_argument);
}

}  // namespace
}  // namespace sidlab
