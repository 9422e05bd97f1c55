#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "sidlab/checkpoint.hpp"
#include "sidlab/nets.hpp"
#include "sidlab/optim.hpp"
#include "test_support.hpp"

namespace sidlab {
namespace {

namespace fs = std::filesystem;
using tg::Tape;
using tg::Tensor;
using tg::Var;

DiffusionSchedule default_schedule() { return DiffusionSchedule::linear(1000, 1e-4, 0.02); }

NetworkSpec small_spec() {
  NetworkSpec s;
  s.num_classes = 3;
  s.hidden = {8, 8, 8};
  s.time_embed_dim = 4;
  return s;
}

fs::path temp_path(const std::string& name) {
  return fs::path(::testing::TempDir()) / ("sidlab_nets_" + name);
}

// Answers f(x, ∅) = [1, 0] and f(x, c) = [3, 2] on every row.
class ConstantDenoiser final : public Denoiser {
 public:
  Var predict_x0(Tape& tape, const Var& x_t, std::span<const int>, std::span<const ClassId> c,
                 tg::ParamGrad) override {
    count_forward();
    Tensor out(x_t.shape());
    for (std::size_t r = 0; r < c.size(); ++r) {
      out.at(r, 0) = c[r] == kNullClass ? 1.0 : 3.0;
      out.at(r, 1) = c[r] == kNullClass ? 0.0 : 2.0;
    }
    return tape.constant(std::move(out));
  }
};

struct Batch {
  Tensor x;
  std::vector<int> t;
  std::vector<ClassId> c;
};

Batch random_batch(std::size_t n, int num_classes, Rng& rng) {
  Batch b{testing::random_tensor({n, 2}, rng, 2.0), {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    b.t.push_back(rng.uniform_int(1, 1000));
    b.c.push_back(rng.uniform_int(-1, num_classes - 1));
  }
  return b;
}

TEST(NetworkSpec, Validation) {
  NetworkSpec s = small_spec();
  EXPECT_NO_THROW(s.validate());
  s.time_embed_dim = 5;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.hidden.clear();
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.sigma_data = 0.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_EQ(NetworkSpec::from_json(small_spec().to_json()), small_spec());
}

TEST(ScoreNet, OutputShapeAndDeterminism) {
  ScoreNet net(small_spec(), default_schedule(), 1);
  Rng rng(1);
  const Batch b = random_batch(17, 3, rng);
  Tape tape;
  const Var y1 = net.predict_x0(tape, tape.constant(b.x), b.t, b.c);
  const Tensor first = y1.value();
  const Var y2 = net.predict_x0(tape, tape.constant(b.x), b.t, b.c);
  EXPECT_EQ(first.shape(), b.x.shape());
  EXPECT_EQ(first, y2.value());
}

TEST(ScoreNet, SameSeedSameWeights) {
  ScoreNet a(small_spec(), default_schedule(), 7);
  ScoreNet b(small_spec(), default_schedule(), 7);
  ScoreNet c(small_spec(), default_schedule(), 8);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
    any_diff = any_diff || !(a.parameters()[i].value == c.parameters()[i].value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(ScoreNet, RejectsBadInputs) {
  ScoreNet net(small_spec(), default_schedule(), 1);
  Tape tape;
  const Var x = tape.constant(Tensor(tg::Shape{2, 2}));
  const std::vector<int> t{5, 5};
  EXPECT_THROW(net.predict_x0(tape, x, t, std::vector<ClassId>{0, 3}), std::invalid_argument);
  EXPECT_THROW(net.predict_x0(tape, x, std::vector<int>{5}, std::vector<ClassId>{0, 0}),
               std::invalid_argument);
  EXPECT_THROW(net.predict_x0(tape, x, std::vector<int>{0, 5}, std::vector<ClassId>{0, 0}),
               std::invalid_argument);
}

TEST(ScoreNet, ParameterGradientsMatchFiniteDifferences) {
  ScoreNet net(small_spec(), default_schedule(), 2);
  Rng rng(2);
  const Batch b = random_batch(6, 3, rng);
  const Tensor target = testing::random_tensor({6, 2}, rng);
  auto params = collect_parameters(net.parameters());
  const auto r = testing::check_parameter_gradients(
      [&](Tape& tape) {
        const Var y = net.predict_x0(tape, tape.constant(b.x), b.t, b.c, tg::ParamGrad::kTrack);
        return tg::sq_norm(tg::sub(y, tape.constant(target)));
      },
      params);
  EXPECT_LE(r.max_relative_error, 1e-5);
}

TEST(ScoreNet, InputGradientsMatchFiniteDifferences) {
  ScoreNet net(small_spec(), default_schedule(), 3);
  Rng rng(3);
  const Batch b = random_batch(5, 3, rng);
  const auto r = testing::check_input_gradients(
      [&](Tape& tape, const std::vector<Var>& v) {
        const Var y = net.predict_x0(tape, v[0], b.t, b.c);
        return tg::sum(tg::mul(y, y));
      },
      {b.x});
  EXPECT_LE(r.max_relative_error, 1e-5);
}

TEST(ScoreNet, CopyParametersRequiresSameSpec) {
  ScoreNet a(small_spec(), default_schedule(), 1);
  ScoreNet b(small_spec(), default_schedule(), 2);
  b.copy_parameters_from(a);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
  }
  NetworkSpec other = small_spec();
  other.hidden = {8, 8};
  ScoreNet c(other, default_schedule(), 1);
  EXPECT_THROW(c.copy_parameters_from(a), std::invalid_argument);
}

TEST(Conversions, EpsilonArithmetic) {
  const auto s = default_schedule();
  for (int t : {10, 400, 900}) {
    Tensor x_t = Tensor::matrix(1, 2, {1.0, -0.5});
    Tensor x0 = Tensor::matrix(1, 2, {1.0, 2.0});
    const std::vector<int> ts{t};
    const Tensor eps = x0_to_eps(x0, x_t, ts, s);
    EXPECT_NEAR(eps[0], (1.0 - s.a(t) * 1.0) / s.sigma(t), 1e-14);
    EXPECT_NEAR(eps[1], (-0.5 - s.a(t) * 2.0) / s.sigma(t), 1e-14);
    const Tensor score = x0_to_score(x0, x_t, ts, s);
    EXPECT_NEAR(score[0], -eps[0] / s.sigma(t), 1e-14);
    Tensor scaled(x_t.shape());
    for (std::size_t i = 0; i < 2; ++i) scaled[i] = x_t[i] / s.a(t);
    const Tensor zero = x0_to_eps(scaled, x_t, ts, s);
    for (double e : zero.data()) EXPECT_NEAR(e, 0.0, 1e-14);
  }
}

TEST(Conversions, RoundTrip) {
  const auto s = default_schedule();
  Rng rng(4);
  const Tensor x0 = testing::random_tensor({50, 2}, rng);
  const Tensor x_t = testing::random_tensor({50, 2}, rng);
  std::vector<int> t(50);
  for (auto& v : t) v = rng.uniform_int(1, 1000);
  const Tensor back = eps_to_x0(x0_to_eps(x0, x_t, t, s), x_t, t, s);
  for (std::size_t i = 0; i < x0.size(); ++i) {
    EXPECT_NEAR(back[i], x0[i], 1e-12 * std::max(1.0, std::abs(x0[i])));
  }
}

TEST(Conversions, EpsilonAndX0LossesAgree) {
  // SNR_t·‖f − x_g‖² = ‖ε(f) − ε‖² when x_t = a_t·x_g + σ_t·ε.
  const auto s = default_schedule();
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int t = rng.uniform_int(1, 1000);
    const Tensor x_g = testing::random_tensor({1, 2}, rng, 2.0);
    const Tensor eps = testing::random_tensor({1, 2}, rng);
    const Tensor f = testing::random_tensor({1, 2}, rng, 2.0);
    const Tensor x_t = diffuse(x_g, t, eps, s);
    const std::vector<int> ts{t};
    const Tensor eps_f = x0_to_eps(f, x_t, ts, s);
    double x0_loss = 0.0;
    double eps_loss = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
      x0_loss += s.snr(t) * (f[i] - x_g[i]) * (f[i] - x_g[i]);
      eps_loss += (eps_f[i] - eps[i]) * (eps_f[i] - eps[i]);
    }
    EXPECT_NEAR(x0_loss, eps_loss, 1e-10 * std::max(1.0, eps_loss));
  }
}

TEST(ApplyCfg, CollapsesWithOneForwardCall) {
  ConstantDenoiser d;
  Tape tape;
  const Var x = tape.constant(Tensor(tg::Shape{2, 2}));
  const std::vector<int> t{5, 5};
  const std::vector<ClassId> c{0, 1};
  d.reset_forward_calls();
  const Var one = apply_cfg(d, tape, x, t, c, 1.0);
  EXPECT_EQ(d.forward_calls(), 1u);
  EXPECT_EQ(one.value(), Tensor::matrix(2, 2, {3, 2, 3, 2}));
  d.reset_forward_calls();
  const Var zero = apply_cfg(d, tape, x, t, c, 0.0);
  EXPECT_EQ(d.forward_calls(), 1u);
  EXPECT_EQ(zero.value(), Tensor::matrix(2, 2, {1, 0, 1, 0}));
}

TEST(ApplyCfg, LinearExtrapolation) {
  ConstantDenoiser d;
  Tape tape;
  const Var x = tape.constant(Tensor(tg::Shape{1, 2}));
  const std::vector<int> t{5};
  const std::vector<ClassId> c{2};
  d.reset_forward_calls();
  EXPECT_EQ(apply_cfg(d, tape, x, t, c, 2.0).value(), Tensor::matrix(1, 2, {5, 4}));
  EXPECT_EQ(d.forward_calls(), 2u);
  // Anti-CFG: 2·f(∅) − f(c).
  EXPECT_EQ(apply_cfg(d, tape, x, t, c, -1.0).value(), Tensor::matrix(1, 2, {-1, -2}));
  EXPECT_THROW(apply_cfg(d, tape, x, t, c, std::nan("")), std::invalid_argument);
}

TEST(GuidedEvaluator, SharesBranchesAcrossScales) {
  ConstantDenoiser d;
  Tape tape;
  const std::vector<int> t{5};
  const std::vector<ClassId> c{0};
  GuidedEvaluator g(d, tape, tape.constant(Tensor(tg::Shape{1, 2})), t, c);
  d.reset_forward_calls();
  g.at(1.5);
  g.at(-1.0);
  g.at(1.0);
  g.at(0.0);
  EXPECT_EQ(d.forward_calls(), 2u);
}

TEST(Discriminator, ZeroInitializedHeadIsOneHalf) {
  ScoreNet net(small_spec(), default_schedule(), 1);
  DiscriminatorHead head;
  Rng rng(6);
  const Batch b = random_batch(20, 3, rng);
  Tape tape;
  const Tensor d = head.discriminate(tape, net, tape.constant(b.x), b.t, b.c).value();
  for (double v : d.data()) {
    EXPECT_EQ(v, 0.5);
  }
}

TEST(Discriminator, OutputIsInOpenUnitInterval) {
  ScoreNet net(small_spec(), default_schedule(), 1);
  DiscriminatorHead head;
  head.parameters()[0].value[0] = 25.0;
  head.parameters()[1].value[0] = -3.0;
  Rng rng(7);
  const Batch b = random_batch(10000, 3, rng);
  Tape tape;
  const Var d = head.discriminate(tape, net, tape.constant(b.x), b.t, b.c);
  ASSERT_EQ(d.value().size(), 10000u);
  for (double v : d.value().data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Discriminator, BceStepReachesEncoder) {
  ScoreNet net(small_spec(), default_schedule(), 2);
  DiscriminatorHead head;
  Rng rng(8);
  const Batch real = random_batch(8, 3, rng);
  const Batch fake = random_batch(8, 3, rng);
  auto bce = [&](Tape& tape) {
    const Var lr = head.logits(tape, net, tape.constant(real.x), real.t, real.c,
                               tg::ParamGrad::kTrack, tg::ParamGrad::kTrack);
    const Var lf = head.logits(tape, net, tape.constant(fake.x), fake.t, fake.c,
                               tg::ParamGrad::kTrack, tg::ParamGrad::kTrack);
    // −½[ln D(real) + ln(1 − D(fake))], ln(1 − σ(z)) = ln σ(−z).
    return tg::scale(tg::add(tg::mean(tg::log_sigmoid(lr)),
                             tg::mean(tg::log_sigmoid(tg::scale(lf, -1.0)))),
                     -0.5);
  };
  auto head_params = collect_parameters(head.parameters());
  auto all = collect_parameters(net.parameters(), head.parameters());
  Adam opt(AdamConfig{1e-2}, head_params);
  {
    Tape tape;
    tape.backward(bce(tape));
  }
  for (auto* p : collect_parameters(net.parameters())) p->zero_grad();
  opt.step(head_params);

  Tape tape;
  tape.backward(bce(tape));
  double encoder_grad = 0.0;
  for (std::size_t i = 0; i <= 2 * net.encoder_layer() + 1; ++i) {
    for (double g : net.parameters()[i].grad.data()) encoder_grad += std::abs(g);
  }
  EXPECT_GT(encoder_grad, 0.0);
  const auto r = testing::check_parameter_gradients(bce, all, 6);
  EXPECT_LE(r.max_relative_error, 1e-5);
}

TEST(Ema, DisabledShadowTracksLive) {
  std::vector<tg::Parameter> live{{"w", Tensor::vector({1, 2, 3})}};
  EmaState ema(0.0, live);
  live[0].value = Tensor::vector({4, 5, 6});
  ema.update(live, 256);
  EXPECT_EQ(ema.shadow()[0], live[0].value);
}

TEST(Ema, BatchOfOneHalfLifeHalves) {
  std::vector<tg::Parameter> live{{"w", Tensor::vector({0.0, 2.0})}};
  EmaState ema(100.0, live);
  live[0].value = Tensor::vector({1.0, 0.0});
  ema.update(live, 100);
  EXPECT_DOUBLE_EQ(ema.shadow()[0][0], 0.5);
  EXPECT_DOUBLE_EQ(ema.shadow()[0][1], 1.0);
  EXPECT_EQ(ema.images_seen(), 100);
}

TEST(Ema, ConvergesGeometricallyToConstantLive) {
  std::vector<tg::Parameter> live{{"w", Tensor::vector({0.0})}};
  EmaState ema(64.0, live);
  live[0].value = Tensor::vector({1.0});
  double gap = 1.0;
  for (int i = 0; i < 20; ++i) {
    ema.update(live, 32);
    const double new_gap = 1.0 - ema.shadow()[0][0];
    EXPECT_NEAR(new_gap / gap, std::pow(0.5, 0.5), 1e-12);
    gap = new_gap;
  }
  EXPECT_THROW(ema.update(live, -1), EmaError);
  EXPECT_THROW(EmaState(-1.0, live), EmaError);
}

TEST(Checkpoint, RoundTripForwardIsBitwiseStable) {
  ScoreNet net(small_spec(), default_schedule(), 9);
  Checkpoint ckpt;
  add_network(ckpt, "teacher", net);
  ckpt.metadata["note"] = "unit";
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(path, ckpt);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.metadata.at("note"), "unit");
  ScoreNet loaded = network_from_checkpoint(back, "teacher");
  Rng rng(9);
  const Batch b = random_batch(32, 3, rng);
  Tape tape;
  const Var y1 = net.predict_x0(tape, tape.constant(b.x), b.t, b.c);
  const Tensor first = y1.value();
  const Var y2 = loaded.predict_x0(tape, tape.constant(b.x), b.t, b.c);
  EXPECT_EQ(first, y2.value());

  // Saving the loaded copy reproduces the file byte for byte.
  const auto again = temp_path("roundtrip2.ckpt");
  save_checkpoint(again, back);
  std::ifstream f1(path, std::ios::binary);
  std::ifstream f2(again, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {});
  const std::string s2((std::istreambuf_iterator<char>(f2)), {});
  EXPECT_EQ(s1, s2);
  EXPECT_EQ(s1.substr(0, 8), "SIDLAB01");
}

TEST(Checkpoint, CorruptedMagicIsVersionError) {
  ScoreNet net(small_spec(), default_schedule(), 1);
  Checkpoint ckpt;
  add_network(ckpt, "net", net);
  const auto path = temp_path("magic.ckpt");
  save_checkpoint(path, ckpt);
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(7);
    f.put('9');
  }
  try {
    load_checkpoint(path);
    FAIL() << "expected a version error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kVersion);
  }
}

TEST(Checkpoint, TruncationIsDetected) {
  ScoreNet net(small_spec(), default_schedule(), 1);
  Checkpoint ckpt;
  add_network(ckpt, "net", net);
  const auto path = temp_path("trunc.ckpt");
  save_checkpoint(path, ckpt);
  const auto full = fs::file_size(path);
  for (auto cut : {full - 3, full - 8 * net.parameters().back().value.size(), std::uintmax_t{20}}) {
    fs::resize_file(path, cut);
    try {
      load_checkpoint(path);
      FAIL() << "expected truncation error at " << cut;
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.kind(), CheckpointError::Kind::kTruncated);
    }
    save_checkpoint(path, ckpt);
  }
}

TEST(Checkpoint, MissingFileAndMissingNetwork) {
  EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.ckpt")), CheckpointError);
  Checkpoint empty;
  try {
    network_from_checkpoint(empty, "generator");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kIncompatible);
  }
}

TEST(Checkpoint, ShapeMismatchOnLoad) {
  ScoreNet a(small_spec(), default_schedule(), 1);
  NetworkSpec wide = small_spec();
  wide.hidden = {16, 16, 16};
  ScoreNet b(wide, default_schedule(), 1);
  Checkpoint ckpt;
  ckpt.add_parameters("net.", a.parameters());
  try {
    ckpt.load_parameters("net.", b.parameters());
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kShape);
  }
}

}  // namespace
}  // namespace sidlab
