#include "sidlab/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sidlab/optim.hpp"

namespace sidlab {

void TeacherConfig::validate() const {
  if (train_pairs < 0) throw std::invalid_argument("teacher.train_pairs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("teacher.batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("teacher.learning_rate must be > 0");
  if (!(cond_dropout >= 0.0 && cond_dropout < 1.0)) {
    throw std::invalid_argument("teacher.cond_dropout must be in [0, 1)");
  }
  if (log_every_pairs < 1) throw std::invalid_argument("teacher.log_every_pairs must be >= 1");
}

TeacherTrainResult train_teacher(const TeacherConfig& cfg, const ConditionalMixture& mix,
                                 const DiffusionSchedule& sched, const NetworkSpec& spec) {
  return train_teacher(cfg, mix, sched, ScoreNet(spec, sched, cfg.seed));
}

TeacherTrainResult train_teacher(const TeacherConfig& cfg, const ConditionalMixture& mix,
                                 const DiffusionSchedule& sched, ScoreNet init) {
  cfg.validate();
  if (init.spec().num_classes != mix.num_classes() || init.spec().data_dim != 2) {
    throw std::invalid_argument("teacher network does not match the mixture");
  }
  TeacherTrainResult result{std::move(init), {}, {}};
  ScoreNet& net = result.net;
  Rng rng = Rng::derive(cfg.seed, 1);
  auto params = collect_parameters(net.parameters());
  Adam opt(AdamConfig{cfg.learning_rate, 0.0, 0.999, 1e-8}, params);
  net.zero_grad();

  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  std::vector<int> t(batch);
  std::vector<ClassId> c(batch);
  long long seen = 0;
  double window_loss = 0.0;
  long long window_batches = 0;
  long long next_log = cfg.log_every_pairs;

  while (seen < cfg.train_pairs) {
    opt.set_learning_rate(
        scheduled_learning_rate(cfg.lr_schedule, cfg.learning_rate, seen, cfg.train_pairs));
    tg::Tensor x_t(tg::Shape{batch, 2});
    tg::Tensor eps(tg::Shape{batch, 2});
    for (std::size_t r = 0; r < batch; ++r) {
      const auto pair = mix.sample_pair(rng);
      c[r] = rng.uniform() < cfg.cond_dropout ? kNullClass : pair.c;
      t[r] = rng.uniform_int(1, sched.steps());
      eps[2 * r] = rng.normal();
      eps[2 * r + 1] = rng.normal();
      const double a = sched.a(t[r]);
      const double s = sched.sigma(t[r]);
      x_t[2 * r] = a * pair.x0.x + s * eps[2 * r];
      x_t[2 * r + 1] = a * pair.x0.y + s * eps[2 * r + 1];
    }
    tg::Tape tape;
    const tg::Var xv = tape.constant(std::move(x_t));
    const tg::Var x0 = net.predict_x0(tape, xv, t, c, tg::ParamGrad::kTrack);
    const tg::Var eps_pred = x0_to_eps(x0, xv, t, sched);
    const tg::Var loss = tg::scale(tg::sq_norm(tg::sub(eps_pred, tape.constant(std::move(eps)))),
                                   1.0 / static_cast<double>(batch));
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw tg::NumericError("teacher loss is not finite");
    tape.backward(loss);
    opt.step(params);

    seen += static_cast<long long>(batch);
    window_loss += value;
    ++window_batches;
    if (seen >= next_log || seen >= cfg.train_pairs) {
      result.loss_trajectory.push_back(window_loss / static_cast<double>(window_batches));
      result.pairs_seen.push_back(seen);
      window_loss = 0.0;
      window_batches = 0;
      while (next_log <= seen) next_log += cfg.log_every_pairs;
    }
  }
  return result;
}

// ------------------------------------------------------------ oracle ----

OracleTeacher::OracleTeacher(ConditionalMixture mix, DiffusionSchedule sched)
    : mix_(std::move(mix)), sched_(std::move(sched)) {}

tg::Var OracleTeacher::predict_x0(tg::Tape& /*tape*/, const tg::Var& x_t,
                                  std::span<const int> t, std::span<const ClassId> c,
                                  tg::ParamGrad /*grad*/) {
  count_forward();
  const tg::Tensor& xv = x_t.value();
  if (xv.rank() != 2 || xv.cols() != 2 || t.size() != xv.rows() || c.size() != xv.rows()) {
    throw tg::DimensionError("oracle teacher expects [rows x 2] with per-row t and c");
  }
  const std::size_t rows = xv.rows();
  tg::Tensor value(xv.shape());
  std::vector<double> jac(rows * 4);
  for (std::size_t r = 0; r < rows; ++r) {
    const Vec2 x{xv[2 * r], xv[2 * r + 1]};
    const Vec2 m = mix_.posterior_mean(x, t[r], sched_, c[r]);
    value[2 * r] = m.x;
    value[2 * r + 1] = m.y;
    const Mat2 j = mix_.posterior_mean_jacobian(x, t[r], sched_, c[r]);
    std::copy(j.begin(), j.end(), jac.begin() + static_cast<std::ptrdiff_t>(4 * r));
  }
  return tg::row_jacobian(x_t, std::move(value), std::move(jac));
}

// --------------------------------------------------------- sampling ----

tg::Tensor ancestral_sample(Denoiser& model, const DiffusionSchedule& sched,
                            std::span<const ClassId> c, double kappa, int num_steps, Rng& rng) {
  if (num_steps < 1) throw std::invalid_argument("ancestral_sample needs at least one step");
  const int T = sched.steps();
  num_steps = std::min(num_steps, T);
  std::vector<int> times;
  for (int i = 0; i < num_steps; ++i) {
    // Evenly spaced from T down to 1.
    const double frac = num_steps == 1 ? 0.0 : static_cast<double>(i) / (num_steps - 1);
    times.push_back(static_cast<int>(std::lround(T - frac * (T - 1))));
  }
  const std::size_t rows = c.size();
  tg::Tensor x(tg::Shape{rows, 2});
  for (double& v : x.storage()) v = rng.normal();
  tg::Tensor x0(x.shape());
  constexpr std::size_t kChunk = 4096;
  std::vector<int> tv;
  for (std::size_t i = 0; i < times.size(); ++i) {
    const int t = times[i];
    for (std::size_t begin = 0; begin < rows; begin += kChunk) {
      const std::size_t n = std::min(kChunk, rows - begin);
      tv.assign(n, t);
      tg::Tensor xc(tg::Shape{n, 2},
                    std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(2 * begin),
                                        x.data().begin() + static_cast<std::ptrdiff_t>(2 * (begin + n))));
      tg::Tape tape;
      GuidedEvaluator eval(model, tape, tape.constant(std::move(xc)), tv, c.subspan(begin, n));
      const tg::Tensor& pred = eval.at(kappa).value();
      std::copy(pred.data().begin(), pred.data().end(),
                x0.data().begin() + static_cast<std::ptrdiff_t>(2 * begin));
    }
    if (i + 1 == times.size()) break;
    // q(x_s | x_t, x0) for s < t.
    const int s = times[i + 1];
    const double a_t = sched.a(t);
    const double a_s = sched.a(s);
    const double var_t = sched.sigma(t) * sched.sigma(t);
    const double var_s = sched.sigma(s) * sched.sigma(s);
    const double a_ts = a_t / a_s;
    const double var_ts = var_t - a_ts * a_ts * var_s;
    const double coef_x = a_ts * var_s / var_t;
    const double coef_0 = a_s * var_ts / var_t;
    const double std_post = std::sqrt(std::max(var_ts * var_s / var_t, 0.0));
    for (std::size_t j = 0; j < x.size(); ++j) {
      x[j] = coef_x * x[j] + coef_0 * x0[j] + std_post * rng.normal();
    }
  }
  return x0;
}

}  // namespace sidlab
