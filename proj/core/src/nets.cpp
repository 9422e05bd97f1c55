#include "sidlab/nets.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sidlab {
namespace {

// Highest angular frequency of the sinusoidal time features.
constexpr double kTimeMaxFrequency = 8.0;

constexpr std::size_t kPredictChunk = 4096;

tg::Tensor gaussian_init(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  tg::Tensor w(tg::Shape{rows, cols});
  for (double& v : w.storage()) v = stddev * rng.normal();
  return w;
}

// Per-row coefficient columns broadcast over the data dimension.
tg::Tensor row_coefficients(std::span<const double> per_row, std::size_t cols) {
  tg::Tensor out(tg::Shape{per_row.size(), cols});
  for (std::size_t r = 0; r < per_row.size(); ++r) {
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = per_row[r];
  }
  return out;
}

void check_rows(const tg::Tensor& x, std::span<const int> t, std::span<const ClassId> c) {
  if (x.rank() != 2) {
    throw tg::DimensionError("network input must be [rows x dim], got " +
                             tg::shape_string(x.shape()));
  }
  if (t.size() != x.rows() || c.size() != x.rows()) {
    throw tg::DimensionError("network input needs one time index and one condition per row");
  }
}

}  // namespace

// ------------------------------------------------------------ NetworkSpec ----

void NetworkSpec::validate() const {
  if (data_dim < 1) throw std::invalid_argument("network data_dim must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("network num_classes must be >= 1");
  if (hidden.empty()) throw std::invalid_argument("network needs at least one hidden layer");
  if (std::any_of(hidden.begin(), hidden.end(), [](int h) { return h < 1; })) {
    throw std::invalid_argument("network hidden widths must be >= 1");
  }
  if (time_embed_dim < 4 || time_embed_dim % 2 != 0) {
    throw std::invalid_argument("network time_embed_dim must be an even number >= 4");
  }
  if (!(sigma_data > 0.0)) throw std::invalid_argument("network sigma_data must be > 0");
}

nlohmann::json NetworkSpec::to_json() const {
  return {{"data_dim", data_dim},         {"num_classes", num_classes},
          {"hidden", hidden},             {"time_embed_dim", time_embed_dim},
          {"sigma_data", sigma_data}};
}

NetworkSpec NetworkSpec::from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.data_dim = j.at("data_dim").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.hidden = j.at("hidden").get<std::vector<int>>();
  s.time_embed_dim = j.at("time_embed_dim").get<int>();
  s.sigma_data = j.at("sigma_data").get<double>();
  s.validate();
  return s;
}

// --------------------------------------------------------------- Denoiser ----

tg::Tensor Denoiser::predict(const tg::Tensor& x_t, std::span<const int> t,
                             std::span<const ClassId> c) {
  check_rows(x_t, t, c);
  const std::size_t rows = x_t.rows();
  const std::size_t d = x_t.cols();
  tg::Tensor out(x_t.shape());
  for (std::size_t begin = 0; begin < rows; begin += kPredictChunk) {
    const std::size_t n = std::min(kPredictChunk, rows - begin);
    std::vector<double> chunk(x_t.data().begin() + static_cast<std::ptrdiff_t>(begin * d),
                              x_t.data().begin() + static_cast<std::ptrdiff_t>((begin + n) * d));
    tg::Tape tape;
    const tg::Var x = tape.constant(tg::Tensor(tg::Shape{n, d}, std::move(chunk)));
    const tg::Var y = predict_x0(tape, x, t.subspan(begin, n), c.subspan(begin, n),
                                 tg::ParamGrad::kFreeze);
    std::copy(y.value().data().begin(), y.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(begin * d));
  }
  return out;
}

// --------------------------------------------------------------- ScoreNet ----

ScoreNet::ScoreNet(NetworkSpec spec, DiffusionSchedule sched, std::uint64_t seed)
    : spec_(std::move(spec)), sched_(std::move(sched)) {
  spec_.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(spec_.data_dim);
  const auto h0 = static_cast<std::size_t>(spec_.hidden.front());
  const auto te = static_cast<std::size_t>(spec_.time_embed_dim);
  const auto classes = static_cast<std::size_t>(spec_.num_classes);

  params_.emplace_back("in.weight", gaussian_init(d, h0, 1.0 / std::sqrt(double(d)), rng));
  params_.emplace_back("time.weight", gaussian_init(te, h0, 1.0 / std::sqrt(double(te)), rng));
  // C learned rows plus the null row at index C.
  params_.emplace_back("cond.embedding", gaussian_init(classes + 1, h0, 1.0, rng));
  params_.emplace_back("in.bias", tg::Tensor(tg::Shape{1, h0}));
  for (std::size_t l = 1; l < spec_.hidden.size(); ++l) {
    const auto in = static_cast<std::size_t>(spec_.hidden[l - 1]);
    const auto out = static_cast<std::size_t>(spec_.hidden[l]);
    const std::string name = "hidden" + std::to_string(l);
    params_.emplace_back(name + ".weight", gaussian_init(in, out, 1.0 / std::sqrt(double(in)), rng));
    params_.emplace_back(name + ".bias", tg::Tensor(tg::Shape{1, out}));
  }
  const auto last = static_cast<std::size_t>(spec_.hidden.back());
  params_.emplace_back("out.weight", gaussian_init(last, d, 0.1 / std::sqrt(double(last)), rng));
  params_.emplace_back("out.bias", tg::Tensor(tg::Shape{1, d}));
}

std::size_t ScoreNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ScoreNet::copy_parameters_from(const ScoreNet& other) {
  if (!(other.spec_ == spec_)) {
    throw std::invalid_argument("copy_parameters_from: architecture mismatch");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = other.params_[i].value;
}

void ScoreNet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

tg::Tensor ScoreNet::time_features(std::span<const int> t) const {
  const auto te = static_cast<std::size_t>(spec_.time_embed_dim);
  const std::size_t half = te / 2;
  tg::Tensor out(tg::Shape{t.size(), te});
  for (std::size_t r = 0; r < t.size(); ++r) {
    sched_.check_t(t[r]);
    // Position is the noise variance σ_t², a monotone map of t/T that
    // flattens where the signal is gone.
    const double pos = sched_.sigma(t[r]) * sched_.sigma(t[r]);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq =
          std::exp(std::log(kTimeMaxFrequency) * static_cast<double>(i) / static_cast<double>(half - 1));
      out[r * te + i] = std::sin(pos * freq);
      out[r * te + half + i] = std::cos(pos * freq);
    }
  }
  return out;
}

tg::Tensor ScoreNet::condition_onehot(std::span<const ClassId> c) const {
  const auto width = static_cast<std::size_t>(spec_.num_classes + 1);
  tg::Tensor out(tg::Shape{c.size(), width});
  for (std::size_t r = 0; r < c.size(); ++r) {
    const ClassId id = c[r];
    if (id != kNullClass && (id < 0 || id >= spec_.num_classes)) {
      throw std::invalid_argument("unknown class id " + std::to_string(id));
    }
    const std::size_t col = id == kNullClass ? width - 1 : static_cast<std::size_t>(id);
    out[r * width + col] = 1.0;
  }
  return out;
}

std::vector<tg::Var> ScoreNet::trunk(tg::Tape& tape, const tg::Var& x_t, std::span<const int> t,
                                     std::span<const ClassId> c, tg::ParamGrad grad,
                                     std::size_t last_layer) {
  check_rows(x_t.value(), t, c);
  if (x_t.value().cols() != static_cast<std::size_t>(spec_.data_dim)) {
    throw tg::DimensionError("network input width does not match data_dim");
  }
  const std::size_t rows = x_t.value().rows();
  const double sd2 = spec_.sigma_data * spec_.sigma_data;
  std::vector<double> c_in(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double a = sched_.a(t[r]);
    const double s = sched_.sigma(t[r]);
    // c_skip/σ_data: unit scale for clean inputs, fading as x_t stops
    // carrying information about x0.
    c_in[r] = a * spec_.sigma_data / (a * a * sd2 + s * s);
  }
  const tg::Var ones = tape.constant(tg::Tensor(tg::Shape{rows, 1}, 1.0));
  const tg::Var scaled =
      tg::mul(x_t, tape.constant(row_coefficients(c_in, x_t.value().cols())));

  std::vector<tg::Var> acts;
  std::size_t p = 0;
  tg::Var pre = tg::matmul(scaled, tape.param(params_[p++], grad));
  pre = tg::add(pre, tg::matmul(tape.constant(time_features(t)), tape.param(params_[p++], grad)));
  pre = tg::add(pre, tg::matmul(tape.constant(condition_onehot(c)), tape.param(params_[p++], grad)));
  pre = tg::add(pre, tg::matmul(ones, tape.param(params_[p++], grad)));
  acts.push_back(tg::silu(pre));
  for (std::size_t l = 1; l <= last_layer; ++l) {
    tg::Var h = tg::matmul(acts.back(), tape.param(params_[p++], grad));
    h = tg::add(h, tg::matmul(ones, tape.param(params_[p++], grad)));
    acts.push_back(tg::silu(h));
  }
  return acts;
}

tg::Var ScoreNet::encode(tg::Tape& tape, const tg::Var& x_t, std::span<const int> t,
                         std::span<const ClassId> c, tg::ParamGrad grad) {
  return trunk(tape, x_t, t, c, grad, encoder_layer()).back();
}

tg::Var ScoreNet::predict_x0(tg::Tape& tape, const tg::Var& x_t, std::span<const int> t,
                             std::span<const ClassId> c, tg::ParamGrad grad) {
  count_forward();
  const std::size_t layers = spec_.hidden.size();
  const auto acts = trunk(tape, x_t, t, c, grad, layers - 1);
  const std::size_t rows = x_t.value().rows();
  const std::size_t d = x_t.value().cols();

  const tg::Var ones = tape.constant(tg::Tensor(tg::Shape{rows, 1}, 1.0));
  tg::Parameter& w_out = params_[params_.size() - 2];
  tg::Parameter& b_out = params_.back();
  tg::Var raw = tg::matmul(acts.back(), tape.param(w_out, grad));
  raw = tg::add(raw, tg::matmul(ones, tape.param(b_out, grad)));

  // x0 = c_skip·x_t + c_out·F, the variance-preserving form of the usual
  // input/skip/output preconditioning around the data scale sigma_data.
  const double sd2 = spec_.sigma_data * spec_.sigma_data;
  std::vector<double> c_skip(rows);
  std::vector<double> c_out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double a = sched_.a(t[r]);
    const double s = sched_.sigma(t[r]);
    const double denom = a * a * sd2 + s * s;
    c_skip[r] = a * sd2 / denom;
    c_out[r] = spec_.sigma_data * s / std::sqrt(denom);
  }
  return tg::add(tg::mul(x_t, tape.constant(row_coefficients(c_skip, d))),
                 tg::mul(raw, tape.constant(row_coefficients(c_out, d))));
}

// ------------------------------------------------------------ conversions ----

tg::Var x0_to_eps(const tg::Var& x0_pred, const tg::Var& x_t, std::span<const int> t,
                  const DiffusionSchedule& sched) {
  const tg::Tensor& xv = x_t.value();
  if (x0_pred.value().shape() != xv.shape()) {
    throw tg::DimensionError("x0_to_eps: shape mismatch");
  }
  const std::size_t d = xv.cols();
  std::vector<double> inv_sigma(t.size());
  std::vector<double> a_over_sigma(t.size());
  for (std::size_t r = 0; r < t.size(); ++r) {
    inv_sigma[r] = 1.0 / sched.sigma(t[r]);
    a_over_sigma[r] = sched.a(t[r]) / sched.sigma(t[r]);
  }
  tg::Tape& tape = x_t.tape();
  return tg::sub(tg::mul(x_t, tape.constant(row_coefficients(inv_sigma, d))),
                 tg::mul(x0_pred, tape.constant(row_coefficients(a_over_sigma, d))));
}

tg::Tensor x0_to_eps(const tg::Tensor& x0_pred, const tg::Tensor& x_t, std::span<const int> t,
                     const DiffusionSchedule& sched) {
  if (x0_pred.shape() != x_t.shape() || t.size() != x_t.rows()) {
    throw tg::DimensionError("x0_to_eps: shape mismatch");
  }
  const std::size_t d = x_t.cols();
  tg::Tensor eps(x_t.shape());
  for (std::size_t r = 0; r < t.size(); ++r) {
    const double a = sched.a(t[r]);
    const double s = sched.sigma(t[r]);
    for (std::size_t j = 0; j < d; ++j) {
      eps[r * d + j] = (x_t[r * d + j] - a * x0_pred[r * d + j]) / s;
    }
  }
  return eps;
}

tg::Tensor x0_to_score(const tg::Tensor& x0_pred, const tg::Tensor& x_t,
                       std::span<const int> t, const DiffusionSchedule& sched) {
  tg::Tensor score = x0_to_eps(x0_pred, x_t, t, sched);
  const std::size_t d = x_t.cols();
  for (std::size_t r = 0; r < t.size(); ++r) {
    const double s = sched.sigma(t[r]);
    for (std::size_t j = 0; j < d; ++j) score[r * d + j] = -score[r * d + j] / s;
  }
  return score;
}

tg::Tensor eps_to_x0(const tg::Tensor& eps, const tg::Tensor& x_t, std::span<const int> t,
                     const DiffusionSchedule& sched) {
  if (eps.shape() != x_t.shape() || t.size() != x_t.rows()) {
    throw tg::DimensionError("eps_to_x0: shape mismatch");
  }
  const std::size_t d = x_t.cols();
  tg::Tensor x0(x_t.shape());
  for (std::size_t r = 0; r < t.size(); ++r) {
    const double a = sched.a(t[r]);
    const double s = sched.sigma(t[r]);
    for (std::size_t j = 0; j < d; ++j) {
      x0[r * d + j] = (x_t[r * d + j] - s * eps[r * d + j]) / a;
    }
  }
  return x0;
}

// -------------------------------------------------------------- guidance ----

GuidedEvaluator::GuidedEvaluator(Denoiser& net, tg::Tape& tape, tg::Var x_t,
                                 std::span<const int> t, std::span<const ClassId> c,
                                 tg::ParamGrad grad)
    : net_(net), tape_(tape), x_t_(x_t), t_(t), c_(c.begin(), c.end()), grad_(grad) {}

const tg::Var& GuidedEvaluator::conditional() {
  if (!cond_.valid()) cond_ = net_.predict_x0(tape_, x_t_, t_, c_, grad_);
  return cond_;
}

const tg::Var& GuidedEvaluator::unconditional() {
  if (!uncond_.valid()) {
    const std::vector<ClassId> nulls(c_.size(), kNullClass);
    uncond_ = net_.predict_x0(tape_, x_t_, t_, nulls, grad_);
  }
  return uncond_;
}

tg::Var GuidedEvaluator::at(double kappa) {
  if (!std::isfinite(kappa)) throw std::invalid_argument("guidance scale must be finite");
  if (kappa == 1.0) return conditional();
  if (kappa == 0.0) return unconditional();
  const tg::Var& u = unconditional();
  return tg::add(u, tg::scale(tg::sub(conditional(), u), kappa));
}

tg::Var apply_cfg(Denoiser& net, tg::Tape& tape, const tg::Var& x_t, std::span<const int> t,
                  std::span<const ClassId> c, double kappa, tg::ParamGrad grad) {
  return GuidedEvaluator(net, tape, x_t, t, c, grad).at(kappa);
}

// ---------------------------------------------------------- discriminator ----

DiscriminatorHead::DiscriminatorHead() {
  params_.emplace_back("head.weight", tg::Tensor(tg::Shape{1, 1}));
  params_.emplace_back("head.bias", tg::Tensor(tg::Shape{1, 1}));
}

tg::Var DiscriminatorHead::logits(tg::Tape& tape, ScoreNet& encoder_net, const tg::Var& x_t,
                                  std::span<const int> t, std::span<const ClassId> c,
                                  tg::ParamGrad head_grad, tg::ParamGrad encoder_grad) {
  const tg::Var h = encoder_net.encode(tape, x_t, t, c, encoder_grad);
  const std::size_t rows = h.value().rows();
  const std::size_t width = h.value().cols();
  // Mean over features: the channel pooling that yields a 1×1 map per input.
  const tg::Var pooled = tg::matmul(
      h, tape.constant(tg::Tensor(tg::Shape{width, 1}, 1.0 / static_cast<double>(width))));
  const tg::Var ones = tape.constant(tg::Tensor(tg::Shape{rows, 1}, 1.0));
  return tg::add(tg::matmul(pooled, tape.param(params_[0], head_grad)),
                 tg::matmul(ones, tape.param(params_[1], head_grad)));
}

tg::Var DiscriminatorHead::discriminate(tg::Tape& tape, ScoreNet& encoder_net,
                                        const tg::Var& x_t, std::span<const int> t,
                                        std::span<const ClassId> c, tg::ParamGrad head_grad,
                                        tg::ParamGrad encoder_grad) {
  return tg::sigmoid(logits(tape, encoder_net, x_t, t, c, head_grad, encoder_grad));
}

// -------------------------------------------------------------------- EMA ----

EmaState::EmaState(double half_life_images, const std::vector<tg::Parameter>& live)
    : half_life_(half_life_images) {
  if (!(half_life_images >= 0.0)) throw EmaError("EMA half-life must be >= 0");
  for (const auto& p : live) shadow_.push_back(p.value);
}

void EmaState::update(const std::vector<tg::Parameter>& live, long long images_this_batch) {
  if (images_this_batch < 0) throw EmaError("EMA update with negative image count");
  if (live.size() != shadow_.size()) throw EmaError("EMA shadow does not match live parameters");
  images_seen_ += images_this_batch;
  if (half_life_ == 0.0) {
    for (std::size_t i = 0; i < live.size(); ++i) shadow_[i] = live[i].value;
    return;
  }
  const double decay =
      std::pow(0.5, static_cast<double>(images_this_batch) / half_life_);
  for (std::size_t i = 0; i < live.size(); ++i) {
    tg::Tensor& s = shadow_[i];
    const tg::Tensor& v = live[i].value;
    if (s.shape() != v.shape()) throw EmaError("EMA shadow shape mismatch for " + live[i].name);
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = decay * s[j] + (1.0 - decay) * v[j];
  }
}

}  // namespace sidlab
