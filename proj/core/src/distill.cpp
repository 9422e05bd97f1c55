#include "sidlab/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

namespace sidlab {
namespace {

constexpr std::size_t kSampleChunk = 4096;

tg::Tensor row_coefficients(std::span<const double> per_row, std::size_t cols) {
  tg::Tensor out(tg::Shape{per_row.size(), cols});
  for (std::size_t r = 0; r < per_row.size(); ++r) {
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = per_row[r];
  }
  return out;
}

tg::Tensor normal_tensor(std::size_t rows, std::size_t cols, Rng& rng) {
  tg::Tensor out(tg::Shape{rows, cols});
  for (double& v : out.storage()) v = rng.normal();
  return out;
}

std::vector<ClassId> blind_if(bool blind, std::span<const ClassId> c) {
  if (blind) return std::vector<ClassId>(c.size(), kNullClass);
  return {c.begin(), c.end()};
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw tg::NumericError(std::string(what) + " is not finite");
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// One generator application on the tape: G(a_τ·x_prev + σ_τ·z, τ, c).
tg::Var generator_step(ScoreNet& generator, tg::Tape& tape, const tg::Var* x_prev,
                       const tg::Tensor& z, int tau, std::span<const ClassId> c,
                       const DiffusionSchedule& sched, tg::ParamGrad grad) {
  const std::vector<int> taus(c.size(), tau);
  tg::Var input;
  if (x_prev == nullptr) {
    tg::Tensor scaled = z;
    for (double& v : scaled.storage()) v *= sched.sigma(tau);
    input = tape.constant(std::move(scaled));
  } else {
    input = diffuse(*x_prev, taus, z, sched);
  }
  return generator.predict_x0(tape, input, taus, c, grad);
}

}  // namespace

// --------------------------------------------------------------- guidance ----

GuidanceStrategy GuidanceStrategy::lsg(double kappa) {
  return {kappa, kappa, kappa, kappa, "lsg", false};
}
GuidanceStrategy GuidanceStrategy::cfg(double kappa4) {
  return {1.0, 1.0, 1.0, kappa4, "cfg", false};
}
GuidanceStrategy GuidanceStrategy::no_cfg() { return {1.0, 1.0, 1.0, 1.0, "no-cfg", false}; }
GuidanceStrategy GuidanceStrategy::zero_cfg() { return {0.0, 0.0, 0.0, 1.0, "zero-cfg", false}; }
GuidanceStrategy GuidanceStrategy::anti_cfg() {
  return {-1.0, -1.0, -1.0, 1.0, "anti-cfg", false};
}
GuidanceStrategy GuidanceStrategy::custom(double k1, double k2, double k3, double k4) {
  return {k1, k2, k3, k4, "custom", false};
}

GuidanceStrategy GuidanceStrategy::from_preset(const std::string& name, double kappa) {
  if (name == "lsg") return lsg(kappa);
  if (name == "cfg") return cfg(kappa);
  if (name == "no-cfg") return no_cfg();
  if (name == "zero-cfg") return zero_cfg();
  if (name == "anti-cfg") return anti_cfg();
  throw DistillError("unknown guidance preset '" + name +
                     "' (expected lsg, cfg, no-cfg, zero-cfg or anti-cfg)");
}

void GuidanceStrategy::validate() const {
  for (double k : {kappa1, kappa2, kappa3, kappa4}) {
    if (!std::isfinite(k)) throw DistillError("guidance scales must be finite");
  }
  if (preset == "cfg" && !(kappa4 > 1.0)) {
    throw DistillError("cfg preset needs a teacher scale kappa4 > 1");
  }
}

nlohmann::json GuidanceStrategy::to_json() const {
  return {{"preset", preset},   {"kappa1", kappa1}, {"kappa2", kappa2},
          {"kappa3", kappa3},   {"kappa4", kappa4}, {"kappa1_theta_only", kappa1_theta_only}};
}

Matching parse_matching(const std::string& name) {
  if (name == "final_step") return Matching::kFinalStep;
  if (name == "uniform_step") return Matching::kUniformStep;
  throw DistillError("unknown matching '" + name + "' (expected final_step or uniform_step)");
}

std::string to_string(Matching matching) {
  return matching == Matching::kFinalStep ? "final_step" : "uniform_step";
}

// ----------------------------------------------------------------- config ----

void DistillConfig::validate(int schedule_steps) const {
  if (K < 1) throw DistillError("distill.K must be >= 1");
  guidance.validate();
  if (lambda_sid < 0.0 || lambda_adv_psi < 0.0 || lambda_adv_theta < 0.0) {
    throw DistillError("distill lambdas must be >= 0");
  }
  if (data_enhanced && real_pairs < 1) {
    throw DistillError("distill.real_pairs must be set (>= 1) in data-enhanced mode");
  }
  if (real_pairs < 0) throw DistillError("distill.real_pairs must be >= 0");
  if (warmup_images < 0) throw DistillError("distill.warmup_images must be >= 0");
  if (warmup_images > b_switch_images) {
    throw DistillError("distill.warmup_images must not exceed distill.b_switch_images");
  }
  try {
    time.validate(schedule_steps);
  } catch (const std::exception& e) {
    throw DistillError(e.what());
  }
  if (!(lr_psi > 0.0) || !(lr_theta > 0.0)) throw DistillError("learning rates must be > 0");
  if (batch_size < 1) throw DistillError("distill.batch_size must be >= 1");
  if (!(ema_half_life_images >= 0.0)) throw DistillError("distill.ema_half_life must be >= 0");
  if (budget_images < 0) throw DistillError("distill.budget_images must be >= 0");
}

nlohmann::json DistillConfig::to_json() const {
  return {{"K", K},
          {"matching", to_string(matching)},
          {"guidance", guidance.to_json()},
          {"lambda_sid", lambda_sid},
          {"lambda_adv_psi", lambda_adv_psi},
          {"lambda_adv_theta", lambda_adv_theta},
          {"data_enhanced", data_enhanced},
          {"real_pairs", real_pairs},
          {"warmup_images", warmup_images},
          {"b_switch_images", b_switch_images},
          {"t_min", time.t_min},
          {"t_init", time.t_init},
          {"t_max", time.t_max},
          {"lr_psi", lr_psi},
          {"lr_theta", lr_theta},
          {"batch_size", batch_size},
          {"ema_half_life_images", ema_half_life_images},
          {"budget_images", budget_images},
          {"seed", seed},
          {"init_generator", init_generator}};
}

int DistillConfig::effective_batch() const {
  if (matching == Matching::kFinalStep && K > 1) return std::max(1, batch_size / K);
  return batch_size;
}

double DistillConfig::effective_lr_theta() const {
  if (matching == Matching::kFinalStep && K > 1) return lr_theta / K;
  return lr_theta;
}

// --------------------------------------------------------------- rollouts ----

GenRollout generate_final_step(ScoreNet& generator, tg::Tape& tape, int K, int t_init,
                               std::span<const ClassId> c, const DiffusionSchedule& sched,
                               Rng& rng, tg::ParamGrad grad) {
  if (K < 1) throw DistillError("rollout needs K >= 1");
  GenRollout roll;
  roll.k = K;
  roll.taus = tau_schedule(K, t_init);
  for (int j = 0; j < K; ++j) {
    roll.noise.push_back(normal_tensor(c.size(), 2, rng));
    const tg::Var* prev = roll.outputs.empty() ? nullptr : &roll.outputs.back();
    roll.outputs.push_back(generator_step(generator, tape, prev, roll.noise.back(),
                                          roll.taus[static_cast<std::size_t>(j)], c, sched, grad));
    roll.stop_gradient.push_back(false);
  }
  return roll;
}

GenRollout generate_uniform_step(ScoreNet& generator, tg::Tape& tape, int K, int t_init,
                                 std::span<const ClassId> c, const DiffusionSchedule& sched,
                                 Rng& rng, tg::ParamGrad grad) {
  if (K < 1) throw DistillError("rollout needs K >= 1");
  GenRollout roll;
  roll.k = K == 1 ? 1 : rng.uniform_int(1, K);
  roll.taus = tau_schedule(K, t_init);
  for (int j = 0; j < roll.k; ++j) {
    const bool last = j + 1 == roll.k;
    roll.noise.push_back(normal_tensor(c.size(), 2, rng));
    const tg::Var* prev = roll.outputs.empty() ? nullptr : &roll.outputs.back();
    tg::Var out = generator_step(generator, tape, prev, roll.noise.back(),
                                 roll.taus[static_cast<std::size_t>(j)], c, sched,
                                 last ? grad : tg::ParamGrad::kFreeze);
    if (!last) out = tg::stop_gradient(out);
    roll.outputs.push_back(out);
    roll.stop_gradient.push_back(!last);
  }
  return roll;
}

std::vector<tg::Tensor> sample_generator(ScoreNet& generator, int K, int t_init,
                                         std::span<const ClassId> c,
                                         const DiffusionSchedule& sched, Rng& rng) {
  if (K < 1) throw DistillError("sampling needs K >= 1");
  const std::vector<int> taus = tau_schedule(K, t_init);
  const std::size_t n = c.size();
  std::vector<tg::Tensor> noise;
  for (int j = 0; j < K; ++j) noise.push_back(normal_tensor(n, 2, rng));

  std::vector<tg::Tensor> outputs(static_cast<std::size_t>(K), tg::Tensor(tg::Shape{n, 2}));
  for (std::size_t begin = 0; begin < n; begin += kSampleChunk) {
    const std::size_t len = std::min(kSampleChunk, n - begin);
    const std::span<const ClassId> cc = c.subspan(begin, len);
    tg::Tensor x(tg::Shape{len, 2});
    for (int j = 0; j < K; ++j) {
      const int tau = taus[static_cast<std::size_t>(j)];
      const double a = sched.a(tau);
      const double s = sched.sigma(tau);
      const tg::Tensor& z = noise[static_cast<std::size_t>(j)];
      tg::Tensor input(tg::Shape{len, 2});
      for (std::size_t i = 0; i < 2 * len; ++i) input[i] = a * x[i] + s * z[2 * begin + i];
      const std::vector<int> tv(len, tau);
      x = generator.predict(input, tv, cc);
      auto& out = outputs[static_cast<std::size_t>(j)];
      std::copy(x.data().begin(), x.data().end(), out.storage().begin() + 2 * begin);
    }
  }
  return outputs;
}

// ----------------------------------------------------------------- losses ----

PsiLoss loss_psi(ScoreNet& f_psi, tg::Tape& tape, const tg::Var& x_t, const tg::Tensor& x_g,
                 std::span<const int> t, std::span<const ClassId> c, double kappa1,
                 const DiffusionSchedule& sched, bool data_enhanced, double lambda_adv_psi,
                 const PsiAdversarial* adv, tg::ParamGrad grad) {
  const std::size_t n = t.size();
  if (x_t.value().shape() != x_g.shape() || x_g.rows() != n || c.size() != n || n == 0) {
    throw tg::DimensionError("loss_psi: x_t, x_g, t and c must agree in rows");
  }
  std::vector<double> root_snr(n);
  std::vector<double> gamma(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double snr = sched.snr(t[r]);
    root_snr[r] = std::sqrt(snr);
    gamma[r] = 4.0 + snr;
  }
  const double inv_n = 1.0 / static_cast<double>(n);

  const tg::Var f = apply_cfg(f_psi, tape, x_t, t, c, kappa1, grad);
  const tg::Var diff = tg::sub(f, tape.constant(x_g));
  const tg::Var weighted = tg::mul(diff, tape.constant(row_coefficients(root_snr, x_g.cols())));
  const tg::Var denoise = tg::scale(tg::sq_norm(weighted), inv_n);

  PsiLoss out;
  out.total = denoise;
  out.denoise = denoise.value().item();
  if (!data_enhanced) return out;

  if (adv == nullptr || adv->head == nullptr || !adv->real_x_t.valid() ||
      adv->real_c.size() != n || adv->real_x_t.value().shape() != x_g.shape()) {
    throw DistillError("loss_psi: data-enhanced mode needs discriminator head and real inputs");
  }
  const bool blind = kappa1 == 0.0;
  const std::vector<ClassId> fake_c = blind_if(blind, c);
  const std::vector<ClassId> real_c = blind_if(blind, adv->real_c);
  const tg::Var logit_fake = adv->head->logits(tape, f_psi, x_t, t, fake_c, grad, grad);
  const tg::Var logit_real = adv->head->logits(tape, f_psi, adv->real_x_t, t, real_c, grad, grad);
  // -½[ln D(real) + ln(1 - D(fake))], with ln(1 - σ(l)) = ln σ(-l).
  const tg::Var bce_rows = tg::scale(
      tg::add(tg::log_sigmoid(logit_real), tg::log_sigmoid(tg::scale(logit_fake, -1.0))), -0.5);
  out.bce = tg::mean(bce_rows).value().item();
  const tg::Var adv_term = tg::scale(
      tg::sum(tg::mul(bce_rows, tape.constant(row_coefficients(gamma, 1)))),
      lambda_adv_psi * inv_n);
  out.adversarial = adv_term.value().item();
  out.total = tg::add(denoise, adv_term);
  return out;
}

tg::Var sid_inner_product(const tg::Var& f_phi, const tg::Var& f_psi_a, const tg::Var& f_psi_b,
                          const tg::Var& x_g) {
  const double rows = static_cast<double>(x_g.value().rows());
  return tg::scale(tg::dot(tg::sub(f_phi, f_psi_a), tg::sub(f_psi_b, x_g)), 1.0 / rows);
}

double omega_coefficient(const tg::Tensor& f_phi, const tg::Tensor& x_g) {
  if (f_phi.shape() != x_g.shape() || x_g.rows() == 0) {
    throw tg::DimensionError("omega_coefficient: shape mismatch");
  }
  double abs_sum = 0.0;
  for (std::size_t i = 0; i < x_g.size(); ++i) abs_sum += std::abs(f_phi[i] - x_g[i]);
  // d·mean over all entries = per-row L1 averaged over the batch.
  return 1.0 / (abs_sum / static_cast<double>(x_g.rows()) + 1e-8);
}

ThetaLoss loss_theta(Denoiser& f_phi, ScoreNet& f_psi, tg::Tape& tape, const tg::Var& x_t,
                     const tg::Var& x_g, std::span<const int> t, std::span<const ClassId> c,
                     const GuidanceStrategy& strategy, int b, const DistillConfig& cfg,
                     DiscriminatorHead* head) {
  if (b != 0 && b != 1) throw DistillError("loss_theta: b must be 0 or 1");
  const tg::ParamGrad frozen = tg::ParamGrad::kFreeze;
  const tg::Var f4 = apply_cfg(f_phi, tape, x_t, t, c, strategy.kappa4, frozen);
  GuidedEvaluator psi(f_psi, tape, x_t, t, c, frozen);
  const tg::Var f2 = psi.at(strategy.kappa2);
  const tg::Var f3 = psi.at(strategy.kappa3);

  ThetaLoss out;
  out.coefficient = omega_coefficient(f4.value(), x_g.value());
  const double w_sid = (b == 1 ? 0.5 : 1.0) * cfg.lambda_sid * out.coefficient;
  out.total = tg::scale(sid_inner_product(f4, f2, f3, x_g), w_sid);
  out.sid = out.total.value().item();

  if (b == 1 && cfg.data_enhanced) {
    if (head == nullptr) throw DistillError("loss_theta: data-enhanced mode needs a head");
    const bool blind = strategy.kappa2 == 0.0 && strategy.kappa3 == 0.0;
    const std::vector<ClassId> dc = blind_if(blind, c);
    const tg::Var logit_fake = head->logits(tape, f_psi, x_t, t, dc, frozen, frozen);
    const double d = static_cast<double>(x_g.value().cols());
    const double w_adv = 0.5 * cfg.lambda_adv_theta * (0.5 * out.coefficient) * d;
    const tg::Var adv = tg::scale(tg::mean(tg::log_sigmoid(logit_fake)), -w_adv);
    out.adversarial = adv.value().item();
    out.total = tg::add(out.total, adv);
  }
  return out;
}

// -------------------------------------------------------------- distiller ----

Distiller::Distiller(DistillConfig cfg, Denoiser& teacher, const ScoreNet& teacher_net,
                     ConditionalMixture mix, DiffusionSchedule sched,
                     const ScoreNet* init_generator)
    : cfg_(std::move(cfg)),
      teacher_(teacher),
      mix_(std::move(mix)),
      sched_(std::move(sched)),
      generator_(init_generator != nullptr ? *init_generator : teacher_net),
      fake_(teacher_net),
      rng_(Rng::derive(cfg_.seed, 2)),
      real_rng_(Rng::derive(cfg_.seed, 4)) {
  cfg_.validate(sched_.steps());
  if (init_generator != nullptr && !(init_generator->spec() == teacher_net.spec())) {
    throw CheckpointError(CheckpointError::Kind::kIncompatible,
                          "init generator architecture differs from the teacher's");
  }
  if (teacher_net.spec().num_classes != mix_.num_classes()) {
    throw DistillError("teacher network class count does not match the mixture");
  }
  generator_.reset_forward_calls();
  fake_.reset_forward_calls();
  theta_params_ = collect_parameters(generator_.parameters());
  psi_params_ = collect_parameters(fake_.parameters(), head_.parameters());
  opt_theta_ = Adam(AdamConfig{cfg_.effective_lr_theta(), 0.0, 0.999, 1e-8}, theta_params_);
  opt_psi_ = Adam(AdamConfig{cfg_.lr_psi, 0.0, 0.999, 1e-8}, psi_params_);
  ema_ = EmaState(cfg_.ema_half_life_images, generator_.parameters());
  for (auto* p : theta_params_) p->zero_grad();
  for (auto* p : psi_params_) p->zero_grad();

  if (cfg_.data_enhanced) {
    Rng pool_rng = Rng::derive(cfg_.seed, 3);
    const auto n = static_cast<std::size_t>(cfg_.real_pairs);
    real_c_.resize(n);
    real_x0_ = tg::Tensor(tg::Shape{n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      const auto pair = mix_.sample_pair(pool_rng);
      real_c_[i] = pair.c;
      real_x0_[2 * i] = pair.x0.x;
      real_x0_[2 * i + 1] = pair.x0.y;
    }
  }
}

void Distiller::fill_real_batch(std::vector<ClassId>& c, tg::Tensor& x0) {
  const std::size_t n = c.size();
  x0 = tg::Tensor(tg::Shape{n, 2});
  for (std::size_t r = 0; r < n; ++r) {
    const auto i = static_cast<std::size_t>(real_rng_.below(real_c_.size()));
    c[r] = real_c_[i];
    x0[2 * r] = real_x0_[2 * i];
    x0[2 * r + 1] = real_x0_[2 * i + 1];
  }
}

StepMetrics Distiller::step() {
  const auto n = static_cast<std::size_t>(cfg_.effective_batch());
  const bool update_theta = images_seen_ >= cfg_.warmup_images;
  const int b = images_seen_ > cfg_.b_switch_images ? 1 : 0;
  StepMetrics m;
  m.b = update_theta ? b : 0;

  const std::vector<ClassId> c = sample_classes(mix_, n, rng_);
  tg::Tape gen_tape;
  const tg::ParamGrad gen_grad = update_theta ? tg::ParamGrad::kTrack : tg::ParamGrad::kFreeze;
  const bool uniform = cfg_.matching == Matching::kUniformStep && cfg_.K > 1;
  const GenRollout roll =
      uniform ? generate_uniform_step(generator_, gen_tape, cfg_.K, cfg_.time.t_init, c, sched_,
                                      rng_, gen_grad)
              : generate_final_step(generator_, gen_tape, cfg_.K, cfg_.time.t_init, c, sched_,
                                    rng_, gen_grad);
  m.k = roll.k;
  const tg::Tensor x_g = roll.output().value();

  // Fake score update on the detached generator output.
  {
    std::vector<int> t(n);
    for (auto& v : t) v = sample_t(cfg_.time, rng_);
    const tg::Tensor eps = normal_tensor(n, 2, rng_);
    tg::Tape tape;
    const tg::Var x_t = diffuse(tape.constant(x_g), t, eps, sched_);
    PsiAdversarial adv;
    std::vector<ClassId> real_c(n);
    if (cfg_.data_enhanced) {
      tg::Tensor real_x0;
      fill_real_batch(real_c, real_x0);
      const tg::Tensor real_eps = normal_tensor(n, 2, real_rng_);
      adv.head = &head_;
      adv.real_x_t = diffuse(tape.constant(std::move(real_x0)), t, real_eps, sched_);
      adv.real_c = real_c;
    }
    const PsiLoss loss =
        loss_psi(fake_, tape, x_t, x_g, t, c, cfg_.guidance.psi_update_kappa(), sched_,
                 cfg_.data_enhanced, cfg_.lambda_adv_psi, cfg_.data_enhanced ? &adv : nullptr);
    m.loss_psi = loss.total.value().item();
    check_finite(m.loss_psi, "fake score loss");
    tape.backward(loss.total);
    opt_psi_.step(psi_params_);
  }

  if (update_theta) {
    std::vector<int> t(n);
    for (auto& v : t) v = sample_t(cfg_.time, rng_);
    const tg::Tensor eps = normal_tensor(n, 2, rng_);
    const tg::Var x_t = diffuse(roll.output(), t, eps, sched_);
    const ThetaLoss loss = loss_theta(teacher_, fake_, gen_tape, x_t, roll.output(), t, c,
                                      cfg_.guidance, b, cfg_, &head_);
    m.loss_theta = loss.total.value().item();
    m.loss_theta_adv = loss.adversarial;
    check_finite(m.loss_theta, "generator loss");
    gen_tape.backward(loss.total);
    opt_theta_.step(theta_params_);
    m.theta_updated = true;
  }

  ema_.update(generator_.parameters(), static_cast<long long>(n));
  images_seen_ += static_cast<long long>(n);
  m.images_seen = images_seen_;
  return m;
}

ScoreNet Distiller::ema_generator() const {
  ScoreNet out = generator_;
  auto& params = out.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = ema_.shadow()[i];
  return out;
}

void Distiller::save_state(Checkpoint& ckpt) const {
  ckpt.metadata["kind"] = "distill_state";
  ckpt.metadata["config"] = cfg_.to_json();
  ckpt.metadata["images_seen"] = images_seen_;
  ckpt.metadata["ema_images_seen"] = ema_.images_seen();
  ckpt.metadata["rng"] = rng_.state();
  ckpt.metadata["real_rng"] = real_rng_.state();
  ckpt.metadata["adam_theta_steps"] = opt_theta_.steps();
  ckpt.metadata["adam_psi_steps"] = opt_psi_.steps();
  add_network(ckpt, "theta", generator_);
  add_network(ckpt, "psi", fake_);
  ckpt.add_parameters("head", head_.parameters());
  auto add_list = [&](const std::string& prefix, const std::vector<tg::Tensor>& list) {
    for (std::size_t i = 0; i < list.size(); ++i) ckpt.add(prefix + "." + std::to_string(i), list[i]);
  };
  add_list("ema", ema_.shadow());
  add_list("adam_theta.m", opt_theta_.first_moments());
  add_list("adam_theta.v", opt_theta_.second_moments());
  add_list("adam_psi.m", opt_psi_.first_moments());
  add_list("adam_psi.v", opt_psi_.second_moments());
}

void Distiller::load_state(const Checkpoint& ckpt) {
  const auto& meta = ckpt.metadata;
  if (meta.value("kind", "") != "distill_state") {
    throw CheckpointError(CheckpointError::Kind::kIncompatible, "not a distillation state");
  }
  if (meta.at("config") != cfg_.to_json()) {
    throw CheckpointError(CheckpointError::Kind::kIncompatible,
                          "state was saved under a different distill config");
  }
  ckpt.load_parameters("theta", generator_.parameters());
  ckpt.load_parameters("psi", fake_.parameters());
  ckpt.load_parameters("head", head_.parameters());
  auto load_list = [&](const std::string& prefix, std::vector<tg::Tensor>& list) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      const tg::Tensor& v = ckpt.at(prefix + "." + std::to_string(i));
      if (v.shape() != list[i].shape()) {
        throw CheckpointError(CheckpointError::Kind::kShape, "shape mismatch for " + prefix);
      }
      list[i] = v;
    }
  };
  load_list("ema", ema_.shadow());
  load_list("adam_theta.m", opt_theta_.first_moments());
  load_list("adam_theta.v", opt_theta_.second_moments());
  load_list("adam_psi.m", opt_psi_.first_moments());
  load_list("adam_psi.v", opt_psi_.second_moments());
  opt_theta_.set_steps(meta.at("adam_theta_steps").get<long long>());
  opt_psi_.set_steps(meta.at("adam_psi_steps").get<long long>());
  ema_.set_images_seen(meta.at("ema_images_seen").get<long long>());
  images_seen_ = meta.at("images_seen").get<long long>();
  rng_.set_state(meta.at("rng").get<std::string>());
  real_rng_.set_state(meta.at("real_rng").get<std::string>());
}

// ------------------------------------------------------------- evaluation ----

void EvalConfig::validate(int schedule_steps) const {
  if (every_images < 1) throw DistillError("eval.every_images must be >= 1");
  if (num_samples < 3 || fisher_samples < 1) {
    throw DistillError("eval.num_samples must be >= 3 and eval.fisher_samples >= 1");
  }
  if (fisher_t_set.empty()) throw DistillError("eval.fisher_t_set must not be empty");
  for (int t : fisher_t_set) {
    if (t < 1 || t > schedule_steps) throw DistillError("eval.fisher_t_set entry out of range");
  }
}

nlohmann::json EvalConfig::to_json() const {
  return {{"every_images", every_images},
          {"num_samples", num_samples},
          {"fisher_samples", fisher_samples},
          {"fisher_t_set", fisher_t_set},
          {"wall_clock", wall_clock}};
}

std::vector<MetricsReport> evaluate_generator(ScoreNet& generator, int K, int t_init,
                                              ScoreNet& fake, double fisher_kappa,
                                              ScoreNet& fisher_generator,
                                              const ConditionalMixture& mix,
                                              const DiffusionSchedule& sched,
                                              const EvalConfig& eval, std::uint64_t seed,
                                              bool per_step) {
  Rng sample_rng = Rng::derive(seed, 1);
  Rng fisher_rng = Rng::derive(seed, 2);
  const auto c = sample_classes(mix, static_cast<std::size_t>(eval.num_samples), sample_rng);
  const auto outputs = sample_generator(generator, K, t_init, c, sched, sample_rng);
  const tg::Tensor reference = sample_data(mix, c, sample_rng);

  const auto fc = sample_classes(mix, static_cast<std::size_t>(eval.fisher_samples), fisher_rng);
  const auto fisher_outputs = sample_generator(fisher_generator, K, t_init, fc, sched, fisher_rng);
  const std::vector<ClassId> data_c = blind_if(fisher_kappa == 0.0, fc);
  const ScoreFn model_score = [&](const tg::Tensor& x_t, std::span<const int> t,
                                  std::span<const ClassId> cc) {
    tg::Tensor x0(x_t.shape());
    for (std::size_t begin = 0; begin < cc.size(); begin += kSampleChunk) {
      const std::size_t len = std::min(kSampleChunk, cc.size() - begin);
      tg::Tensor chunk(tg::Shape{len, 2});
      std::copy_n(x_t.data().begin() + 2 * begin, 2 * len, chunk.storage().begin());
      tg::Tape tape;
      const tg::Var pred = apply_cfg(fake, tape, tape.constant(std::move(chunk)),
                                     t.subspan(begin, len), cc.subspan(begin, len), fisher_kappa);
      std::copy(pred.value().data().begin(), pred.value().data().end(),
                x0.storage().begin() + 2 * begin);
    }
    return x0_to_score(x0, x_t, t, sched);
  };

  std::vector<MetricsReport> reports;
  const std::size_t first = per_step ? 0 : outputs.size() - 1;
  for (std::size_t j = first; j < outputs.size(); ++j) {
    MetricsReport report = sample_metrics(outputs[j], c, reference, c, mix);
    Rng step_rng = Rng::derive(seed, 10 + j);
    report.fisher_estimate = fisher_estimate(model_score, fisher_outputs[j], data_c, mix, sched,
                                             eval.fisher_t_set, step_rng);
    report.seed = seed;
    report.validate();
    reports.push_back(std::move(report));
  }
  return reports;
}

// -------------------------------------------------------------------- run ----

void add_generator(Checkpoint& ckpt, const ScoreNet& generator, const ScoreNet& fake,
                   const DistillConfig& cfg) {
  add_network(ckpt, "generator", generator);
  add_network(ckpt, "fake", fake);
  ckpt.metadata["generator"] = {{"K", cfg.K},
                                {"t_init", cfg.time.t_init},
                                {"tau", tau_schedule(cfg.K, cfg.time.t_init)},
                                {"matching", to_string(cfg.matching)},
                                {"guidance", cfg.guidance.to_json()}};
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

// Keeps the header and rows whose leading images_seen is at most `limit`.
void truncate_csv(const std::filesystem::path& path, long long limit) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::string kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header || std::stoll(split_csv(line).at(0)) <= limit) kept += line + "\n";
    header = false;
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::ofstream open_csv(const std::filesystem::path& path, bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return out;
}

struct Window {
  double psi_sum = 0.0;
  double theta_sum = 0.0;
  long long psi_count = 0;
  long long theta_count = 0;
  int last_b = 0;
  double wall_offset = 0.0;
};

}  // namespace

void write_plotdata(const std::filesystem::path& run_dir) {
  std::ifstream in(run_dir / "metrics.csv");
  if (!in) throw std::runtime_error("cannot read " + (run_dir / "metrics.csv").string());
  std::string line;
  std::getline(in, line);
  const auto header = split_csv(line);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) rows.push_back(split_csv(line));
  std::filesystem::create_directories(run_dir / "plotdata");
  for (std::size_t col = 1; col < header.size(); ++col) {
    std::ofstream out(run_dir / "plotdata" / (header[col] + ".csv"), std::ios::trunc);
    out << header[0] << "," << header[col] << "\n";
    for (const auto& row : rows) {
      if (col < row.size() && row[col] != "nan") out << row[0] << "," << row[col] << "\n";
    }
    if (!out) throw std::runtime_error("cannot write plot data for " + header[col]);
  }
}

DistillRunResult run_distillation(const DistillConfig& cfg, const EvalConfig& eval,
                                  Denoiser& teacher, const ScoreNet& teacher_net,
                                  const ConditionalMixture& mix, const DiffusionSchedule& sched,
                                  const std::filesystem::path& run_dir,
                                  const ScoreNet* init_generator, const RunOptions& options) {
  cfg.validate(sched.steps());
  eval.validate(sched.steps());
  const auto ckpt_dir = run_dir / "checkpoints";
  std::filesystem::create_directories(ckpt_dir);
  const auto metrics_path = run_dir / "metrics.csv";
  const auto steps_path = run_dir / "steps.csv";
  const auto state_path = ckpt_dir / "state.ckpt";

  Distiller distiller(cfg, teacher, teacher_net, mix, sched, init_generator);
  Window window;
  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t eval_base = Rng::derive(cfg.seed, 5).next_u64();

  if (options.resume) {
    const Checkpoint state = load_checkpoint(state_path);
    distiller.load_state(state);
    const auto& w = state.at("run.window");
    window.psi_sum = w[0];
    window.theta_sum = w[1];
    window.psi_count = static_cast<long long>(w[2]);
    window.theta_count = static_cast<long long>(w[3]);
    window.last_b = static_cast<int>(w[4]);
    window.wall_offset = w[5];
    truncate_csv(metrics_path, distiller.images_seen());
    truncate_csv(steps_path, distiller.images_seen());
  }
  std::ofstream metrics_csv = open_csv(metrics_path, options.resume);
  std::ofstream steps_csv = open_csv(steps_path, options.resume);

  auto wall = [&] {
    if (!eval.wall_clock) return 0.0;
    return window.wall_offset +
           std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  auto evaluate = [&] {
    ScoreNet sampler = distiller.ema_generator();
    return evaluate_generator(sampler, cfg.K, cfg.time.t_init, distiller.fake(),
                              cfg.guidance.psi_update_kappa(), distiller.generator(), mix, sched,
                              eval, eval_base ^ static_cast<std::uint64_t>(distiller.images_seen()))
        .back();
  };

  auto write_metrics_row = [&](const MetricsReport& report) {
    const double psi = window.psi_count > 0 ? window.psi_sum / window.psi_count : std::nan("");
    const double theta =
        window.theta_count > 0 ? window.theta_sum / window.theta_count : std::nan("");
    metrics_csv << distiller.images_seen() << "," << format_double(psi) << ","
                << format_double(theta) << "," << format_double(report.frechet_uncond);
    for (double f : report.frechet_per_class) metrics_csv << "," << format_double(f);
    metrics_csv << "," << format_double(report.alignment) << ","
                << format_double(report.fisher_estimate) << "," << window.last_b << ","
                << format_double(wall()) << "\n";
    metrics_csv.flush();
    if (!metrics_csv) throw std::runtime_error("cannot write " + metrics_path.string());
    window.psi_sum = window.theta_sum = 0.0;
    window.psi_count = window.theta_count = 0;
  };

  auto save_generators = [&] {
    Checkpoint raw;
    add_generator(raw, distiller.generator(), distiller.fake(), cfg);
    raw.metadata["images_seen"] = distiller.images_seen();
    raw.metadata["mixture_hash"] = mix.hash();
    save_checkpoint(ckpt_dir / "generator_raw.ckpt", raw);
    Checkpoint ema;
    add_generator(ema, distiller.ema_generator(), distiller.fake(), cfg);
    ema.metadata["images_seen"] = distiller.images_seen();
    ema.metadata["mixture_hash"] = mix.hash();
    ema.metadata["ema_half_life_images"] = cfg.ema_half_life_images;
    save_checkpoint(ckpt_dir / "generator_ema.ckpt", ema);
  };

  auto save_state = [&] {
    Checkpoint state;
    distiller.save_state(state);
    state.metadata["eval"] = eval.to_json();
    state.metadata["mixture_hash"] = mix.hash();
    state.add("run.window",
              tg::Tensor(tg::Shape{6}, {window.psi_sum, window.theta_sum,
                                        static_cast<double>(window.psi_count),
                                        static_cast<double>(window.theta_count),
                                        static_cast<double>(window.last_b), wall()}));
    save_checkpoint(state_path, state);
  };

  MetricsReport last_report;
  bool have_report = false;
  if (!options.resume) {
    metrics_csv << "images_seen,loss_psi,loss_theta,frechet_uncond";
    for (int k = 0; k < mix.num_classes(); ++k) metrics_csv << ",frechet_class_" << k;
    metrics_csv << ",alignment,fisher_est,b,wall_seconds\n";
    steps_csv << "images_seen,loss_psi,loss_theta,loss_theta_adv,b,k,theta_updated\n";
    last_report = evaluate();
    have_report = true;
    write_metrics_row(last_report);
    save_generators();
    save_state();
  }

  long long next_eval = (distiller.images_seen() / eval.every_images + 1) * eval.every_images;
  while (distiller.images_seen() < cfg.budget_images) {
    if (options.stop_at_images && distiller.images_seen() >= *options.stop_at_images) {
      save_state();
      DistillRunResult partial;
      partial.images_seen = distiller.images_seen();
      partial.final_report = last_report;
      return partial;
    }
    const StepMetrics m = distiller.step();
    steps_csv << m.images_seen << "," << format_double(m.loss_psi) << ","
              << format_double(m.theta_updated ? m.loss_theta : std::nan("")) << ","
              << format_double(m.theta_updated ? m.loss_theta_adv : std::nan("")) << "," << m.b
              << "," << m.k << "," << (m.theta_updated ? 1 : 0) << "\n";
    window.psi_sum += m.loss_psi;
    ++window.psi_count;
    if (m.theta_updated) {
      window.theta_sum += m.loss_theta;
      ++window.theta_count;
    }
    window.last_b = m.b;
    const bool done = distiller.images_seen() >= cfg.budget_images;
    if (distiller.images_seen() >= next_eval || done) {
      steps_csv.flush();
      last_report = evaluate();
      have_report = true;
      write_metrics_row(last_report);
      save_generators();
      save_state();
      while (next_eval <= distiller.images_seen()) next_eval += eval.every_images;
    }
  }
  steps_csv.flush();
  if (!steps_csv) throw std::runtime_error("cannot write " + steps_path.string());
  if (!have_report) {
    last_report = evaluate();
  }

  DistillRunResult result;
  result.final_report = last_report;
  result.images_seen = distiller.images_seen();
  result.completed = true;
  {
    std::ofstream out(run_dir / "final_metrics.json", std::ios::trunc);
    out << result.final_report.to_json().dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write final_metrics.json");
  }
  write_plotdata(run_dir);
  return result;
}

}  // namespace sidlab
