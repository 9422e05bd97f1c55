#include "sidlab/metrics.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>

namespace sidlab {
namespace {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

void moments(const tg::Tensor& x, Vector& mean, Matrix& cov) {
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto d = static_cast<Eigen::Index>(x.cols());
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      x.data().data(), n, d);
  mean = m.colwise().mean().transpose();
  const Matrix centered = m.rowwise() - mean.transpose();
  cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
}

Matrix psd_sqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  const Vector ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_gaussian(const tg::Tensor& samples_a, const tg::Tensor& samples_b) {
  if (samples_a.rank() != 2 || samples_b.rank() != 2 || samples_a.cols() != samples_b.cols()) {
    throw MetricsError("frechet_gaussian: sample sets must be [n x d] with equal d");
  }
  const std::size_t d = samples_a.cols();
  if (samples_a.rows() < d + 1 || samples_b.rows() < d + 1) {
    throw MetricsError("frechet_gaussian: need at least d+1 samples per set");
  }
  Vector mu_a, mu_b;
  Matrix cov_a, cov_b;
  moments(samples_a, mu_a, cov_a);
  moments(samples_b, mu_b, cov_b);
  const auto di = static_cast<Eigen::Index>(d);
  cov_a += 1e-6 * Matrix::Identity(di, di);
  cov_b += 1e-6 * Matrix::Identity(di, di);
  // tr((Σa Σb)^{1/2}) = tr((Σa^{1/2} Σb Σa^{1/2})^{1/2}), the symmetric form.
  const Matrix root_a = psd_sqrt(cov_a);
  const Matrix inner = root_a * cov_b * root_a;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (inner + inner.transpose()));
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
  return std::max(value, 0.0);
}

double alignment_score(const tg::Tensor& samples, std::span<const ClassId> c,
                       const ConditionalMixture& mix) {
  if (samples.rank() != 2 || samples.cols() != 2 || samples.rows() != c.size()) {
    throw MetricsError("alignment_score: need [n x 2] samples with one class each");
  }
  if (c.empty()) throw MetricsError("alignment_score: no samples");
  double acc = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c[i] == kNullClass) throw MetricsError("alignment_score: sample without a class");
    const auto post = mix.class_posterior({samples[2 * i], samples[2 * i + 1]});
    acc += post.at(static_cast<std::size_t>(c[i]));
  }
  return acc / static_cast<double>(c.size());
}

double fisher_estimate(const ScoreFn& model_score, const tg::Tensor& x_g,
                       std::span<const ClassId> c, const ConditionalMixture& mix,
                       const DiffusionSchedule& sched, std::span<const int> t_set, Rng& rng) {
  if (x_g.rank() != 2 || x_g.cols() != 2 || x_g.rows() != c.size() || c.empty()) {
    throw MetricsError("fisher_estimate: need [n x 2] samples with one condition each");
  }
  if (t_set.empty()) throw MetricsError("fisher_estimate: empty t_set");
  const std::size_t n = x_g.rows();
  double total = 0.0;
  for (const int t : t_set) {
    tg::Tensor eps(x_g.shape());
    for (double& v : eps.storage()) v = rng.normal();
    const tg::Tensor x_t = diffuse(x_g, t, eps, sched);
    const std::vector<int> tv(n, t);
    const tg::Tensor s_model = model_score(x_t, tv, c);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec2 s_data = mix.score({x_t[2 * i], x_t[2 * i + 1]}, t, sched, c[i]);
      const double dx = s_data.x - s_model[2 * i];
      const double dy = s_data.y - s_model[2 * i + 1];
      acc += dx * dx + dy * dy;
    }
    total += acc / static_cast<double>(n);
  }
  return total / static_cast<double>(t_set.size());
}

void MetricsReport::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(frechet_uncond) || !finite(fisher_estimate) || !finite(alignment)) {
    throw MetricsError("metrics report holds a non-finite value");
  }
  for (double v : frechet_per_class) {
    if (!finite(v)) throw MetricsError("metrics report holds a non-finite value");
  }
  if (alignment < 0.0 || alignment > 1.0) throw MetricsError("alignment outside [0, 1]");
}

nlohmann::json MetricsReport::to_json() const {
  return {{"frechet_uncond", frechet_uncond}, {"frechet_per_class", frechet_per_class},
          {"alignment", alignment},           {"fisher_estimate", fisher_estimate},
          {"num_samples", num_samples},       {"seed", seed}};
}

MetricsReport sample_metrics(const tg::Tensor& generated, std::span<const ClassId> c,
                             const tg::Tensor& reference, std::span<const ClassId> reference_c,
                             const ConditionalMixture& mix) {
  MetricsReport report;
  report.num_samples = static_cast<long long>(generated.rows());
  report.frechet_uncond = frechet_gaussian(generated, reference);
  report.alignment = alignment_score(generated, c, mix);
  auto select = [](const tg::Tensor& x, std::span<const ClassId> labels, ClassId k) {
    std::vector<double> rows;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == k) {
        rows.push_back(x[2 * i]);
        rows.push_back(x[2 * i + 1]);
      }
    }
    const std::size_t n = rows.size() / 2;
    return tg::Tensor(tg::Shape{n, 2}, std::move(rows));
  };
  for (ClassId k = 0; k < mix.num_classes(); ++k) {
    const tg::Tensor g = select(generated, c, k);
    const tg::Tensor r = select(reference, reference_c, k);
    if (g.rows() < 3 || r.rows() < 3) {
      throw MetricsError("too few samples of class " + std::to_string(k) +
                         " for a per-class Fréchet distance");
    }
    report.frechet_per_class.push_back(frechet_gaussian(g, r));
  }
  return report;
}

tg::Tensor sample_data(const ConditionalMixture& mix, std::span<const ClassId> c, Rng& rng) {
  tg::Tensor out(tg::Shape{c.size(), 2});
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Vec2 x = mix.sample(c[i], rng);
    out[2 * i] = x.x;
    out[2 * i + 1] = x.y;
  }
  return out;
}

std::vector<ClassId> sample_classes(const ConditionalMixture& mix, std::size_t n, Rng& rng) {
  std::vector<ClassId> c(n);
  for (auto& v : c) v = mix.sample_class(rng);
  return c;
}

}  // namespace sidlab
