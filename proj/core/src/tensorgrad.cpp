#include "sidlab/tensorgrad.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace sidlab::tg {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ln σ(x) = -softplus(-x)
double log_sigmoid_value(double x) {
  if (x >= 0.0) {
    return -std::log1p(std::exp(-x));
  }
  return x - std::log1p(std::exp(x));
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + where);
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---------------------------------------------------------------- Tensor ----

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_product(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
  return Tensor(Shape{rows, cols}, std::vector<double>(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 2) return shape_[0];
  if (shape_.size() <= 1) return 1;
  throw DimensionError("rows() needs rank <= 2, got " + shape_string(shape_));
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  if (shape_.empty()) return 1;
  throw DimensionError("cols() needs rank <= 2, got " + shape_string(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Parameter::Parameter(std::string n, Tensor v)
    : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    std::fill(grad.storage().begin(), grad.storage().end(), 0.0);
  }
}

// ------------------------------------------------------------------- Var ----

const Tensor& Var::value() const {
  if (!tape_) throw TapeError("use of an unbound Var");
  return tape_->value_of(id_);
}

Tape& Var::tape() const {
  if (!tape_) throw TapeError("use of an unbound Var");
  return *tape_;
}

// ------------------------------------------------------------------ Tape ----

const Tensor& Tape::value_of(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.external ? *n.external : n.value;
}

void Tape::check_owner(const Var& v) const {
  if (v.tape_ != this) {
    throw TapeError("Var belongs to a different tape");
  }
}

void Tape::check_open() const {
  if (consumed_) {
    throw TapeError("tape already consumed by backward(); reset() or use a new tape");
  }
}

Var Tape::push(Node node) {
  check_open();
  if (!node.external) {
    require_finite(node.value, "tape operation");
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::param(Parameter& p, ParamGrad mode) {
  require_finite(p.value, ("parameter " + p.name).c_str());
  Node n;
  n.external = &p.value;
  if (mode == ParamGrad::kTrack) {
    n.requires_grad = true;
    n.param = &p;
  }
  return push(std::move(n));
}

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
  consumed_ = false;
}

Tensor& Tape::grad_slot(std::size_t id) {
  Tensor& g = grads_[id];
  if (g.empty() && value_of(id).size() != 0) {
    g = Tensor(value_of(id).shape());
  }
  return g;
}

Tensor Tape::grad(const Var& v) const {
  check_owner(v);
  if (v.id_ < grads_.size() && !grads_[v.id_].empty()) {
    return grads_[v.id_];
  }
  return Tensor(value_of(v.id_).shape());
}

void Tape::backward(const Var& loss) {
  check_owner(loss);
  check_open();
  if (value_of(loss.id_).size() != 1) {
    throw DimensionError("backward() needs a single-element loss, got shape " +
                         shape_string(value_of(loss.id_).shape()));
  }
  consumed_ = true;
  grads_.assign(nodes_.size(), Tensor{});
  if (!nodes_[loss.id_].requires_grad) {
    return;
  }
  grad_slot(loss.id_)[0] = 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    if (!nodes_[i].requires_grad || grads_[i].empty()) continue;
    if (!grads_[i].all_finite()) {
      throw NumericError("non-finite gradient during backward()");
    }
    propagate(i);
  }
}

void Tape::propagate(std::size_t id) {
  Node& n = nodes_[id];
  const Tensor& g = grads_[id];
  auto wants = [&](std::size_t k) {
    return k < n.num_parents && nodes_[n.parents[k]].requires_grad;
  };

  switch (n.op) {
    case Op::kLeaf: {
      if (n.param) {
        Tensor& pg = n.param->grad;
        if (pg.shape() != n.param->value.shape()) pg = Tensor(n.param->value.shape());
        for (std::size_t j = 0; j < g.size(); ++j) pg[j] += g[j];
      }
      return;
    }
    case Op::kMatMul: {
      const Tensor& a = value_of(n.parents[0]);
      const Tensor& b = value_of(n.parents[1]);
      const auto m = static_cast<Eigen::Index>(a.rows());
      const auto k = static_cast<Eigen::Index>(a.cols());
      const auto c = static_cast<Eigen::Index>(b.cols());
      ConstMap gm(g.data().data(), m, c);
      if (wants(0)) {
        Tensor& ga = grad_slot(n.parents[0]);
        MutMap(ga.data().data(), m, k).noalias() +=
            gm * ConstMap(b.data().data(), k, c).transpose();
      }
      if (wants(1)) {
        Tensor& gb = grad_slot(n.parents[1]);
        MutMap(gb.data().data(), k, c).noalias() +=
            ConstMap(a.data().data(), m, k).transpose() * gm;
      }
      return;
    }
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      const Tensor& a = value_of(n.parents[0]);
      const Tensor& b = value_of(n.parents[1]);
      const std::size_t size = g.size();
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        const Tensor& self = k == 0 ? a : b;
        const Tensor& other = k == 0 ? b : a;
        Tensor& gs = grad_slot(n.parents[k]);
        const bool self_bcast = self.size() == 1 && size != 1;
        const bool other_bcast = other.size() == 1 && size != 1;
        for (std::size_t j = 0; j < size; ++j) {
          double d = g[j];
          if (n.op == Op::kSub && k == 1) d = -d;
          if (n.op == Op::kMul) d *= other_bcast ? other[0] : other[j];
          gs[self_bcast ? 0 : j] += d;
        }
      }
      return;
    }
    case Op::kScale: {
      if (!wants(0)) return;
      Tensor& gx = grad_slot(n.parents[0]);
      for (std::size_t j = 0; j < g.size(); ++j) gx[j] += n.scalar * g[j];
      return;
    }
    case Op::kSilu:
    case Op::kTanh:
    case Op::kSigmoid:
    case Op::kLog:
    case Op::kLogSigmoid: {
      if (!wants(0)) return;
      const Tensor& x = value_of(n.parents[0]);
      const Tensor& y = n.value;
      Tensor& gx = grad_slot(n.parents[0]);
      for (std::size_t j = 0; j < g.size(); ++j) {
        double d = 0.0;
        switch (n.op) {
          case Op::kSilu: {
            const double s = stable_sigmoid(x[j]);
            d = s * (1.0 + x[j] * (1.0 - s));
            break;
          }
          case Op::kTanh:
            d = 1.0 - y[j] * y[j];
            break;
          case Op::kSigmoid:
            d = y[j] * (1.0 - y[j]);
            break;
          case Op::kLog:
            d = 1.0 / x[j];
            break;
          case Op::kLogSigmoid:
            d = stable_sigmoid(-x[j]);
            break;
          default:
            break;
        }
        gx[j] += d * g[j];
      }
      return;
    }
    case Op::kMean:
    case Op::kSum:
    case Op::kSqNorm: {
      if (!wants(0)) return;
      const Tensor& x = value_of(n.parents[0]);
      Tensor& gx = grad_slot(n.parents[0]);
      const double g0 = g[0];
      const double inv = x.size() ? 1.0 / static_cast<double>(x.size()) : 0.0;
      for (std::size_t j = 0; j < x.size(); ++j) {
        if (n.op == Op::kMean) {
          gx[j] += g0 * inv;
        } else if (n.op == Op::kSum) {
          gx[j] += g0;
        } else {
          gx[j] += 2.0 * x[j] * g0;
        }
      }
      return;
    }
    case Op::kDot: {
      const Tensor& a = value_of(n.parents[0]);
      const Tensor& b = value_of(n.parents[1]);
      const double g0 = g[0];
      if (wants(0)) {
        Tensor& ga = grad_slot(n.parents[0]);
        for (std::size_t j = 0; j < a.size(); ++j) ga[j] += g0 * b[j];
      }
      if (wants(1)) {
        Tensor& gb = grad_slot(n.parents[1]);
        for (std::size_t j = 0; j < b.size(); ++j) gb[j] += g0 * a[j];
      }
      return;
    }
    case Op::kStopGradient:
      return;
    case Op::kRowJacobian: {
      if (!wants(0)) return;
      const Tensor& x = value_of(n.parents[0]);
      Tensor& gx = grad_slot(n.parents[0]);
      const std::size_t m = x.rows();
      const std::size_t d = x.cols();
      const std::size_t out = n.value.cols();
      for (std::size_t r = 0; r < m; ++r) {
        const double* jac = n.aux.data() + r * out * d;
        for (std::size_t i = 0; i < out; ++i) {
          const double gi = g[r * out + i];
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] += jac[i * d + j] * gi;
          }
        }
      }
      return;
    }
  }
}

// ------------------------------------------------------------------- ops ----

Var matmul(const Var& a, const Var& b) {
  Tape& tape = a.tape();
  tape.check_owner(b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul shape mismatch: " + shape_string(av.shape()) +
                         " x " + shape_string(bv.shape()));
  }
  const auto m = static_cast<Eigen::Index>(av.rows());
  const auto k = static_cast<Eigen::Index>(av.cols());
  const auto c = static_cast<Eigen::Index>(bv.cols());
  Tape::Node n;
  n.op = Tape::Op::kMatMul;
  n.parents = {a.id(), b.id()};
  n.num_parents = 2;
  n.value = Tensor(Shape{av.rows(), bv.cols()});
  MutMap(n.value.data().data(), m, c).noalias() =
      ConstMap(av.data().data(), m, k) * ConstMap(bv.data().data(), k, c);
  n.requires_grad = tape.nodes_[a.id()].requires_grad || tape.nodes_[b.id()].requires_grad;
  return tape.push(std::move(n));
}

Var elementwise(const Var& a, const Var& b, ElementwiseMode mode) {
  Tape& tape = a.tape();
  tape.check_owner(b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool a_bcast = av.size() == 1 && bv.size() != 1;
  const bool b_bcast = bv.size() == 1 && av.size() != 1;
  if (!a_bcast && !b_bcast && av.shape() != bv.shape()) {
    throw DimensionError("elementwise shape mismatch: " + shape_string(av.shape()) +
                         " vs " + shape_string(bv.shape()));
  }
  Tape::Node n;
  n.parents = {a.id(), b.id()};
  n.num_parents = 2;
  n.value = Tensor(a_bcast ? bv.shape() : av.shape());
  const std::size_t size = n.value.size();
  for (std::size_t j = 0; j < size; ++j) {
    const double x = a_bcast ? av[0] : av[j];
    const double y = b_bcast ? bv[0] : bv[j];
    switch (mode) {
      case ElementwiseMode::kAdd:
        n.value[j] = x + y;
        break;
      case ElementwiseMode::kSub:
        n.value[j] = x - y;
        break;
      case ElementwiseMode::kMul:
        n.value[j] = x * y;
        break;
    }
  }
  switch (mode) {
    case ElementwiseMode::kAdd:
      n.op = Tape::Op::kAdd;
      break;
    case ElementwiseMode::kSub:
      n.op = Tape::Op::kSub;
      break;
    case ElementwiseMode::kMul:
      n.op = Tape::Op::kMul;
      break;
  }
  n.requires_grad = tape.nodes_[a.id()].requires_grad || tape.nodes_[b.id()].requires_grad;
  return tape.push(std::move(n));
}

Var scale(const Var& x, double factor) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  Tape::Node n;
  n.op = Tape::Op::kScale;
  n.parents = {x.id(), 0};
  n.num_parents = 1;
  n.scalar = factor;
  n.value = Tensor(xv.shape());
  for (std::size_t j = 0; j < xv.size(); ++j) n.value[j] = factor * xv[j];
  n.requires_grad = tape.nodes_[x.id()].requires_grad;
  return tape.push(std::move(n));
}

Var activation(const Var& x, Activation kind) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  Tape::Node n;
  n.parents = {x.id(), 0};
  n.num_parents = 1;
  n.value = Tensor(xv.shape());
  for (std::size_t j = 0; j < xv.size(); ++j) {
    const double v = xv[j];
    switch (kind) {
      case Activation::kSilu:
        n.value[j] = v * stable_sigmoid(v);
        break;
      case Activation::kTanh:
        n.value[j] = std::tanh(v);
        break;
      case Activation::kSigmoid:
        n.value[j] = stable_sigmoid(v);
        break;
      case Activation::kLog:
        if (!(v > 0.0)) {
          throw DomainError("log of non-positive entry " + std::to_string(v));
        }
        n.value[j] = std::log(v);
        break;
      case Activation::kLogSigmoid:
        n.value[j] = log_sigmoid_value(v);
        break;
    }
  }
  switch (kind) {
    case Activation::kSilu:
      n.op = Tape::Op::kSilu;
      break;
    case Activation::kTanh:
      n.op = Tape::Op::kTanh;
      break;
    case Activation::kSigmoid:
      n.op = Tape::Op::kSigmoid;
      break;
    case Activation::kLog:
      n.op = Tape::Op::kLog;
      break;
    case Activation::kLogSigmoid:
      n.op = Tape::Op::kLogSigmoid;
      break;
  }
  n.requires_grad = tape.nodes_[x.id()].requires_grad;
  return tape.push(std::move(n));
}

Var reduce(const Var& x, ReduceMode mode) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  Tape::Node n;
  n.parents = {x.id(), 0};
  n.num_parents = 1;
  double acc = 0.0;
  switch (mode) {
    case ReduceMode::kMean:
    case ReduceMode::kSum:
      for (double v : xv.data()) acc += v;
      if (mode == ReduceMode::kMean) {
        if (xv.size() == 0) throw DimensionError("mean of empty tensor");
        acc /= static_cast<double>(xv.size());
        n.op = Tape::Op::kMean;
      } else {
        n.op = Tape::Op::kSum;
      }
      break;
    case ReduceMode::kSqNorm:
      for (double v : xv.data()) acc += v * v;
      n.op = Tape::Op::kSqNorm;
      break;
  }
  n.value = Tensor::scalar(acc);
  n.requires_grad = tape.nodes_[x.id()].requires_grad;
  return tape.push(std::move(n));
}

Var dot(const Var& a, const Var& b) {
  Tape& tape = a.tape();
  tape.check_owner(b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("dot shape mismatch: " + shape_string(av.shape()) +
                         " vs " + shape_string(bv.shape()));
  }
  double acc = 0.0;
  for (std::size_t j = 0; j < av.size(); ++j) acc += av[j] * bv[j];
  Tape::Node n;
  n.op = Tape::Op::kDot;
  n.parents = {a.id(), b.id()};
  n.num_parents = 2;
  n.value = Tensor::scalar(acc);
  n.requires_grad = tape.nodes_[a.id()].requires_grad || tape.nodes_[b.id()].requires_grad;
  return tape.push(std::move(n));
}

Var stop_gradient(const Var& x) {
  Tape& tape = x.tape();
  Tape::Node n;
  n.op = Tape::Op::kStopGradient;
  n.parents = {x.id(), 0};
  n.num_parents = 1;
  n.value = x.value();
  return tape.push(std::move(n));
}

Var row_jacobian(const Var& x, Tensor value, std::vector<double> jacobians) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || value.rank() != 2 || value.rows() != xv.rows() ||
      jacobians.size() != xv.rows() * value.cols() * xv.cols()) {
    throw DimensionError("row_jacobian: inconsistent shapes " + shape_string(xv.shape()) +
                         " -> " + shape_string(value.shape()));
  }
  Tape::Node n;
  n.op = Tape::Op::kRowJacobian;
  n.parents = {x.id(), 0};
  n.num_parents = 1;
  n.value = std::move(value);
  n.aux = std::move(jacobians);
  n.requires_grad = tape.nodes_[x.id()].requires_grad;
  return tape.push(std::move(n));
}

}  // namespace sidlab::tg
