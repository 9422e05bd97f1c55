#pragma once

// Minimal dense reverse-mode automatic differentiation.
//
// Values live in `Tensor` (row-major doubles). Computations are recorded on a
// `Tape` as they run (define-by-run); `Tape::backward` walks the records in
// reverse and accumulates gradients into the `Parameter`s bound to the tape.
// A tape is single-use: build it, call backward once, throw it away.

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sidlab::tg {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Rank-2 helpers; a rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  // Value of a single-element tensor.
  double item() const;
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// A named trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v);
  void zero_grad();
};

enum class ElementwiseMode { kAdd, kSub, kMul };
enum class Activation { kSilu, kTanh, kSigmoid, kLog, kLogSigmoid };
enum class ReduceMode { kMean, kSum, kSqNorm };

// Whether parameter leaves bound to a tape collect gradients.
enum class ParamGrad { kTrack, kFreeze };

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as its tape lives.
class Var {
 public:
  Var() = default;
  // Valid until the next record is pushed onto the tape.
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const;
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that never receives a gradient.
  Var constant(Tensor value);
  // Leaf whose gradient can be read back with grad() after backward().
  Var input(Tensor value);
  // Leaf bound to a parameter. The parameter must outlive the tape and must
  // not be modified before backward() runs.
  Var param(Parameter& p, ParamGrad mode = ParamGrad::kTrack);

  // Reverse sweep from a single-element loss. Accumulates into bound
  // parameters' `grad`. May be called only once per tape.
  void backward(const Var& loss);

  // Gradient of the last backward() w.r.t. `v`; zeros if nothing reached it.
  Tensor grad(const Var& v) const;

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Drops every record so the tape can be reused.
  void reset();

 private:
  enum class Op : std::uint8_t {
    kLeaf,
    kMatMul,
    kAdd,
    kSub,
    kMul,
    kScale,
    kSilu,
    kTanh,
    kSigmoid,
    kLog,
    kLogSigmoid,
    kMean,
    kSum,
    kSqNorm,
    kDot,
    kStopGradient,
    kRowJacobian,
  };

  struct Node {
    Op op = Op::kLeaf;
    std::array<std::size_t, 2> parents{};
    std::uint8_t num_parents = 0;
    bool requires_grad = false;
    double scalar = 0.0;
    Tensor value;
    const Tensor* external = nullptr;  // parameter-backed leaf value
    Parameter* param = nullptr;        // set when gradients flow to a parameter
    std::vector<double> aux;           // op-specific cached data
  };

  const Tensor& value_of(std::size_t id) const;
  Var push(Node node);
  void check_owner(const Var& v) const;
  void check_open() const;
  void propagate(std::size_t id);
  Tensor& grad_slot(std::size_t id);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool consumed_ = false;

  friend class Var;
  friend Var matmul(const Var& a, const Var& b);
  friend Var elementwise(const Var& a, const Var& b, ElementwiseMode mode);
  friend Var scale(const Var& x, double factor);
  friend Var activation(const Var& x, Activation kind);
  friend Var reduce(const Var& x, ReduceMode mode);
  friend Var dot(const Var& a, const Var& b);
  friend Var stop_gradient(const Var& x);
  friend Var row_jacobian(const Var& x, Tensor value,
                          std::vector<double> jacobians);
};

// [m×k]·[k×n] → [m×n].
Var matmul(const Var& a, const Var& b);
// Pointwise op on equal shapes; a single-element operand broadcasts.
Var elementwise(const Var& a, const Var& b, ElementwiseMode mode);
inline Var add(const Var& a, const Var& b) {
  return elementwise(a, b, ElementwiseMode::kAdd);
}
inline Var sub(const Var& a, const Var& b) {
  return elementwise(a, b, ElementwiseMode::kSub);
}
inline Var mul(const Var& a, const Var& b) {
  return elementwise(a, b, ElementwiseMode::kMul);
}
Var scale(const Var& x, double factor);

Var activation(const Var& x, Activation kind);
inline Var silu(const Var& x) { return activation(x, Activation::kSilu); }
inline Var tanh(const Var& x) { return activation(x, Activation::kTanh); }
inline Var sigmoid(const Var& x) { return activation(x, Activation::kSigmoid); }
inline Var log(const Var& x) { return activation(x, Activation::kLog); }
// ln σ(x), evaluated without forming σ(x).
inline Var log_sigmoid(const Var& x) {
  return activation(x, Activation::kLogSigmoid);
}

Var reduce(const Var& x, ReduceMode mode);
inline Var mean(const Var& x) { return reduce(x, ReduceMode::kMean); }
inline Var sum(const Var& x) { return reduce(x, ReduceMode::kSum); }
inline Var sq_norm(const Var& x) { return reduce(x, ReduceMode::kSqNorm); }
Var dot(const Var& a, const Var& b);

// Identity forward, zero backward.
Var stop_gradient(const Var& x);

// Records an externally computed per-row map y_r = g(x_r). `value` is [m×n]
// and `jacobians` holds m row-major [n×d] blocks of ∂y_r/∂x_r for x of
// shape [m×d].
Var row_jacobian(const Var& x, Tensor value, std::vector<double> jacobians);

}  // namespace sidlab::tg
