#pragma once

// Reverse-mode automatic differentiation over dense arrays of doubles.
//
// A Tape records operations in creation order (define-by-run); creation order
// is a valid topological order, so backward() is a single reverse sweep that
// visits each record once. Trainable weights live in Parameter objects that
// outlive any tape; a tape references them and accumulates into their
// gradient buffers on backward().

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace permflow {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Row-major array of 64-bit reals. A scalar has an empty shape.
class DenseArray {
 public:
  DenseArray() : shape_{}, values_(1, 0.0) {}
  explicit DenseArray(Shape shape, double fill = 0.0);
  DenseArray(Shape shape, std::vector<double> values);

  static DenseArray scalar(double value) { return DenseArray(Shape{}, {value}); }
  static DenseArray matrix(std::size_t rows, std::size_t cols,
                           std::initializer_list<double> values);
  static DenseArray vector(std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool is_scalar() const noexcept { return values_.size() == 1 && shape_.empty(); }

  // Matrix view helpers; valid for rank-2 arrays.
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }
  double item() const;

  DenseArray reshaped(Shape shape) const;
  void fill(double value);
  bool all_finite() const noexcept;

  friend bool operator==(const DenseArray&, const DenseArray&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

// A trainable weight. Its gradient always has the value's shape.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, DenseArray value)
      : name(std::move(name)), value(std::move(value)), grad(this->value.shape()) {}

  std::string name;
  DenseArray value;
  DenseArray grad;

  void zero_grad() { grad = DenseArray(value.shape()); }
};

void zero_grads(std::span<Parameter* const> params);

class Tape;

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  const DenseArray& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t index() const noexcept { return index_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  // With record == false no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var constant(DenseArray value);
  // Leaf whose gradient is kept on the tape (read it back with grad()).
  Var variable(DenseArray value);
  // Leaf bound to a Parameter; backward() accumulates into param.grad.
  Var param(Parameter& param);

  // Accumulates d(root)/d(leaf) into every reachable Parameter. Calling it
  // again on the same tape adds the gradients a second time.
  void backward(Var root);

  const DenseArray& value(std::size_t index) const;
  // Gradient of the last backward() root with respect to a node; zeros if
  // the node was not reached.
  const DenseArray& grad(Var v);

  // Low-level interface used by operation implementations.
  std::size_t push(DenseArray value, bool requires_grad, BackwardFn backward);
  bool requires_grad(std::size_t index) const { return nodes_[index].requires_grad; }
  DenseArray& grad_buffer(std::size_t index);
  const DenseArray& upstream(std::size_t index) const { return nodes_[index].grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    DenseArray value;
    const DenseArray* borrowed = nullptr;
    DenseArray grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  bool record_;
  std::deque<Node> nodes_;  // stable references across push()
};

inline const DenseArray& Var::value() const { return tape_->value(index_); }

// ---- operations ---------------------------------------------------------

// [m x k] x [k x n] -> [m x n]
Var matmul(Var a, Var b);

// Elementwise; operands must have equal shapes or one must be a scalar.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var tanh(Var a);
Var exp(Var a);
// Throws DomainError on any non-positive input.
Var log(Var a);
Var square(Var a);
Var scale(Var a, double factor);

// Row broadcasts: x is [m x n], row is [n] or [1 x n].
Var add_row(Var x, Var row);
Var mul_row(Var x, Var row);

// Reductions.
Var sum(Var a);
Var mean(Var a);
// [m x n] -> [m]
Var row_sum(Var a);

Var reshape(Var a, Shape shape);

// Mean over rows of -log softmax(logits[r])[labels[r]]; logits is [m x P].
// The gradient is (softmax - one_hot) / m.
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);
// Single example: logits is [P].
Var softmax_cross_entropy(Var logits, std::size_t label);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }

// Raw kernels, exposed for the benchmarks. All are row-major.
namespace kernels {
// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);
// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);
}  // namespace kernels

}  // namespace permflow
