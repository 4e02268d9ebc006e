#include "permflow/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include <fmt/format.h>

#include "permflow/errors.hpp"

namespace permflow {

std::string shape_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, "x"));
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

DenseArray::DenseArray(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

DenseArray::DenseArray(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != shape_size(shape_)) {
    throw DimensionError(fmt::format("shape {} holds {} values, got {}", shape_string(shape_),
                                     shape_size(shape_), values_.size()));
  }
}

DenseArray DenseArray::matrix(std::size_t rows, std::size_t cols,
                              std::initializer_list<double> values) {
  return DenseArray({rows, cols}, std::vector<double>(values));
}

DenseArray DenseArray::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return DenseArray({n}, std::move(values));
}

double DenseArray::item() const {
  if (values_.size() != 1) {
    throw DimensionError(fmt::format("item() on non-scalar shape {}", shape_string(shape_)));
  }
  return values_[0];
}

DenseArray DenseArray::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size()) {
    throw DimensionError(fmt::format("cannot reshape {} to {}", shape_string(shape_),
                                     shape_string(shape)));
  }
  return DenseArray(std::move(shape), values_);
}

void DenseArray::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

bool DenseArray::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

// ---- tape -----------------------------------------------------------------

Var Tape::constant(DenseArray value) {
  return Var(this, push(std::move(value), false, nullptr));
}

Var Tape::variable(DenseArray value) {
  return Var(this, push(std::move(value), record_, nullptr));
}

Var Tape::param(Parameter& param) {
  Node node;
  node.borrowed = &param.value;
  node.requires_grad = record_;
  node.param = &param;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

std::size_t Tape::push(DenseArray value, bool requires_grad, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = record_ && requires_grad;
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

const DenseArray& Tape::value(std::size_t index) const {
  const Node& node = nodes_[index];
  return node.borrowed != nullptr ? *node.borrowed : node.value;
}

DenseArray& Tape::grad_buffer(std::size_t index) {
  Node& node = nodes_[index];
  if (!node.has_grad) {
    node.grad = DenseArray(value(index).shape());
    node.has_grad = true;
  }
  return node.grad;
}

const DenseArray& Tape::grad(Var v) { return grad_buffer(v.index()); }

void Tape::backward(Var root) {
  if (root.valid() && &root.tape() != this) {
    throw ContractError("backward: root belongs to a different tape");
  }
  if (!record_) throw ContractError("backward: tape was created in inference mode");
  if (value(root.index()).size() != 1) {
    throw ContractError(fmt::format("backward: root must be a scalar, got shape {}",
                                    shape_string(value(root.index()).shape())));
  }
  for (Node& node : nodes_) node.has_grad = false;
  if (!nodes_[root.index()].requires_grad) return;

  grad_buffer(root.index()).fill(1.0);
  for (std::size_t i = root.index() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad) continue;
    if (node.backward) node.backward(*this, i);
    if (node.param != nullptr) {
      auto dst = node.param->grad.values();
      const auto src = node.grad.values();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
}

// ---- kernels --------------------------------------------------------------

namespace kernels {

namespace {

// c_row += sum_t coef[t] * rows[t][0..n), four rows per pass.
void axpy_rows(const double* coef, const double* const* rows, std::size_t count, double* __restrict crow,
               std::size_t n) {
  std::size_t t = 0;
  for (; t + 4 <= count; t += 4) {
    const double a0 = coef[t], a1 = coef[t + 1], a2 = coef[t + 2], a3 = coef[t + 3];
    const double* __restrict b0 = rows[t];
    const double* __restrict b1 = rows[t + 1];
    const double* __restrict b2 = rows[t + 2];
    const double* __restrict b3 = rows[t + 3];
    for (std::size_t j = 0; j < n; ++j) crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
  }
  for (; t < count; ++t) {
    const double a0 = coef[t];
    const double* __restrict b0 = rows[t];
    for (std::size_t j = 0; j < n; ++j) crow[j] += a0 * b0[j];
  }
}

}  // namespace

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  std::vector<double> coef(k);
  std::vector<const double*> rows(k);
  for (std::size_t i = 0; i < m; ++i) {
    // Masked inputs are half zeros; only the nonzero terms are accumulated.
    std::size_t count = 0;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      coef[count] = aip;
      rows[count++] = b + p * n;
    }
    axpy_rows(coef.data(), rows.data(), count, c + i * n, n);
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* __restrict arow = a + i * n;
    for (std::size_t q = 0; q < k; ++q) {
      const double* __restrict brow = b + q * n;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        s0 += arow[j] * brow[j];
        s1 += arow[j + 1] * brow[j + 1];
        s2 += arow[j + 2] * brow[j + 2];
        s3 += arow[j + 3] * brow[j + 3];
      }
      for (; j < n; ++j) s0 += arow[j] * brow[j];
      c[i * k + q] += (s0 + s1) + (s2 + s3);
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  // c[p, :] += sum_i a[i, p] * b[i, :]; rows of c are visited once each.
  std::vector<double> coef(m);
  std::vector<const double*> rows(m);
  for (std::size_t p = 0; p < k; ++p) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      coef[count] = aip;
      rows[count++] = b + i * n;
    }
    axpy_rows(coef.data(), rows.data(), count, c + p * n, n);
  }
}

}  // namespace kernels

// ---- operations -----------------------------------------------------------

namespace {

bool needs_grad(Var a) { return a.tape().requires_grad(a.index()); }
bool needs_grad(Var a, Var b) { return needs_grad(a) || needs_grad(b); }

void check_same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(fmt::format("{}: operands on different tapes", op));
}

void require_matrix(const DenseArray& x, const char* op) {
  if (x.rank() != 2) {
    throw DimensionError(fmt::format("{}: expected a matrix, got shape {}", op,
                                     shape_string(x.shape())));
  }
}

// Adds g into the gradient of `target`, reducing to a scalar when the
// target was broadcast.
void accumulate(Tape& t, std::size_t target, std::span<const double> g) {
  if (!t.requires_grad(target)) return;
  DenseArray& dst = t.grad_buffer(target);
  if (dst.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  } else {
    double total = 0.0;
    for (const double v : g) total += v;
    dst[0] += total;
  }
}

enum class Broadcast { kEqual, kLeftScalar, kRightScalar };

Broadcast broadcast_kind(const DenseArray& a, const DenseArray& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kEqual;
  if (a.is_scalar()) return Broadcast::kLeftScalar;
  if (b.is_scalar()) return Broadcast::kRightScalar;
  throw DimensionError(fmt::format("{}: shapes {} and {} are not broadcastable", op,
                                   shape_string(a.shape()), shape_string(b.shape())));
}

template <typename F>
DenseArray binary_values(const DenseArray& a, const DenseArray& b, Broadcast kind, F f) {
  const DenseArray& like = kind == Broadcast::kLeftScalar ? b : a;
  DenseArray out(like.shape());
  const std::size_t n = out.size();
  switch (kind) {
    case Broadcast::kEqual:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
      break;
    case Broadcast::kLeftScalar:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(a[0], b[i]);
      break;
    case Broadcast::kRightScalar:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[0]);
      break;
  }
  return out;
}

template <typename F>
Var unary(Var a, F f, Tape::BackwardFn backward) {
  const DenseArray& av = a.value();
  DenseArray out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  Tape& t = a.tape();
  return Var(&t, t.push(std::move(out), needs_grad(a), std::move(backward)));
}

std::size_t row_width(const DenseArray& x, const DenseArray& row, const char* op) {
  require_matrix(x, op);
  const bool ok = (row.rank() == 1 && row.size() == x.cols()) ||
                  (row.rank() == 2 && row.rows() == 1 && row.cols() == x.cols());
  if (!ok) {
    throw DimensionError(fmt::format("{}: row shape {} does not match matrix {}", op,
                                     shape_string(row.shape()), shape_string(x.shape())));
  }
  return x.cols();
}

}  // namespace

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw DimensionError(fmt::format("matmul: inner extents differ for {} x {}",
                                     shape_string(av.shape()), shape_string(bv.shape())));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  DenseArray out({m, n});
  kernels::gemm_nn(av.data(), bv.data(), out.data(), m, k, n);

  const std::size_t ia = a.index(), ib = b.index();
  Tape& t = a.tape();
  return Var(&t, t.push(std::move(out), needs_grad(a, b), [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const DenseArray& g = t.upstream(self);
    if (t.requires_grad(ia)) {
      kernels::gemm_nt(g.data(), t.value(ib).data(), t.grad_buffer(ia).data(), m, n, k);
    }
    if (t.requires_grad(ib)) {
      kernels::gemm_tn(t.value(ia).data(), g.data(), t.grad_buffer(ib).data(), m, k, n);
    }
  }));
}

Var add(Var a, Var b) {
  check_same_tape(a, b, "add");
  const Broadcast kind = broadcast_kind(a.value(), b.value(), "add");
  DenseArray out = binary_values(a.value(), b.value(), kind, std::plus<>());
  const std::size_t ia = a.index(), ib = b.index();
  Tape& t = a.tape();
  return Var(&t, t.push(std::move(out), needs_grad(a, b), [ia, ib](Tape& t, std::size_t self) {
    const auto g = t.upstream(self).values();
    accumulate(t, ia, g);
    accumulate(t, ib, g);
  }));
}

Var sub(Var a, Var b) { return add(a, neg(b)); }

Var mul(Var a, Var b) {
  check_same_tape(a, b, "mul");
  const Broadcast kind = broadcast_kind(a.value(), b.value(), "mul");
  DenseArray out = binary_values(a.value(), b.value(), kind, std::multiplies<>());
  const std::size_t ia = a.index(), ib = b.index();
  Tape& t = a.tape();
  return Var(&t, t.push(std::move(out), needs_grad(a, b), [ia, ib, kind](Tape& t, std::size_t self) {
    const DenseArray& g = t.upstream(self);
    const DenseArray& av = t.value(ia);
    const DenseArray& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      const DenseArray ga = binary_values(g, bv, kind == Broadcast::kLeftScalar ? Broadcast::kEqual : kind,
                                          std::multiplies<>());
      accumulate(t, ia, ga.values());
    }
    if (t.requires_grad(ib)) {
      const Broadcast gk = kind == Broadcast::kRightScalar ? Broadcast::kEqual
                           : kind == Broadcast::kLeftScalar ? Broadcast::kRightScalar
                                                            : Broadcast::kEqual;
      const DenseArray gb = binary_values(g, av, gk, std::multiplies<>());
      accumulate(t, ib, gb.values());
    }
  }));
}

Var neg(Var a) {
  const std::size_t ia = a.index();
  return unary(a, [](double x) { return -x; }, [ia](Tape& t, std::size_t self) {
    const DenseArray& g = t.upstream(self);
    if (!t.requires_grad(ia)) return;
    DenseArray& dst = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
  });
}

Var scale(Var a, double factor) {
  const std::size_t ia = a.index();
  return unary(a, [factor](double x) { return factor * x; }, [ia, factor](Tape& t, std::size_t self) {
    const DenseArray& g = t.upstream(self);
    if (!t.requires_grad(ia)) return;
    DenseArray& dst = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += factor * g[i];
  });
}

Var tanh(Var a) {
  const std::size_t ia = a.index();
  return unary(a, [](double x) { return std::tanh(x); }, [ia](Tape& t, std::size_t self) {
    const DenseArray& g = t.upstream(self);
    const DenseArray& y = t.value(self);
    if (!t.requires_grad(ia)) return;
    DenseArray& dst = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var exp(Var a) {
  const std::size_t ia = a.index();
  return unary(a, [](double x) { return std::exp(x); }, [ia](Tape& t, std::size_t self) {
    const DenseArray& g = t.upstream(self);
    const DenseArray& y = t.value(self);
    if (!t.requires_grad(ia)) return;
    DenseArray& dst = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * y[i];
  });
}

Var log(Var a) {
  for (const double x : a.value().values()) {
    if (!(x > 0.0)) throw DomainError(fmt::format("log: non-positive argument {}", x));
  }
  const std::size_t ia = a.index();
  return unary(a, [](double x) { return std::log(x); }, [ia](Tape& t, std::size_t self) {
    const DenseArray& g = t.upstream(self);
    const DenseArray& x = t.value(ia);
    if (!t.requires_grad(ia)) return;
    DenseArray& dst = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] / x[i];
  });
}

Var square(Var a) {
  const std::size_t ia = a.index();
  return unary(a, [](double x) { return x * x; }, [ia](Tape& t, std::size_t self) {
    const DenseArray& g = t.upstream(self);
    const DenseArray& x = t.value(ia);
    if (!t.requires_grad(ia)) return;
    DenseArray& dst = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += 2.0 * x[i] * g[i];
  });
}

Var add_row(Var x, Var row) {
  check_same_tape(x, row, "add_row");
  const DenseArray& xv = x.value();
  const DenseArray& rv = row.value();
  const std::size_t n = row_width(xv, rv, "add_row");
  const std::size_t m = xv.rows();
  DenseArray out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + rv[j];
  }
  const std::size_t ix = x.index(), ir = row.index();
  Tape& t = x.tape();
  return Var(&t, t.push(std::move(out), needs_grad(x, row), [ix, ir, m, n](Tape& t, std::size_t self) {
    const DenseArray& g = t.upstream(self);
    accumulate(t, ix, g.values());
    if (t.requires_grad(ir)) {
      DenseArray& dst = t.grad_buffer(ir);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) dst[j] += g[i * n + j];
      }
    }
  }));
}

Var mul_row(Var x, Var row) {
  check_same_tape(x, row, "mul_row");
  const DenseArray& xv = x.value();
  const DenseArray& rv = row.value();
  const std::size_t n = row_width(xv, rv, "mul_row");
  const std::size_t m = xv.rows();
  DenseArray out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * rv[j];
  }
  const std::size_t ix = x.index(), ir = row.index();
  Tape& t = x.tape();
  return Var(&t, t.push(std::move(out), needs_grad(x, row), [ix, ir, m, n](Tape& t, std::size_t self) {
    const DenseArray& g = t.upstream(self);
    const DenseArray& xv = t.value(ix);
    const DenseArray& rv = t.value(ir);
    if (t.requires_grad(ix)) {
      DenseArray& dst = t.grad_buffer(ix);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += g[i * n + j] * rv[j];
      }
    }
    if (t.requires_grad(ir)) {
      DenseArray& dst = t.grad_buffer(ir);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) dst[j] += g[i * n + j] * xv[i * n + j];
      }
    }
  }));
}

Var sum(Var a) {
  double total = 0.0;
  for (const double v : a.value().values()) total += v;
  const std::size_t ia = a.index();
  Tape& t = a.tape();
  return Var(&t, t.push(DenseArray::scalar(total), needs_grad(a), [ia](Tape& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    const double g = t.upstream(self)[0];
    for (double& d : t.grad_buffer(ia).values()) d += g;
  }));
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var row_sum(Var a) {
  const DenseArray& av = a.value();
  require_matrix(av, "row_sum");
  const std::size_t m = av.rows(), n = av.cols();
  DenseArray out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += av[i * n + j];
    out[i] = s;
  }
  const std::size_t ia = a.index();
  Tape& t = a.tape();
  return Var(&t, t.push(std::move(out), needs_grad(a), [ia, m, n](Tape& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    const DenseArray& g = t.upstream(self);
    DenseArray& dst = t.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += g[i];
    }
  }));
}

Var reshape(Var a, Shape shape) {
  DenseArray out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.index();
  Tape& t = a.tape();
  return Var(&t, t.push(std::move(out), needs_grad(a), [ia](Tape& t, std::size_t self) {
    accumulate(t, ia, t.upstream(self).values());
  }));
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const DenseArray& lv = logits.value();
  require_matrix(lv, "softmax_cross_entropy");
  const std::size_t m = lv.rows(), classes = lv.cols();
  if (classes < 2) throw ContractError("softmax_cross_entropy: need at least 2 classes");
  if (labels.size() != m) {
    throw DimensionError(fmt::format("softmax_cross_entropy: {} labels for {} rows",
                                     labels.size(), m));
  }
  auto probs = std::make_shared<std::vector<double>>(m * classes);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] >= classes) {
      throw IndexError(fmt::format("softmax_cross_entropy: label {} out of range [0, {})",
                                   labels[i], classes));
    }
    const double* row = lv.data() + i * classes;
    const double peak = *std::max_element(row, row + classes);
    double denom = 0.0;
    double* prow = probs->data() + i * classes;
    for (std::size_t j = 0; j < classes; ++j) {
      prow[j] = std::exp(row[j] - peak);
      denom += prow[j];
    }
    for (std::size_t j = 0; j < classes; ++j) prow[j] /= denom;
    total += std::log(denom) - (row[labels[i]] - peak);
  }
  const double loss = total / static_cast<double>(m);

  std::vector<std::size_t> label_copy(labels.begin(), labels.end());
  const std::size_t il = logits.index();
  Tape& t = logits.tape();
  return Var(&t, t.push(DenseArray::scalar(loss), needs_grad(logits),
                        [il, m, classes, probs, label_copy = std::move(label_copy)](Tape& t, std::size_t self) {
                          if (!t.requires_grad(il)) return;
                          const double g = t.upstream(self)[0] / static_cast<double>(m);
                          DenseArray& dst = t.grad_buffer(il);
                          for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t j = 0; j < classes; ++j) {
                              const double onehot = j == label_copy[i] ? 1.0 : 0.0;
                              dst[i * classes + j] += g * ((*probs)[i * classes + j] - onehot);
                            }
                          }
                        }));
}

Var softmax_cross_entropy(Var logits, std::size_t label) {
  const DenseArray& lv = logits.value();
  if (lv.rank() != 1) {
    throw DimensionError(fmt::format("softmax_cross_entropy: expected logits [P], got {}",
                                     shape_string(lv.shape())));
  }
  const std::size_t single[] = {label};
  return softmax_cross_entropy(reshape(logits, {1, lv.size()}), single);
}

}  // namespace permflow
