#include <doctest.h>

#include <cmath>
#include <functional>

#include "oracles.hpp"
#include "permflow/diffcore.hpp"
#include "permflow/errors.hpp"
#include "permflow/random.hpp"

using namespace permflow;

namespace {

DenseArray random_array(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  DenseArray a(std::move(shape));
  for (double& v : a.values()) v = rng.uniform(lo, hi);
  return a;
}

// Builds a scalar loss from leaf parameters and checks its gradient against
// central differences.
double gradient_error(std::vector<Parameter>& params, const std::function<Var(Tape&, std::vector<Var>&)>& build) {
  const auto evaluate = [&] {
    Tape tape(false);
    std::vector<Var> leaves;
    for (Parameter& p : params) leaves.push_back(tape.param(p));
    return build(tape, leaves).value().item();
  };
  Tape tape;
  std::vector<Var> leaves;
  for (Parameter& p : params) {
    p.zero_grad();
    leaves.push_back(tape.param(p));
  }
  tape.backward(build(tape, leaves));
  double worst = 0.0;
  for (Parameter& p : params) {
    const auto numeric = oracle::numeric_gradient(evaluate, p.value.values());
    worst = std::max(worst, oracle::max_relative_error(p.grad.values(), numeric));
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul values") {
  Tape tape(false);
  auto id = tape.constant(DenseArray::matrix(2, 2, {1, 0, 0, 1}));
  auto v = tape.constant(DenseArray::matrix(2, 1, {3, 4}));
  CHECK(matmul(id, v).value() == DenseArray::matrix(2, 1, {3, 4}));
  auto row = tape.constant(DenseArray::matrix(1, 2, {1, 2}));
  CHECK(matmul(row, v).value().item() == 11.0);
  CHECK_THROWS_AS(matmul(v, v), DimensionError);
}

TEST_CASE("gradient of sum(a x b) with respect to a is b transposed") {
  Rng rng(1);
  std::vector<Parameter> params{Parameter("a", random_array({3, 4}, rng)), Parameter("b", random_array({4, 2}, rng))};
  Tape tape;
  Var a = tape.param(params[0]);
  Var b = tape.param(params[1]);
  tape.backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(params[0].grad.at(i, k) == doctest::Approx(params[1].value.at(k, 0) + params[1].value.at(k, 1)).epsilon(1e-12));
    }
  }
  const auto f = [&] {
    Tape t(false);
    return sum(matmul(t.param(params[0]), t.param(params[1]))).value().item();
  };
  const auto numeric = oracle::numeric_gradient(f, params[0].value.values(), 1e-6);
  CHECK(oracle::max_relative_error(params[0].grad.values(), numeric) < 1e-8);
}

TEST_CASE("elementwise values") {
  Tape tape(false);
  CHECK(tanh(tape.constant(DenseArray::scalar(0.0))).value().item() == 0.0);
  CHECK(exp(tape.constant(DenseArray::scalar(1.0))).value().item() == doctest::Approx(2.718281828459045).epsilon(1e-15));
  CHECK_THROWS_AS(log(tape.constant(DenseArray::scalar(0.0))), DomainError);
  CHECK_THROWS_AS(log(tape.constant(DenseArray::scalar(-1.0))), DomainError);
}

TEST_CASE("tanh derivative at 0.5") {
  Parameter p("x", DenseArray::scalar(0.5));
  Tape tape;
  tape.backward(tanh(tape.param(p)));
  const double expected = 1.0 - std::tanh(0.5) * std::tanh(0.5);
  CHECK(p.grad.item() == doctest::Approx(expected).epsilon(1e-14));
  CHECK(p.grad.item() == doctest::Approx(0.786448).epsilon(1e-6));
  const auto f = [&] {
    Tape t(false);
    return tanh(t.param(p)).value().item();
  };
  const auto numeric = oracle::numeric_gradient(f, p.value.values(), 1e-6);
  CHECK(std::abs(numeric[0] - expected) < 1e-8);
}

TEST_CASE("softmax cross entropy anchors") {
  Tape tape(false);
  const DenseArray uniform({4000}, 0.0);
  CHECK(softmax_cross_entropy(tape.constant(uniform), 17).value().item() == doctest::Approx(std::log(4000.0)).epsilon(1e-12));
  CHECK(softmax_cross_entropy(tape.constant(DenseArray::vector({2.0, 0.0})), 0).value().item() ==
        doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-12));
  CHECK(softmax_cross_entropy(tape.constant(DenseArray::vector({2.0, 0.0})), 0).value().item() ==
        doctest::Approx(0.126928).epsilon(1e-6));
  const double big = softmax_cross_entropy(tape.constant(DenseArray::vector({1000.0, 0.0})), 0).value().item();
  CHECK(std::isfinite(big));
  CHECK(big == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS_AS(softmax_cross_entropy(tape.constant(DenseArray::vector({1.0, 0.0})), 2), IndexError);
}

TEST_CASE("backward basics") {
  Parameter a("a", DenseArray::vector({1.0, -2.0, 3.0}));
  Parameter b("b", DenseArray::scalar(3.0));
  {
    Tape tape;
    tape.backward(sum(tape.param(a)));
    for (const double g : a.grad.values()) CHECK(g == 1.0);
  }
  {
    Tape tape;
    tape.backward(square(tape.param(b)));
    CHECK(b.grad.item() == 6.0);
  }
  Tape tape;
  CHECK_THROWS_AS(tape.backward(tape.param(a)), ContractError);
  Tape inference(false);
  CHECK_THROWS_AS(inference.backward(sum(inference.param(a))), ContractError);
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
  Parameter p("p", DenseArray::scalar(2.0));
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    tape.backward(square(tape.param(p)));
  }
  CHECK(p.grad.item() == 8.0);
  p.zero_grad();
  CHECK(p.grad.item() == 0.0);
}

TEST_CASE("a reused node receives the sum of its gradients") {
  Parameter p("p", DenseArray::scalar(1.5));
  Tape tape;
  Var x = tape.param(p);
  tape.backward(add(mul(x, x), x));
  CHECK(p.grad.item() == doctest::Approx(2 * 1.5 + 1).epsilon(1e-15));
}

TEST_CASE("every operation matches central differences") {
  Rng rng(42);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Parameter> p{Parameter("a", random_array({3, 4}, rng)), Parameter("b", random_array({3, 4}, rng)),
                             Parameter("w", random_array({4, 2}, rng)), Parameter("r", random_array({4}, rng)),
                             Parameter("s", DenseArray::scalar(rng.uniform(0.5, 1.5)))};
    const auto positive = [](Var v) { return add(square(v), v.tape().constant(DenseArray::scalar(0.5))); };
    const std::vector<std::pair<const char*, std::function<Var(Tape&, std::vector<Var>&)>>> cases{
        {"matmul", [](Tape&, auto& v) { return sum(tanh(matmul(v[0], v[2]))); }},
        {"add", [](Tape&, auto& v) { return sum(square(add(v[0], v[1]))); }},
        {"sub", [](Tape&, auto& v) { return sum(square(sub(v[0], v[1]))); }},
        {"mul", [](Tape&, auto& v) { return sum(mul(v[0], v[1])); }},
        {"scalar broadcast", [](Tape&, auto& v) { return sum(square(mul(v[0], v[4]))); }},
        {"neg", [](Tape&, auto& v) { return sum(mul(neg(v[0]), v[1])); }},
        {"tanh", [](Tape&, auto& v) { return sum(tanh(v[0])); }},
        {"exp", [](Tape&, auto& v) { return sum(exp(v[0])); }},
        {"log", [&](Tape&, auto& v) { return sum(log(positive(v[0]))); }},
        {"square", [](Tape&, auto& v) { return sum(mul(square(v[0]), v[1])); }},
        {"scale", [](Tape&, auto& v) { return sum(square(scale(v[0], -2.5))); }},
        {"add_row", [](Tape&, auto& v) { return sum(square(add_row(v[0], v[3]))); }},
        {"mul_row", [](Tape&, auto& v) { return sum(square(mul_row(v[0], v[3]))); }},
        {"mean", [](Tape&, auto& v) { return mean(square(v[0])); }},
        {"row_sum", [](Tape&, auto& v) { return sum(square(row_sum(v[0]))); }},
        {"reshape", [](Tape&, auto& v) { return sum(tanh(matmul(reshape(v[0], {4, 3}), v[1]))); }},
        {"operators", [](Tape&, auto& v) { return sum(-(v[0] * v[1]) + v[0] - v[1]); }},
        {"softmax_cross_entropy",
         [](Tape&, auto& v) {
           const std::vector<std::size_t> labels{1, 0, 1};
           return softmax_cross_entropy(matmul(v[0], v[2]), labels);
         }},
    };
    for (const auto& [name, build] : cases) {
      CAPTURE(name);
      CHECK(gradient_error(p, build) < 1e-5);
    }
  }
}

TEST_CASE("shape errors") {
  Tape tape(false);
  auto a = tape.constant(DenseArray({2, 3}));
  auto b = tape.constant(DenseArray({3, 2}));
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(add_row(a, tape.constant(DenseArray({2}))), DimensionError);
  CHECK_THROWS_AS(reshape(a, {4, 2}), DimensionError);
}

TEST_CASE("gemm kernels agree with a naive triple loop") {
  Rng rng(3);
  const std::size_t m = 5, k = 7, n = 6;
  DenseArray a = random_array({m, k}, rng), b = random_array({k, n}, rng);
  a.at(1, 2) = 0.0;
  a.at(3, 0) = 0.0;
  DenseArray c({m, n});
  kernels::gemm_nn(a.data(), b.data(), c.data(), m, k, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-13));
    }
  }
}
