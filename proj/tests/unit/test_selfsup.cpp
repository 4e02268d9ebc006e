#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "oracles.hpp"
#include "permflow/errors.hpp"
#include "permflow/random.hpp"
#include "permflow/selfsup.hpp"

using namespace permflow;

namespace {

std::vector<std::vector<int>> as_ints(const std::vector<Permutation>& perms) {
  std::vector<std::vector<int>> out;
  for (const auto& p : perms) {
    std::vector<int> v;
    for (const auto k : p.mapping()) v.push_back(static_cast<int>(k));
    out.push_back(v);
  }
  return out;
}

Permutation random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> m(n);
  std::iota(m.begin(), m.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(m));
  return Permutation(m);
}

}  // namespace

TEST_CASE("permutation validation") {
  CHECK_THROWS_AS(Permutation({0, 0, 1}), ContractError);
  CHECK_THROWS_AS(Permutation({0, 3, 1}), ContractError);
  const Permutation p({2, 0, 1});
  CHECK(p.inverse().inverse() == p);
  CHECK_FALSE(p.is_identity());
  CHECK(Permutation::identity(4).is_identity());
}

TEST_CASE("set score worked examples") {
  const std::vector<Permutation> single{Permutation::identity(3)};
  CHECK(score_set(single) == 0);
  const std::vector<Permutation> pair{Permutation({0, 1, 2}), Permutation({2, 1, 0})};
  CHECK(score_set(pair) == 12);
  CHECK(oracle::set_score(as_ints(pair)) == 12);
}

TEST_CASE("set score matches the brute-force sum") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(4);
    const std::size_t count = 1 + rng.uniform_index(4);
    std::vector<Permutation> set;
    for (std::size_t i = 0; i < count; ++i) set.push_back(random_permutation(n, rng));
    CHECK(score_set(set) == oracle::set_score(as_ints(set)));
  }
}

TEST_CASE("generate_set is deterministic and valid") {
  const PermutationSet a = generate_set(9, 10, 10, 1);
  const PermutationSet b = generate_set(9, 10, 10, 1);
  REQUIRE(a.size() == 10);
  CHECK(a.permutations() == b.permutations());
  std::vector<Permutation> sorted = a.permutations();
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  CHECK(a.score() == score_set(a.permutations()));
}

TEST_CASE("n=3, P=6 gives the whole symmetric group") {
  const PermutationSet s = generate_set(3, 6, 10, 4);
  std::vector<Permutation> sorted = s.permutations();
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> m{0, 1, 2};
  std::size_t i = 0;
  do {
    CHECK(sorted[i++] == Permutation(m));
  } while (std::next_permutation(m.begin(), m.end()));
  CHECK_THROWS_AS(generate_set(3, 7, 10, 4), InfeasibleError);
  CHECK_THROWS_AS(generate_set(3, 1, 10, 4), ConfigError);
}

TEST_CASE("greedy selection beats random subsets on average") {
  const PermutationSet greedy = generate_set(5, 4, 10, 8);
  Rng rng(9);
  double total = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Permutation> set;
    while (set.size() < 4) {
      Permutation p = random_permutation(5, rng);
      if (std::find(set.begin(), set.end(), p) == set.end()) set.push_back(p);
    }
    total += static_cast<double>(score_set(set));
  }
  CHECK(static_cast<double>(greedy.score()) >= total / 100.0);
}

TEST_CASE("permutation set file round trip") {
  const PermutationSet s = generate_set(6, 12, 10, 3);
  std::stringstream buf;
  write_permutation_set(buf, s);
  const PermutationSet back = read_permutation_set(buf);
  CHECK(back.permutations() == s.permutations());
  CHECK(back.score() == s.score());
  CHECK(back.seed() == 3);

  std::string text = buf.str();
  text.insert(text.find("D=") + 2, "9");
  std::stringstream bad(text);
  CHECK_THROWS_AS(read_permutation_set(bad), DataError);
}

TEST_CASE("apply_permutation") {
  // rows (a, b) and (c, d) with a swap become b, a, d, c
  const DenseArray w = DenseArray::matrix(2, 2, {1, 2, 3, 4});
  CHECK(apply_permutation(w, Permutation({1, 0})).values()[0] == 2);
  const DenseArray swapped = apply_permutation(w, Permutation({1, 0}));
  CHECK(std::vector<double>(swapped.values().begin(), swapped.values().end()) == std::vector<double>{2, 1, 4, 3});
  CHECK(apply_permutation(w, Permutation::identity(2)).values()[3] == 4);

  Rng rng(1);
  DenseArray win({50, 5});
  for (double& v : win.values()) v = rng.uniform01();
  const Permutation p = random_permutation(5, rng);
  const DenseArray there = apply_permutation(win, p);
  const DenseArray back = apply_permutation(there.reshaped({50, 5}), p.inverse());
  CHECK(std::equal(back.values().begin(), back.values().end(), win.values().begin()));
}

TEST_CASE("zero head gives ln P for any batch") {
  for (const std::size_t classes : {4000ul, 8000ul, 10000ul}) {
    FlowModel model(FlowConfig{.input_dim = 4, .num_layers = 2, .hidden_units = 4, .zero_init_output = false}, 1);
    SelfSupHead head(4, classes, 0, true);
    Rng rng(2);
    DenseArray batch({3, 4});
    for (double& v : batch.values()) v = rng.uniform01();
    const std::vector<std::size_t> labels{0, classes / 2, classes - 1};
    Tape tape(false);
    const double loss = selfsup_loss(tape, model, head, tape.constant(batch), labels).value().item();
    CHECK(std::abs(loss - std::log(static_cast<double>(classes))) < 1e-9);
  }
}

TEST_CASE("selfsup loss is non-negative and learns a separable task") {
  // Two permutations of a 2-sensor window whose columns differ in scale.
  const PermutationSet set({Permutation({0, 1}), Permutation({1, 0})});
  Rng rng(3);
  DenseArray windows({64, 8});
  for (std::size_t i = 0; i < 64; ++i) {
    for (std::size_t t = 0; t < 4; ++t) {
      windows.at(i, 2 * t) = 0.9 + 0.05 * rng.uniform01();
      windows.at(i, 2 * t + 1) = 0.1 + 0.05 * rng.uniform01();
    }
  }
  std::vector<std::size_t> rows(64), labels(64);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  for (std::size_t i = 0; i < 64; ++i) labels[i] = i % 2;
  const DenseArray batch = permuted_batch(windows, rows, labels, set);

  FlowModel model(FlowConfig{.input_dim = 8, .num_layers = 2, .hidden_units = 8}, 4);
  SelfSupHead head(8, 2, 5);
  auto params = model.parameters();
  for (auto* p : head.parameters()) params.push_back(p);
  double loss = 0.0;
  for (int step = 0; step < 400; ++step) {
    Tape tape;
    Var l = selfsup_loss(tape, model, head, tape.constant(batch), labels);
    loss = l.value().item();
    CHECK(loss >= 0.0);
    for (auto* p : params) p->zero_grad();
    tape.backward(l);
    for (auto* p : params) {
      for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= 0.5 * p->grad[i];
    }
  }
  CHECK(loss < 0.01);
  CHECK(evaluate_selfsup(model, head, batch, labels).accuracy == 1.0);
}
