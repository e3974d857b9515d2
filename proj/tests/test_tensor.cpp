#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "ufid/errors.hpp"
#include "ufid/layers.hpp"
#include "ufid/rng.hpp"
#include "ufid/tape.hpp"
#include "ufid/tensor.hpp"

using namespace ufid;

TEST_CASE("tensor storage matches its shape") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.at(1, 2) == 1.5);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(t.reshaped({4}), DimensionError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK(to_string(Shape{2, 3}) == "[2x3]");
}

TEST_CASE("tensor helpers") {
  auto m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(m.at(1, 0) == 3);
  CHECK_THROWS_AS(Tensor::matrix({{1, 2}, {3}}), DimensionError);
  auto z = Tensor::zeros_like(m);
  z.add_scaled(m, 2.0);
  CHECK(z == Tensor::matrix({{2, 4}, {6, 8}}));
  CHECK(m.all_finite());
  m[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(m.all_finite());
  CHECK_THROWS_AS(expect_rank(z, 3, "z"), DimensionError);
}

TEST_CASE("backward of w^2 at 3 gives 6") {
  Parameter w("w", Tensor::scalar(3.0));
  Tape tape;
  const Var loss = nn::square(tape.parameter(w));
  tape.backward(loss);
  CHECK(w.grad[0] == 6.0);
}

TEST_CASE("disconnected parameter keeps a zero gradient") {
  Parameter used("used", Tensor::scalar(2.0));
  Parameter idle("idle", Tensor::scalar(5.0));
  Tape tape;
  const Var u = tape.parameter(used);
  tape.parameter(idle);
  tape.backward(nn::scale(u, 4.0));
  CHECK(used.grad[0] == 4.0);
  CHECK(idle.grad[0] == 0.0);
}

TEST_CASE("backward rejects non-scalar losses and non-recording tapes") {
  Tape tape;
  const Var v = tape.variable(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(tape.backward(v), UsageError);
  Tape frozen(false);
  const Var s = frozen.constant(Tensor::scalar(1.0));
  CHECK_THROWS_AS(frozen.backward(s), UsageError);
}

TEST_CASE("a parameter binds once per tape") {
  Parameter w("w", Tensor::scalar(1.0));
  Tape tape;
  tape.parameter(w);
  CHECK_THROWS_AS(tape.parameter(w), UsageError);
}

TEST_CASE("shared subexpressions accumulate gradient from every consumer") {
  Tape tape;
  const Var x = tape.variable(Tensor::scalar(3.0));
  const Var y = nn::add(nn::mul(x, x), x);  // x^2 + x
  tape.backward(y);
  CHECK(x.grad()[0] == 7.0);
}

TEST_CASE("splitmix64 is reproducible and unbiased in range") {
  SplitMix64 a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next() == b.next());
  SplitMix64 g(1);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto v = g.below(7);
    CHECK(v < 7);
    seen.insert(v);
    const double u = g.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  CHECK(seen.size() == 7);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = g.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(std::abs(s / n) < 0.03);
  CHECK(std::abs(s2 / n - 1.0) < 0.05);
  CHECK(mix_seed(1, 2) != mix_seed(1, 3));
  CHECK(hash_name("encoder.lstm.W_f") != hash_name("encoder.lstm.W_i"));
}
