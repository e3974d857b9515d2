#include <doctest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "ufid/errors.hpp"
#include "ufid/layers.hpp"

using namespace ufid;
using ufid::testing::gradcheck;
using ufid::testing::random_tensor;

namespace {

Tensor eval_dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tape tape(false);
  return nn::dense(tape.constant(x), tape.constant(w), tape.constant(b)).value();
}

Tensor eval_conv(const Tensor& x, const Tensor& k, const Tensor& b, nn::Padding p) {
  Tape tape(false);
  return nn::conv1d(tape.constant(x), tape.constant(k), tape.constant(b), p).value();
}

// Direct sliding window with explicit zero padding.
Tensor conv_oracle(const Tensor& x, const Tensor& k, const Tensor& b) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::size_t cout = k.dim(0), width = k.dim(2), left = (width - 1) / 2;
  Tensor out({batch, cout, len});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t f = 0; f < cout; ++f)
      for (std::size_t t = 0; t < len; ++t) {
        double acc = b[f];
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t i = 0; i < width; ++i) {
            const long pos = static_cast<long>(t + i) - static_cast<long>(left);
            if (pos >= 0 && pos < static_cast<long>(len)) acc += k.at(f, c, i) * x.at(n, c, pos);
          }
        out.at(n, f, t) = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("dense examples") {
  const auto w = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(eval_dense(Tensor::matrix({{1, 0}}), w, Tensor::vector({0, 0})) == Tensor::matrix({{1, 3}}));
  CHECK(eval_dense(Tensor::matrix({{0, 0}}), w, Tensor::vector({5, 7})) == Tensor::matrix({{5, 7}}));
  CHECK(eval_dense(Tensor::matrix({{1, 1}}), w, Tensor::vector({1, 1})) == Tensor::matrix({{4, 8}}));
}

TEST_CASE("dense names both shapes on mismatch") {
  try {
    eval_dense(Tensor::matrix({{1, 2, 3}}), Tensor::matrix({{1, 2}}), Tensor::vector({0}));
    FAIL("expected a DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1x3]") != std::string::npos);
    CHECK(msg.find("[1x2]") != std::string::npos);
  }
}

TEST_CASE("retelu examples") {
  const auto y = nn::retelu(Tensor::vector({-1.0, 0.3, 2.0}), 0.5);
  CHECK(y == Tensor::vector({0.0, 0.5, 2.0}));
  const auto g = nn::retelu_backward(Tensor::vector({2.0, 0.3, -1.0}), 0.5, Tensor::vector({1.0, 1.0, 3.0}));
  CHECK(g == Tensor::vector({1.0, 0.0, 0.0}));
  const auto st = nn::retelu_backward(Tensor::vector({2.0, 0.3, -1.0}), 0.5,
                                      Tensor::vector({1.0, 1.0, 3.0}), true);
  CHECK(st == Tensor::vector({1.0, 1.0, 0.0}));
  CHECK_THROWS_AS(nn::retelu(Tensor::vector({1.0}), 0.0), ConfigError);
  CHECK_THROWS_AS(nn::retelu(Tensor::vector({1.0}), -0.1), ConfigError);
}

TEST_CASE("retelu is idempotent, nonnegative and at least theta on positives") {
  SplitMix64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double theta = rng.uniform(0.01, 1.0);
    const auto x = random_tensor(rng, {32}, -3.0, 3.0);
    const auto y = nn::retelu(x, theta);
    CHECK(nn::retelu(y, theta) == y);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      CHECK(y[i] >= 0.0);
      if (x[i] > 0.0) CHECK(y[i] >= theta);
    }
  }
}

TEST_CASE("conv1d examples") {
  const auto x = Tensor({1, 1, 3}, {1, 2, 3});
  CHECK(eval_conv(x, Tensor({1, 1, 3}, {1, 1, 1}), Tensor::vector({0}), nn::Padding::kValid) ==
        Tensor({1, 1, 1}, {6}));
  CHECK(eval_conv(x, Tensor({1, 1, 3}, {0, 1, 0}), Tensor::vector({0}), nn::Padding::kSame) == x);
  const auto x4 = Tensor({1, 1, 4}, {1, -1, 2, 0});
  const auto k = Tensor({1, 1, 3}, {1, 0, -1});
  const auto b = Tensor::vector({0});
  CHECK(eval_conv(x4, k, b, nn::Padding::kSame) == conv_oracle(x4, k, b));
  // Padded window sums: [0,1,-1] -> 1, [1,-1,2] -> -1, [-1,2,0] -> -1, [2,0,0] -> 2.
  CHECK(eval_conv(x4, k, b, nn::Padding::kSame) == Tensor({1, 1, 4}, {1, -1, -1, 2}));
}

TEST_CASE("conv1d agrees with a brute-force sliding window") {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t batch = 1 + rng.below(3), cin = 1 + rng.below(3), cout = 1 + rng.below(4);
    const std::size_t width = 1 + 2 * rng.below(3), len = width + rng.below(6);
    const auto x = random_tensor(rng, {batch, cin, len});
    const auto k = random_tensor(rng, {cout, cin, width});
    const auto b = random_tensor(rng, {cout});
    const auto got = eval_conv(x, k, b, nn::Padding::kSame);
    const auto want = conv_oracle(x, k, b);
    for (std::size_t i = 0; i < got.numel(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv1d rejects kernels longer than the input") {
  CHECK_THROWS_AS(eval_conv(Tensor({1, 1, 2}, {1, 2}), Tensor({1, 1, 3}, {1, 1, 1}), Tensor::vector({0}),
                            nn::Padding::kValid),
                  DimensionError);
}

TEST_CASE("batchnorm examples") {
  Tape tape(false);
  nn::BatchNormStats stats(1);
  const auto gamma = tape.constant(Tensor::vector({1.0}));
  const auto beta = tape.constant(Tensor::vector({0.0}));
  const auto constant = nn::batchnorm1d(tape.constant(Tensor({3, 1, 2}, 4.0)), gamma, beta, stats,
                                        nn::Mode::kTrain);
  for (const double v : constant.value().data()) CHECK(v == 0.0);

  nn::BatchNormStats fresh(1);
  const auto shifted = nn::batchnorm1d(tape.constant(Tensor({1, 1}, {0.0})), gamma,
                                       tape.constant(Tensor::vector({5.0})), fresh, nn::Mode::kEval);
  CHECK(shifted.value()[0] == 5.0);

  nn::BatchNormStats two(1);
  const auto y = nn::batchnorm1d(tape.constant(Tensor({2, 1}, {1.0, 3.0})), gamma, beta, two,
                                 nn::Mode::kTrain);
  const double corrected = 1.0 / std::sqrt(1.0 + nn::kBatchNormEps);
  CHECK(std::abs(y.value()[0] + corrected) <= 1e-6);
  CHECK(std::abs(y.value()[1] - corrected) <= 1e-6);
  // Running stats fold in the unbiased variance 2 with momentum 0.1.
  CHECK(two.running_mean[0] == doctest::Approx(0.2));
  CHECK(two.running_var[0] == doctest::Approx(0.9 + 0.1 * 2.0));
}

TEST_CASE("batchnorm eval before training uses mean 0 and variance 1") {
  Tape tape(false);
  nn::BatchNormStats stats(2);
  const auto y = nn::batchnorm1d(tape.constant(Tensor({1, 2, 1}, {2.0, -1.0})),
                                 tape.constant(Tensor::vector({1, 1})), tape.constant(Tensor::vector({0, 0})),
                                 stats, nn::Mode::kEval);
  CHECK(y.value()[0] == doctest::Approx(2.0 / std::sqrt(1.0 + nn::kBatchNormEps)));
  CHECK(y.value()[1] == doctest::Approx(-1.0 / std::sqrt(1.0 + nn::kBatchNormEps)));
}

TEST_CASE("global max pool examples") {
  Tape tape;
  const auto x = tape.variable(Tensor({1, 2, 4}, {3, -1, 7, 2, 5, 5, 5, 5}));
  const auto y = nn::global_max_pool(x);
  CHECK(y.value() == Tensor({1, 2}, {7, 5}));
  tape.backward(nn::sum(y));
  CHECK(x.grad() == Tensor({1, 2, 4}, {0, 0, 1, 0, 1, 0, 0, 0}));
  Tape t2(false);
  CHECK(nn::global_max_pool(t2.constant(Tensor({1, 1, 1}, {4}))).value()[0] == 4.0);
}

TEST_CASE("global max pool equals the brute-force window maximum") {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_tensor(rng, {1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(9)});
    Tape tape(false);
    const auto y = nn::global_max_pool(tape.constant(x)).value();
    for (std::size_t b = 0; b < x.dim(0); ++b)
      for (std::size_t c = 0; c < x.dim(1); ++c) {
        double m = -INFINITY;
        for (std::size_t t = 0; t < x.dim(2); ++t) m = std::max(m, x.at(b, c, t));
        CHECK(y.at(b, c) == m);
      }
  }
}

TEST_CASE("softmax examples") {
  CHECK(nn::softmax(Tensor::matrix({{0, 0}})) == Tensor::matrix({{0.5, 0.5}}));
  const auto big = nn::softmax(Tensor::matrix({{1000, 0}}));
  CHECK(big.all_finite());
  CHECK(big[0] == 1.0);
  CHECK(big[1] < 1e-300);
  const auto p = nn::softmax(Tensor::matrix({{std::log(2.0), 0}}));
  CHECK(p[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(nn::softmax(Tensor::matrix({{1.0}})), DimensionError);
}

TEST_CASE("softmax rows are distributions") {
  SplitMix64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = nn::softmax(random_tensor(rng, {4, 2 + rng.below(8)}, -50.0, 50.0));
    for (std::size_t r = 0; r < p.dim(0); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < p.dim(1); ++c) {
        CHECK(p.at(r, c) >= 0.0);
        CHECK(p.at(r, c) <= 1.0);
        s += p.at(r, c);
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("cross entropy examples") {
  Tape tape(false);
  const std::vector<int> zero{0}, one{1};
  CHECK(nn::cross_entropy(tape.constant(Tensor::matrix({{0.5, 0.5}})), zero).value()[0] ==
        doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(nn::cross_entropy(tape.constant(Tensor::matrix({{1.0, 0.0}})), zero).value()[0] == 0.0);
  CHECK(nn::cross_entropy(tape.constant(Tensor::matrix({{0.9, 0.1}})), one).value()[0] ==
        doctest::Approx(2.302585).epsilon(1e-6));
  // Clamp keeps a zero probability finite.
  CHECK(nn::cross_entropy(tape.constant(Tensor::matrix({{1.0, 0.0}})), one).value()[0] ==
        doctest::Approx(-std::log(nn::kProbabilityFloor)));
}

TEST_CASE("cross entropy names the offending row") {
  Tape tape(false);
  const std::vector<int> labels{0, 2};
  try {
    nn::cross_entropy(tape.constant(Tensor::matrix({{0.5, 0.5}, {0.5, 0.5}})), labels);
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }
}

TEST_CASE("sgd examples") {
  Parameter w("w", Tensor::scalar(1.0));
  w.grad[0] = 0.5;
  std::vector<Parameter*> ps{&w};
  nn::sgd_step(ps, 0.001);
  CHECK(w.value[0] == 0.9995);
  CHECK(w.grad[0] == 0.0);
  nn::sgd_step(ps, 0.1);
  CHECK(w.value[0] == 0.9995);
  Parameter v("v", Tensor::scalar(0.0));
  v.grad[0] = -1.0;
  std::vector<Parameter*> vs{&v};
  nn::sgd_step(vs, 0.1);
  CHECK(v.value[0] == 0.1);
}

TEST_CASE("sgd with eta 0 is the identity") {
  SplitMix64 rng(2);
  Parameter w("w", random_tensor(rng, {5, 3}));
  const auto before = w.value;
  w.grad = random_tensor(rng, {5, 3});
  std::vector<Parameter*> ps{&w};
  nn::sgd_step(ps, 0.0);
  CHECK(w.value == before);
}

TEST_CASE("gradients match central differences") {
  SplitMix64 rng(17);
  const double theta = 0.05;

  SUBCASE("dense") {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t b = 1 + rng.below(4), f = 1 + rng.below(8), d = 1 + rng.below(8);
      const auto r = gradcheck({random_tensor(rng, {b, f}), random_tensor(rng, {d, f}), random_tensor(rng, {d})},
                               [](Tape&, const std::vector<Var>& v) { return nn::dense(v[0], v[1], v[2]); },
                               rng.next());
      CHECK(r.worst <= 1e-4);
    }
  }
  SUBCASE("retelu") {
    for (int trial = 0; trial < 20; ++trial) {
      auto x = random_tensor(rng, {3, 6});
      if (testing::kink_distance(x, theta) < 1e-3) continue;
      const auto r = gradcheck({x},
                               [&](Tape&, const std::vector<Var>& v) {
                                 return nn::retelu(v[0], nn::ReteluOptions{theta, false});
                               },
                               rng.next());
      CHECK(r.worst <= 1e-4);
    }
  }
  SUBCASE("conv1d") {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t b = 1 + rng.below(3), cin = 1 + rng.below(3), cout = 1 + rng.below(4);
      const std::size_t k = 1 + 2 * rng.below(2), len = k + rng.below(5);
      const auto r = gradcheck(
          {random_tensor(rng, {b, cin, len}), random_tensor(rng, {cout, cin, k}), random_tensor(rng, {cout})},
          [](Tape&, const std::vector<Var>& v) { return nn::conv1d(v[0], v[1], v[2]); }, rng.next());
      CHECK(r.worst <= 1e-4);
    }
  }
  SUBCASE("batchnorm train mode") {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t b = 2 + rng.below(3), c = 1 + rng.below(4), len = 1 + rng.below(5);
      const auto r = gradcheck({random_tensor(rng, {b, c, len}), random_tensor(rng, {c}, 0.5, 1.5),
                                random_tensor(rng, {c})},
                               [c](Tape&, const std::vector<Var>& v) {
                                 nn::BatchNormStats stats(c);
                                 return nn::batchnorm1d(v[0], v[1], v[2], stats, nn::Mode::kTrain);
                               },
                               rng.next());
      CHECK(r.worst <= 1e-4);
    }
  }
  SUBCASE("global max pool") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = random_tensor(rng, {2, 3, 1 + rng.below(6)});
      if (testing::max_gap(x) < 1e-3) continue;
      const auto r = gradcheck({x}, [](Tape&, const std::vector<Var>& v) { return nn::global_max_pool(v[0]); },
                               rng.next());
      CHECK(r.worst <= 1e-4);
    }
  }
  SUBCASE("softmax and cross entropy") {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t b = 1 + rng.below(4), c = 2 + rng.below(6);
      std::vector<int> labels(b);
      for (auto& l : labels) l = static_cast<int>(rng.below(c));
      const auto r = gradcheck({random_tensor(rng, {b, c}, -3.0, 3.0)},
                               [&](Tape&, const std::vector<Var>& v) {
                                 return nn::cross_entropy(nn::softmax(v[0]), labels);
                               },
                               rng.next());
      CHECK(r.worst <= 1e-4);
    }
  }
  SUBCASE("dense, retelu and cross entropy chain") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = random_tensor(rng, {3, 4});
      const auto w = random_tensor(rng, {5, 4});
      const auto b = random_tensor(rng, {5});
      Tape probe(false);
      const auto pre = nn::dense(probe.constant(x), probe.constant(w), probe.constant(b)).value();
      if (testing::kink_distance(pre, theta) < 1e-3) continue;
      const std::vector<int> labels{0, 4, 2};
      const auto r = gradcheck({x, w, b},
                               [&](Tape&, const std::vector<Var>& v) {
                                 const auto h = nn::retelu(nn::dense(v[0], v[1], v[2]), nn::ReteluOptions{theta, false});
                                 return nn::cross_entropy(nn::softmax(h), labels);
                               },
                               rng.next());
      CHECK(r.worst <= 1e-4);
    }
  }
}

TEST_CASE("per-sample squared mode sums the squares of per-row gradients") {
  SplitMix64 rng(23);
  const std::size_t batch = 5;
  Parameter w("w", random_tensor(rng, {4, 3}));
  Parameter b("b", random_tensor(rng, {4}));
  Parameter k("k", random_tensor(rng, {4, 1, 3}));
  Parameter kb("kb", random_tensor(rng, {4}));
  const auto x = random_tensor(rng, {batch, 3});
  std::vector<int> labels{0, 1, 2, 3, 1};

  auto loss_on = [&](Tape& tape, const Tensor& rows, std::span<const int> ys) {
    const auto h = nn::dense(tape.constant(rows), tape.parameter(w), tape.parameter(b));
    const auto seq = nn::reshape(h, {rows.dim(0), 1, 4});
    const auto c = nn::global_max_pool(nn::conv1d(seq, tape.parameter(k), tape.parameter(kb)));
    return nn::cross_entropy(nn::softmax(c), ys, nn::Reduction::kSum);
  };

  std::vector<Tensor> want{Tensor::zeros_like(w.value), Tensor::zeros_like(b.value),
                           Tensor::zeros_like(k.value), Tensor::zeros_like(kb.value)};
  Parameter* ps[] = {&w, &b, &k, &kb};
  for (std::size_t r = 0; r < batch; ++r) {
    for (auto* p : ps) p->zero_grad();
    Tape tape;
    Tensor row({1, 3});
    for (std::size_t j = 0; j < 3; ++j) row[j] = x.at(r, j);
    tape.backward(loss_on(tape, row, std::span<const int>(&labels[r], 1)));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t e = 0; e < want[i].numel(); ++e) want[i][e] += ps[i]->grad[e] * ps[i]->grad[e];
  }
  for (auto* p : ps) p->zero_grad();
  Tape tape;
  tape.set_grad_mode(GradMode::kPerSampleSquared);
  tape.backward(loss_on(tape, x, labels));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t e = 0; e < want[i].numel(); ++e)
      CHECK(ps[i]->grad[e] == doctest::Approx(want[i][e]).epsilon(1e-12));
}

TEST_CASE("per-sample mode rejects batch-coupled layers") {
  Parameter g("g", Tensor::vector({1.0}));
  Parameter be("be", Tensor::vector({0.0}));
  nn::BatchNormStats stats(1);
  Tape tape;
  tape.set_grad_mode(GradMode::kPerSampleSquared);
  const auto x = tape.constant(Tensor({2, 1}, {1.0, 2.0}));
  const auto y = nn::batchnorm1d(x, tape.parameter(g), tape.parameter(be), stats, nn::Mode::kTrain);
  CHECK_THROWS_AS(tape.backward(nn::sum(nn::square(y))), UsageError);
}
