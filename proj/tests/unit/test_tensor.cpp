#include <cmath>
#include <limits>

#include "doctest.h"

#include "crab/errors.hpp"
#include "crab/ops.hpp"
#include "test_util.hpp"

using namespace crab;
using crab::testing::away_from_zero;
using crab::testing::gradcheck;
using crab::testing::probe_sum;
using crab::testing::random_tensor;

namespace {

constexpr int kSeeds = 20;
constexpr double kEps = 5e-3;
constexpr double kTol = 1e-3;

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += double(a.data()[i * k + p]) * double(b.data()[p * n + j]);
  return c;
}

// Scalar GRU recurrence for one row, gate order z, r, n.
std::vector<double> naive_gru(const Tensor& gx, const Tensor& u, std::size_t row, std::size_t len, bool reverse) {
  const std::size_t t_max = gx.dim(1), h3 = gx.dim(2), h = h3 / 3;
  std::vector<double> out(t_max * h, 0.0), state(h, 0.0);
  auto g = [&](std::size_t t, std::size_t j) { return double(gx.data()[(row * t_max + t) * h3 + j]); };
  auto uw = [&](std::size_t i, std::size_t j) { return double(u.data()[i * h + j]); };
  for (std::size_t s = 0; s < len; ++s) {
    const std::size_t t = reverse ? len - 1 - s : s;
    std::vector<double> z(h), r(h), next(h);
    for (std::size_t i = 0; i < h; ++i) {
      double az = g(t, i), ar = g(t, h + i);
      for (std::size_t j = 0; j < h; ++j) {
        az += uw(i, j) * state[j];
        ar += uw(h + i, j) * state[j];
      }
      z[i] = 1.0 / (1.0 + std::exp(-az));
      r[i] = 1.0 / (1.0 + std::exp(-ar));
    }
    for (std::size_t i = 0; i < h; ++i) {
      double an = g(t, 2 * h + i);
      for (std::size_t j = 0; j < h; ++j) an += uw(2 * h + i, j) * r[j] * state[j];
      next[i] = (1.0 - z[i]) * state[i] + z[i] * std::tanh(an);
    }
    state = next;
    for (std::size_t i = 0; i < h; ++i) out[t * h + i] = state[i];
  }
  return out;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  auto c = matmul(Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::from({2, 2}, {3, 4, 5, 6}));
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.at({0, 0}) == 3);
  CHECK(c.at({0, 1}) == 4);
  CHECK(c.at({1, 0}) == 5);
  CHECK(c.at({1, 1}) == 6);
  auto d = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  CHECK(d.item() == 11);
}

TEST_CASE("matmul matches a triple loop") {
  Rng rng(7);
  for (int s = 0; s < 5; ++s) {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    const auto c = matmul(a, b);
    const auto ref = naive_matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(c.data()[i] - ref[i]) < 1e-6);
  }
}

TEST_CASE("matmul batched, shared and transposed operands") {
  Rng rng(3);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 5});
  auto bt = Tensor::zeros({5, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) bt.data()[j * 4 + i] = b.data()[i * 5 + j];
  auto ct = matmul(a, bt, true);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(ct.data()[i] == doctest::Approx(c.data()[i]).epsilon(1e-6));
  for (std::size_t bi = 0; bi < 2; ++bi) {
    auto ab = reshape(slice(a, 0, bi, 1), {3, 4});
    const auto ref = naive_matmul(ab, b);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(c.data()[bi * 15 + i] - ref[i]) < 1e-5);
  }
  auto bb = random_tensor({2, 4, 5}, rng);
  CHECK(matmul(a, bb).shape() == Shape{2, 3, 5});
  CHECK_THROWS_AS(matmul(a, random_tensor({3, 5}, rng)), DimensionError);
  CHECK_THROWS_AS(matmul(a, random_tensor({3, 4, 5}, rng)), DimensionError);
}

TEST_CASE("elementwise definitions") {
  auto r = relu(Tensor::from({-1, 0, 2}));
  CHECK(r.data()[0] == 0);
  CHECK(r.data()[1] == 0);
  CHECK(r.data()[2] == 2);
  CHECK(sigmoid(Tensor::from({0})).item() == doctest::Approx(0.5));
  CHECK(tanh(Tensor::from({0})).item() == 0);
  CHECK(exp(Tensor::from({0})).item() == 1);
  CHECK(scale(Tensor::from({2}), Real(1.5)).item() == 3);
  CHECK_THROWS_AS(log(Tensor::from({1, 0})), DomainError);
  CHECK_THROWS_AS(log(Tensor::from({-2})), DomainError);
  auto b = add(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}), Tensor::from({10, 20, 30}));
  CHECK(b.at({1, 2}) == 36);
  auto s = mul(Tensor::from({2, 1}, {2, 3}), Tensor::from({1, 2}, {1, 10}));
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.at({1, 1}) == 30);
  CHECK_THROWS_AS(add(Tensor::from({1, 2, 3}), Tensor::from({1, 2})), DimensionError);
}

TEST_CASE("log derivative at 2 against a central difference") {
  auto x = Tensor::from({2});
  const double err = gradcheck([&] { return sum(log(x)); }, {x}, 1e-3);
  CHECK(err < 1e-3);
  x.zero_grad();
  {
    Tape tape;
    tape.backward(sum(log(x)));
  }
  CHECK(x.grad()[0] == doctest::Approx(0.5));
}

TEST_CASE("non-finite outputs raise") {
  CHECK_THROWS_AS(exp(Tensor::from({1000})), NumericError);
  CHECK_THROWS_AS(scale(Tensor::from({std::numeric_limits<Real>::max()}), 10), NumericError);
}

TEST_CASE("softmax values and stability") {
  auto u = softmax(Tensor::from({0, 0, 0}), 0);
  for (auto v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
  auto big = softmax(Tensor::from({1000, 0}), 0);
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] < 1e-30);
  auto s = softmax(Tensor::from({1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(s.data()[i] - std::exp(i + 1.0) / z) < 1e-7);
  auto ls = log_softmax(Tensor::from({1, 2, 3}), 0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(ls.data()[i] - (i + 1.0 - std::log(z))) < 1e-6);
  CHECK(std::abs(logsumexp(Tensor::from({1, 2, 3}), 0).item() - std::log(z)) < 1e-6);
}

TEST_CASE("softmax rows sum to one on arbitrary finite inputs") {
  Rng rng(11);
  for (int s = 0; s < 50; ++s) {
    auto x = random_tensor({4, 7}, rng, -50, 50);
    auto p = softmax(x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double acc = 0;
      for (std::size_t c = 0; c < 7; ++c) acc += p.data()[r * 7 + c];
      CHECK(std::abs(acc - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("masked softmax gives masked positions probability zero") {
  auto x = Tensor::from({2, 3}, {1, 5, 2, 0, 0, 0});
  auto m = Tensor::from({2, 3}, {1, 0, 1, 1, 1, 0});
  auto p = softmax(x, 1, m);
  CHECK(p.at({0, 1}) == 0);
  CHECK(p.at({1, 2}) == 0);
  CHECK(p.at({1, 0}) == doctest::Approx(0.5));
  CHECK(p.at({0, 0}) + p.at({0, 2}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(softmax(x, 1, Tensor::from({2, 3}, {1, 1, 1, 0, 0, 0})), DegenerateInputError);
}

TEST_CASE("reductions") {
  auto x = Tensor::from({2, 2}, {1, 2, 3, 999});
  auto m = Tensor::from({2, 2}, {1, 1, 1, 0});
  auto mm = mean(x, 1, m);
  CHECK(mm.data()[0] == doctest::Approx(1.5));
  CHECK(mm.data()[1] == doctest::Approx(3));
  CHECK(sum(Tensor::full({2, 3}, 1)).item() == 6);
  CHECK(mean(Tensor::from({1, 2, 3, 6})).item() == 3);
  CHECK(sum(x, 0).data()[1] == 1001);
  CHECK_THROWS_AS(mean(x, 1, Tensor::from({2, 2}, {1, 1, 0, 0})), DegenerateInputError);
}

TEST_CASE("concat and slice") {
  auto c = concat({Tensor::from({1, 2}), Tensor::from({3})}, 0);
  CHECK(c.shape() == Shape{3});
  CHECK(c.data()[2] == 3);
  std::vector<Tensor> parts(4, Tensor::zeros({512}));
  CHECK(concat(parts, 0).shape() == Shape{2048});
  Rng rng(5);
  auto a = random_tensor({2, 3}, rng);
  auto b = random_tensor({2, 5}, rng);
  auto ab = concat({a, b}, 1);
  auto a2 = slice(ab, 1, 0, 3);
  auto b2 = slice(ab, 1, 3, 5);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a2.data()[i] == a.data()[i]);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(b2.data()[i] == b.data()[i]);
  CHECK_THROWS_AS(concat({a, random_tensor({3, 3}, rng)}, 1), DimensionError);
  CHECK_THROWS_AS(slice(a, 1, 2, 2), DimensionError);
}

TEST_CASE("backward basics") {
  auto x = Tensor::from({1, 2});
  x.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(sum(x));
  }
  CHECK(x.grad()[0] == 1);
  CHECK(x.grad()[1] == 1);
  x.zero_grad();
  {
    Tape tape;
    tape.backward(sum(mul(x, x)));
  }
  CHECK(x.grad()[0] == 2);
  CHECK(x.grad()[1] == 4);
  // Leaves accumulate across calls.
  {
    Tape tape;
    tape.backward(sum(mul(x, x)));
  }
  CHECK(x.grad()[1] == 8);

  Tape tape;
  auto y = scale(x, 2);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("fan-out sums branch gradients") {
  auto x = Tensor::from({0.5, -1.0, 2.0});
  x.set_requires_grad(true);
  {
    Tape tape;
    auto a = tanh(x);
    auto loss = add(sum(mul(a, a)), sum(scale(a, 3)));
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const double t = std::tanh(double(x.data()[i]));
    const double expect = (2 * t + 3) * (1 - t * t);
    CHECK(x.grad()[i] == doctest::Approx(expect).epsilon(1e-5));
  }
}

TEST_CASE("nothing is recorded without a tape or without grad inputs") {
  auto x = Tensor::from({1, 2});
  x.set_requires_grad(true);
  auto y = mul(x, x);
  CHECK(y.impl()->tape == nullptr);
  CHECK_THROWS_AS(backward(sum(y)), ContractError);
  Tape tape;
  auto c = Tensor::from({3, 4});
  auto z = mul(c, c);
  CHECK(tape.size() == 0);
  auto w = mul(x, c);
  CHECK(tape.size() == 1);
  (void)z;
  (void)w;
}

TEST_CASE("op counter advances on every forward primitive") {
  const auto before = op_counter();
  auto x = Tensor::from({1, 2});
  (void)add(x, x);
  (void)relu(x);
  CHECK(op_counter() - before == 2);
}

TEST_CASE("gru_scan matches the scalar recurrence") {
  Rng rng(21);
  const std::size_t B = 3, T = 5, h = 4;
  auto gx = random_tensor({B, T, 3 * h}, rng, -1.5, 1.5);
  auto u = random_tensor({3 * h, h}, rng, -0.8, 0.8);
  const std::vector<std::size_t> lengths{5, 3, 1};
  for (bool reverse : {false, true}) {
    auto out = gru_scan(gx, u, lengths, reverse);
    REQUIRE(out.shape() == Shape{B, T, h});
    for (std::size_t b = 0; b < B; ++b) {
      const auto ref = naive_gru(gx, u, b, lengths[b], reverse);
      for (std::size_t i = 0; i < T * h; ++i) CHECK(std::abs(out.data()[b * T * h + i] - ref[i]) < 1e-5);
    }
  }
}

TEST_CASE("gradient checks for every primitive") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1000 + seed);
    CAPTURE(seed);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto ab = random_tensor({2, 3, 4}, rng);
    auto v = random_tensor({4}, rng);
    auto bt = random_tensor({2, 4}, rng);
    CHECK(gradcheck([&] { return probe_sum(matmul(a, b), 1); }, {a, b}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(matmul(ab, b), 2); }, {ab, b}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(matmul(a, bt, true), 3); }, {a, bt}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(add(a, v), 4); }, {a, v}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(sub(a, v), 5); }, {a, v}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(mul(a, v), 6); }, {a, v}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(scale(a, Real(-1.7)), 7); }, {a}, kEps) < kTol);
    auto k = away_from_zero({3, 4}, rng, 0.1, 1.0);
    CHECK(gradcheck([&] { return probe_sum(relu(k), 8); }, {k}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(exp(a), 9); }, {a}, kEps) < kTol);
    auto p = random_tensor({3, 4}, rng, 0.5, 2.0);
    CHECK(gradcheck([&] { return probe_sum(log(p), 10); }, {p}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(tanh(a), 11); }, {a}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(sigmoid(a), 12); }, {a}, kEps) < kTol);

    auto mask = Tensor::from({3, 4}, {1, 1, 0, 1, 1, 0, 0, 0, 1, 1, 1, 1});
    CHECK(gradcheck([&] { return probe_sum(softmax(a, 1), 13); }, {a}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(softmax(a, 0), 14); }, {a}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(softmax(a, 1, mask), 15); }, {a}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(log_softmax(a, 1, mask), 16); }, {a}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(logsumexp(a, 1, mask), 17); }, {a}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(sum(ab, 1), 18); }, {ab}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(mean(a, 1, mask), 19); }, {a}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(sum(a, 0, mask), 20); }, {a}, kEps) < kTol);
    CHECK(gradcheck([&] { return mean(mul(a, a)); }, {a}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(concat({a, bt.detach().clone(), a}, 0), 21); }, {a}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(slice(ab, 2, 1, 2), 22); }, {ab}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(reshape(ab, {6, 4}), 23); }, {ab}, kEps) < kTol);

    auto gain = random_tensor({4}, rng, 0.5, 1.5);
    auto shift = random_tensor({4}, rng);
    CHECK(gradcheck([&] { return probe_sum(layer_norm(ab, gain, shift, Real(1e-5)), 24); }, {ab, gain, shift}, kEps) <
          kTol);
    CHECK(gradcheck([&] { return probe_sum(l2_normalize(a), 25); }, {a}, kEps) < kTol);

    auto gx = random_tensor({2, 4, 9}, rng, -1.0, 1.0);
    auto u = random_tensor({9, 3}, rng, -0.7, 0.7);
    const std::vector<std::size_t> len{4, 2};
    CHECK(gradcheck([&] { return probe_sum(gru_scan(gx, u, len, false), 26); }, {gx, u}, kEps) < kTol);
    CHECK(gradcheck([&] { return probe_sum(gru_scan(gx, u, len, true), 27); }, {gx, u}, kEps) < kTol);
  }
}
