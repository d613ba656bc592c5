#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"

#include "crab/errors.hpp"
#include "crab/layers.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace crab;
using crab::testing::gradcheck;
using crab::testing::probe_sum;
using crab::testing::random_tensor;
using namespace crab::oracle;

namespace {

constexpr int kSeeds = 20;
constexpr double kEps = 5e-3;
constexpr double kTol = 1e-3;

}  // namespace

TEST_CASE("linear") {
  LinearParams p{Tensor::from({1, 2}, {1, 1}), Tensor::from({0.5})};
  CHECK(linear(p, Tensor::from({1, 2}, {2, 3})).item() == doctest::Approx(5.5));
  auto id = make_identity_linear(3);
  auto x = Tensor::from({2, 3}, {1, -2, 3, 4, 5, -6});
  auto y = linear(id, x);
  for (std::size_t i = 0; i < 6; ++i) CHECK(y.data()[i] == x.data()[i]);

  Rng rng(2);
  auto q = make_linear(4, 3, rng);
  q.bias = random_tensor({3}, rng);
  auto in = random_tensor({5, 4}, rng);
  auto out = linear(q, in);
  for (std::size_t b = 0; b < 5; ++b) {
    auto ref = matvec(q.weight, row(in, b * 4, 4));
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(out.data()[b * 3 + i] - (ref[i] + q.bias.data()[i])) < 1e-6);
  }
  CHECK_THROWS_AS(linear(q, random_tensor({5, 3}, rng)), DimensionError);
}

TEST_CASE("initializers respect their ranges") {
  Rng rng(9);
  auto p = make_linear(16, 8, rng);
  const double bound = 1.0 / 4.0;
  for (auto v : p.weight.data()) CHECK(std::abs(v) <= bound);
  for (auto v : p.bias.data()) CHECK(v == 0);
  auto g = make_gru(5, 3, rng);
  CHECK(g.forward.input_weights.shape() == Shape{9, 5});
  CHECK(g.backward.hidden_weights.shape() == Shape{9, 3});
  auto pool = make_attention_pooling(400, rng);
  double ss = 0;
  for (auto v : pool.query.data()) ss += double(v) * v;
  CHECK(std::sqrt(ss / 400) == doctest::Approx(1.0 / 20.0).epsilon(0.15));
}

TEST_CASE("layer_norm") {
  auto p = make_layer_norm(4);
  auto c = layer_norm(p, Tensor::from({1, 4}, {3, 3, 3, 3}));
  for (auto v : c.data()) CHECK(v == 0);
  auto two = make_layer_norm(2);
  auto y = layer_norm(two, Tensor::from({1, 2}, {1, 3}));
  CHECK(y.data()[0] == doctest::Approx(-1).epsilon(1e-4));
  CHECK(y.data()[1] == doctest::Approx(1).epsilon(1e-4));

  Rng rng(4);
  auto q = make_layer_norm(16);
  q.gain = random_tensor({16}, rng, 0.5, 2.0);
  q.shift = random_tensor({16}, rng);
  auto x = random_tensor({3, 16}, rng, -5, 5);
  auto out = layer_norm(q, x);
  // Undo gain/shift and check zero mean, unit (biased) variance per row.
  for (std::size_t b = 0; b < 3; ++b) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 16; ++i) m += (out.data()[b * 16 + i] - q.shift.data()[i]) / q.gain.data()[i];
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) {
      const double u = (out.data()[b * 16 + i] - q.shift.data()[i]) / q.gain.data()[i] - m;
      v += u * u;
    }
    v /= 16;
    CHECK(std::abs(m) < 1e-5);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("prefix_lengths") {
  CHECK(prefix_lengths(prefix_mask(2, 4, {4, 2})) == std::vector<std::size_t>{4, 2});
  CHECK_THROWS_AS(prefix_lengths(Tensor::from({1, 3}, {1, 0, 1})), ContractError);
  CHECK_THROWS_AS(prefix_lengths(Tensor::from({1, 3}, {0, 0, 0})), DegenerateInputError);
}

TEST_CASE("bi_gru with zero parameters stays at the zero state") {
  Rng rng(1);
  auto p = make_gru(3, 4, rng);
  for (auto* d : {&p.forward, &p.backward}) {
    for (auto* t : {&d->input_weights, &d->hidden_weights, &d->bias})
      for (auto& v : t->data()) v = 0;
  }
  auto y = bi_gru(p, random_tensor({2, 5, 3}, rng), prefix_mask(2, 5, {5, 3}));
  for (auto v : y.data()) CHECK(v == 0);
}

TEST_CASE("bi_gru with T=1 gives matching directions") {
  Rng rng(2);
  auto p = make_gru(3, 4, rng);
  p.backward = GruDirection{p.forward.input_weights.clone(), p.forward.hidden_weights.clone(), p.forward.bias.clone()};
  auto y = bi_gru(p, random_tensor({2, 1, 3}, rng), prefix_mask(2, 1, {1, 1}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[b * 8 + i] == y.data()[b * 8 + 4 + i]);
}

TEST_CASE("bi_gru matches the explicit recurrence") {
  Rng rng(3);
  const std::size_t B = 3, T = 6, in = 5, h = 4;
  auto p = make_gru(in, h, rng);
  p.forward.bias = random_tensor({3 * h}, rng, -0.5, 0.5);
  p.backward.bias = random_tensor({3 * h}, rng, -0.5, 0.5);
  auto x = random_tensor({B, T, in}, rng, -2, 2);
  const std::vector<std::size_t> lengths{6, 4, 1};
  auto y = bi_gru(p, x, prefix_mask(B, T, lengths));
  REQUIRE(y.shape() == Shape{B, T, 2 * h});
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<Vec> xs;
    for (std::size_t t = 0; t < lengths[b]; ++t) xs.push_back(row(x, (b * T + t) * in, in));
    const auto fwd = gru_oracle(p.forward, xs, false);
    const auto bwd = gru_oracle(p.backward, xs, true);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < h; ++i) {
        const double yf = y.data()[(b * T + t) * 2 * h + i];
        const double yb = y.data()[(b * T + t) * 2 * h + h + i];
        if (t < lengths[b]) {
          CHECK(std::abs(yf - fwd[t][i]) < 1e-5);
          CHECK(std::abs(yb - bwd[t][i]) < 1e-5);
        } else {
          CHECK(yf == 0);
          CHECK(yb == 0);
        }
      }
    }
  }
}

TEST_CASE("bi_gru is invariant to extra right padding") {
  Rng rng(4);
  auto p = make_gru(3, 4, rng);
  auto x = random_tensor({1, 4, 3}, rng);
  auto padded = concat({x, random_tensor({1, 3, 3}, rng, 50, 60)}, 1);
  auto a = bi_gru(p, x, prefix_mask(1, 4, {4}));
  auto b = bi_gru(p, padded, prefix_mask(1, 7, {4}));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
  CHECK_THROWS_AS(bi_gru(p, x, Tensor::from({1, 4}, {1, 0, 1, 1})), ContractError);
}

TEST_CASE("cross_attention single valid key and identical keys") {
  Rng rng(5);
  const std::size_t d = 4;
  auto p = make_cross_attention(d, 1, rng);
  auto q = random_tensor({1, 2, d}, rng);
  auto kv = random_tensor({1, 3, d}, rng);
  auto out = cross_attention(p, q, kv, Tensor::from({1, 3}, {1, 0, 0}));
  const auto expect = matvec(p.output, matvec(p.value, row(kv, 0, d)));
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(out.data()[t * d + i] - expect[i]) < 1e-6);

  auto same = concat({slice(kv, 1, 0, 1), slice(kv, 1, 0, 1), slice(kv, 1, 0, 1)}, 1);
  auto out2 = cross_attention(p, q, same, Tensor::from({1, 3}, {1, 1, 0}));
  for (std::size_t i = 0; i < out2.size(); ++i) CHECK(std::abs(out2.data()[i] - out.data()[i]) < 1e-6);
  CHECK_THROWS_AS(cross_attention(p, q, kv, Tensor::from({1, 3}, {0, 0, 0})), DegenerateInputError);
}

TEST_CASE("cross_attention matches the direct formula") {
  for (std::size_t heads : {1u, 2u}) {
    Rng rng(6 + heads);
    const std::size_t d = 4;
    auto p = make_cross_attention(d, heads, rng);
    auto q = random_tensor({1, 2, d}, rng, -2, 2);
    auto kv = random_tensor({1, 3, d}, rng, -2, 2);
    auto out = cross_attention(p, q, kv, Tensor::from({1, 3}, {1, 1, 1}));
    std::vector<Vec> keys;
    for (std::size_t j = 0; j < 3; ++j) keys.push_back(row(kv, j * d, d));
    for (std::size_t t = 0; t < 2; ++t) {
      const auto ref = attention_oracle(p, row(q, t * d, d), keys);
      for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(out.data()[t * d + i] - ref[i]) < 1e-6);
    }
  }
}

TEST_CASE("cross_attention is invariant to key permutation") {
  Rng rng(8);
  const std::size_t d = 6;
  auto p = make_cross_attention(d, 1, rng);
  auto q = random_tensor({1, 3, d}, rng);
  auto kv = random_tensor({1, 4, d}, rng);
  auto perm = concat({slice(kv, 1, 2, 1), slice(kv, 1, 0, 1), slice(kv, 1, 3, 1), slice(kv, 1, 1, 1)}, 1);
  auto a = cross_attention(p, q, kv, Tensor::full({1, 4}, 1));
  auto b = cross_attention(p, q, perm, Tensor::full({1, 4}, 1));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-6);
}

TEST_CASE("attention_pool") {
  Rng rng(10);
  const std::size_t D = 3;
  auto p = make_attention_pooling(D, rng);
  auto v = Tensor::from({1, 1, D}, {0.3, -1.2, 2.0});
  auto rep = concat({v, v, v, v}, 1);
  auto r = attention_pool(p, rep, Tensor::from({1, 4}, {1, 1, 1, 0}));
  for (std::size_t i = 0; i < D; ++i) CHECK(r.pooled.data()[i] == doctest::Approx(v.data()[i]));
  for (std::size_t t = 0; t < 3; ++t) CHECK(r.weights.data()[t] == doctest::Approx(1.0 / 3.0));
  CHECK(r.weights.data()[3] == 0);

  auto one = attention_pool(p, v, Tensor::from({1, 1}, {1}));
  CHECK(one.weights.item() == doctest::Approx(1.0));
  for (std::size_t i = 0; i < D; ++i) CHECK(one.pooled.data()[i] == v.data()[i]);

  auto seq = Tensor::from({1, 3, D}, {1, 0, 2, -1, 3, 0.5, 0, 0, 1});
  p.query = Tensor::from({0.4, -0.2, 0.9});
  auto out = attention_pool(p, seq, Tensor::full({1, 3}, 1));
  Vec s(3);
  double z = 0;
  for (std::size_t t = 0; t < 3; ++t) z += (s[t] = std::exp(dot(row(seq, t * D, D), row(p.query, 0, D)) / std::sqrt(3.0)));
  for (std::size_t i = 0; i < D; ++i) {
    double ref = 0;
    for (std::size_t t = 0; t < 3; ++t) ref += s[t] / z * seq.data()[t * D + i];
    CHECK(std::abs(out.pooled.data()[i] - ref) < 1e-6);
  }
  CHECK_THROWS_AS(attention_pool(p, seq, Tensor::zeros({1, 3})), DegenerateInputError);
}

TEST_CASE("attention_pool stays in the convex hull and weights sum to one") {
  Rng rng(12);
  for (int s = 0; s < 20; ++s) {
    const std::size_t B = 3, T = 5, D = 4;
    auto p = make_attention_pooling(D, rng);
    auto seq = random_tensor({B, T, D}, rng, -3, 3);
    const std::vector<std::size_t> len{5, 2, 3};
    auto r = attention_pool(p, seq, prefix_mask(B, T, len));
    for (std::size_t b = 0; b < B; ++b) {
      double wsum = 0;
      for (std::size_t t = 0; t < T; ++t) wsum += r.weights.data()[b * T + t];
      CHECK(wsum == doctest::Approx(1.0).epsilon(1e-6));
      for (std::size_t i = 0; i < D; ++i) {
        double lo = 1e9, hi = -1e9;
        for (std::size_t t = 0; t < len[b]; ++t) {
          lo = std::min(lo, double(seq.data()[(b * T + t) * D + i]));
          hi = std::max(hi, double(seq.data()[(b * T + t) * D + i]));
        }
        CHECK(r.pooled.data()[b * D + i] >= lo - 1e-6);
        CHECK(r.pooled.data()[b * D + i] <= hi + 1e-6);
      }
    }
  }
}

TEST_CASE("csl head") {
  Rng rng(13);
  auto p = make_csl(4, 4, 3, rng);
  for (auto* t : {&p.fc1.weight, &p.fc2.weight}) for (auto& v : t->data()) v = 0;
  const auto zero = csl_forward(p, random_tensor({2, 4}, rng));
  for (auto v : zero.data()) CHECK(v == 0);

  CslParams id{make_identity_linear(2), make_identity_linear(2)};
  auto y = csl_forward(id, Tensor::from({2, 2}, {1.5, -2, -0.5, 3}));
  CHECK(y.data()[0] == 1.5);
  CHECK(y.data()[1] == 0);
  CHECK(y.data()[2] == 0);
  CHECK(y.data()[3] == 3);

  auto q = make_csl(5, 5, 3, rng);
  q.fc1.bias = random_tensor({5}, rng);
  q.fc2.bias = random_tensor({3}, rng);
  auto x = random_tensor({2, 5}, rng);
  auto out = csl_forward(q, x);
  for (std::size_t b = 0; b < 2; ++b) {
    auto hid = matvec(q.fc1.weight, row(x, b * 5, 5));
    for (std::size_t i = 0; i < 5; ++i) hid[i] = std::max(0.0, hid[i] + q.fc1.bias.data()[i]);
    auto ref = matvec(q.fc2.weight, hid);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(out.data()[b * 3 + i] - (ref[i] + q.fc2.bias.data()[i])) < 1e-6);
  }
}

TEST_CASE("layer gradient checks") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(500 + seed);
    auto lin = make_linear(4, 3, rng);
    lin.bias = random_tensor({3}, rng);
    auto x2 = random_tensor({2, 4}, rng);
    CHECK(gradcheck([&] { return probe_sum(linear(lin, x2), 1); }, {lin.weight, lin.bias, x2}, kEps) < kTol);

    auto ln = make_layer_norm(5);
    ln.gain = random_tensor({5}, rng, 0.5, 1.5);
    auto x3 = random_tensor({2, 3, 5}, rng, -2, 2);
    CHECK(gradcheck([&] { return probe_sum(layer_norm(ln, x3), 2); }, {ln.gain, ln.shift, x3}, kEps) < kTol);

    auto gru = make_gru(3, 2, rng);
    auto xs = random_tensor({2, 4, 3}, rng);
    auto mask = prefix_mask(2, 4, {4, 2});
    CHECK(gradcheck([&] { return probe_sum(bi_gru(gru, xs, mask), 3); },
                    {xs, gru.forward.input_weights, gru.forward.hidden_weights, gru.forward.bias,
                     gru.backward.input_weights, gru.backward.hidden_weights, gru.backward.bias},
                    kEps) < kTol);

    auto att = make_cross_attention(4, seed % 2 == 0 ? 1 : 2, rng);
    auto q = random_tensor({2, 3, 4}, rng);
    auto kv = random_tensor({2, 4, 4}, rng);
    auto kv_mask = prefix_mask(2, 4, {4, 3});
    CHECK(gradcheck([&] { return probe_sum(cross_attention(att, q, kv, kv_mask), 4); },
                    {q, kv, att.query, att.key, att.value, att.output}, kEps) < kTol);

    auto pool = make_attention_pooling(4, rng);
    auto seq = random_tensor({2, 4, 4}, rng);
    CHECK(gradcheck([&] { return probe_sum(attention_pool(pool, seq, kv_mask).pooled, 5); }, {seq, pool.query},
                    kEps) < kTol);

    // fc1 output kept away from the relu kink.
    auto csl = make_csl(3, 3, 2, rng);
    csl.fc1.bias = crab::testing::away_from_zero({3}, rng, 0.5, 1.0);
    for (auto& v : csl.fc1.weight.data()) v *= Real(0.1);
    auto xc = random_tensor({2, 3}, rng);
    CHECK(gradcheck([&] { return probe_sum(csl_forward(csl, xc), 6); },
                    {xc, csl.fc1.weight, csl.fc1.bias, csl.fc2.weight, csl.fc2.bias}, kEps) < kTol);
  }
}
