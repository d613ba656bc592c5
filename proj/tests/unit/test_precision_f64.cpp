#include <cmath>
#include <type_traits>

#include "doctest.h"

#include "crab/layers.hpp"
#include "crab/losses.hpp"
#include "crab/model.hpp"
#include "crab/optim.hpp"
#include "test_util.hpp"

using namespace crab;
using crab::testing::gradcheck;
using crab::testing::probe_sum;
using crab::testing::random_tensor;

static_assert(std::is_same_v<Real, double>, "this suite targets the double-precision core");

namespace {

constexpr double kEps = 1e-6;
constexpr double kTol = 1e-6;

Tensor prefix_mask(std::size_t batch, std::size_t steps, const std::vector<std::size_t>& lengths) {
  std::vector<Real> m(batch * steps, 0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < lengths[b]; ++t) m[b * steps + t] = 1;
  return Tensor({batch, steps}, std::move(m));
}

void set_unit_grad(Tensor& t) {
  t.set_requires_grad(true);
  t.zero_grad();
  Tape tape;
  tape.backward(sum(t));
}

}  // namespace

TEST_CASE("layer gradients in double precision") {
  for (int seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    Rng rng(900 + seed);
    auto lin = make_linear(4, 3, rng);
    lin.bias = random_tensor({3}, rng);
    auto x2 = random_tensor({2, 4}, rng);
    CHECK(gradcheck([&] { return probe_sum(linear(lin, x2), 1); }, {lin.weight, lin.bias, x2}, kEps) < kTol);

    auto ln = make_layer_norm(3);
    ln.gain = random_tensor({3}, rng, 0.5, 1.5);
    auto x3 = random_tensor({2, 3, 3}, rng, -2, 2);
    CHECK(gradcheck([&] { return probe_sum(layer_norm(ln, x3), 2); }, {ln.gain, ln.shift, x3}, kEps) < kTol);

    auto gru = make_gru(3, 2, rng);
    auto xs = random_tensor({2, 5, 3}, rng);
    auto mask = prefix_mask(2, 5, {5, 3});
    CHECK(gradcheck([&] { return probe_sum(bi_gru(gru, xs, mask), 3); },
                    {xs, gru.forward.input_weights, gru.forward.hidden_weights, gru.forward.bias,
                     gru.backward.input_weights, gru.backward.hidden_weights, gru.backward.bias},
                    kEps) < kTol);

    auto att = make_cross_attention(4, seed % 2 == 0 ? 1 : 2, rng);
    auto q = random_tensor({2, 3, 4}, rng);
    auto kv = random_tensor({2, 4, 4}, rng);
    auto kv_mask = prefix_mask(2, 4, {4, 2});
    CHECK(gradcheck([&] { return probe_sum(cross_attention(att, q, kv, kv_mask), 4); },
                    {q, kv, att.query, att.key, att.value, att.output}, kEps) < kTol);

    auto pool = make_attention_pooling(4, rng);
    CHECK(gradcheck([&] { return probe_sum(attention_pool(pool, kv, kv_mask).pooled, 5); }, {kv, pool.query},
                    kEps) < kTol);

    auto csl = make_csl(3, 3, 2, rng);
    csl.fc1.bias = crab::testing::away_from_zero({3}, rng, 0.5, 1.0);
    for (auto& v : csl.fc1.weight.data()) v *= 0.1;
    auto xc = random_tensor({2, 3}, rng);
    CHECK(gradcheck([&] { return probe_sum(csl_forward(csl, xc), 6); },
                    {xc, csl.fc1.weight, csl.fc1.bias, csl.fc2.weight, csl.fc2.bias}, kEps) < kTol);
  }
}

TEST_CASE("loss gradients in double precision") {
  for (int seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    Rng rng(950 + seed);
    const std::vector<int> y{0, 1, 2, 1, 0, 2};
    const std::vector<std::int64_t> counts{2, 2, 1};
    const auto w = class_weights_from_counts(counts);
    auto logits = random_tensor({6, 3}, rng, -2, 2);
    auto e = random_tensor({6, 4}, rng);
    auto e2 = random_tensor({6, 4}, rng);
    ContrastiveConfig c;
    c.tau = 0.1;
    CHECK(gradcheck([&] { return weighted_cross_entropy(logits, y, w); }, {logits}, kEps) < kTol);
    CHECK(gradcheck([&] { return mpcl_loss(e, y, c).loss; }, {e}, kEps) < kTol);
    CHECK(gradcheck([&] { return scl_loss(e, y, c).loss; }, {e}, kEps) < kTol);
    LossConfig cfg;
    cfg.contrastive = c;
    cfg.class_weights = w;
    CHECK(gradcheck([&] {
            std::vector<Tensor> legs{e, e2};
            return combined_objective(logits, legs, y, cfg).total;
          },
          {logits, e, e2}, kEps) < kTol);
  }
}

TEST_CASE("AdamW trace through the optimizer class") {
  OptimConfig cfg;
  cfg.weight_decay = 0.01;
  const double lr = 1e-3;
  for (double theta0 : {1.0, -0.3, 2.5}) {
    // Loss theta^2, gradient 2 theta.
    double theta = theta0, m = 0, v = 0;
    auto w = Tensor::from({1}, {theta0});
    AdamW opt({{"main", {w}, lr}}, cfg);
    for (int t = 1; t <= 3; ++t) {
      const double g = 2 * theta;
      m = cfg.beta1 * m + (1 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
      const double mh = m / (1 - std::pow(cfg.beta1, t)), vh = v / (1 - std::pow(cfg.beta2, t));
      theta -= lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * theta);

      w.set_requires_grad(true);
      w.zero_grad();
      {
        Tape tape;
        tape.backward(sum(mul(w, w)));
      }
      const double lrs[] = {lr};
      opt.step(lrs);
      opt.zero_grad();
      CHECK(std::abs(w.data()[0] - theta) < 1e-10);
    }
  }
}

TEST_CASE("hierarchical update ratio through the optimizer class") {
  ModelConfig mc;
  mc.speech_dim = 5;
  mc.text_dim = 4;
  mc.hidden = 4;
  mc.num_classes = 3;
  mc.csl_dim = 3;
  mc.encoder_stub = true;
  auto params = init_params(mc, 7);
  OptimConfig cfg;
  cfg.weight_decay = 0;
  cfg.lr_main = 1e-5;
  cfg.lr_encoder = 1e-6;
  const auto groups = parameter_groups(params);
  ParamGroupSpec main{"main", {}, cfg.lr_main}, enc{"encoder", {}, cfg.lr_encoder};
  for (auto& np : groups.main) main.params.push_back(np.tensor);
  for (auto& np : groups.encoder) enc.params.push_back(np.tensor);
  AdamW opt({main, enc}, cfg);
  const auto lrs = opt.scheduled_lrs(17, 50);

  std::vector<std::vector<double>> before;
  for (const auto& g : opt.groups())
    for (auto p : g.params) {
      set_unit_grad(p);
      before.emplace_back(p.data().begin(), p.data().end());
    }
  opt.step(lrs);
  double moved[2] = {0, 0};
  std::size_t n[2] = {0, 0}, k = 0;
  for (std::size_t gi = 0; gi < 2; ++gi)
    for (const auto& p : opt.groups()[gi].params) {
      const auto& b = before[k++];
      for (std::size_t i = 0; i < p.size(); ++i) moved[gi] += std::abs(p.data()[i] - b[i]);
      n[gi] += p.size();
    }
  const double ratio = (moved[0] / double(n[0])) / (moved[1] / double(n[1]));
  CHECK(std::abs(ratio - 10.0) < 1e-9);
  CHECK(std::abs(lrs[0] / lrs[1] - 10.0) < 1e-12);
}
