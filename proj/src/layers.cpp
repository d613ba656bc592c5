#include "crab/layers.hpp"

#include <cmath>
#include <string>

#include "crab/errors.hpp"

namespace crab {

namespace {

Tensor uniform_matrix(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> data(rows * cols);
  for (auto& v : data) v = static_cast<Real>(dist(rng));
  return Tensor({rows, cols}, std::move(data), true);
}

Tensor zero_vector(std::size_t n) { return Tensor::zeros({n}, true); }

// [B, T] mask viewed as [B, 1, T] or [B, T, 1]; masks never carry grads.
Tensor mask_view(const Tensor& mask, Shape shape) {
  return Tensor(std::move(shape), std::vector<Real>(mask.data().begin(), mask.data().end()));
}

}  // namespace

LinearParams make_linear(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
  return {uniform_matrix(out_dim, in_dim, in_dim, rng), zero_vector(out_dim)};
}

LinearParams make_identity_linear(std::size_t dim) {
  std::vector<Real> w(dim * dim, Real(0));
  for (std::size_t i = 0; i < dim; ++i) w[i * dim + i] = Real(1);
  return {Tensor({dim, dim}, std::move(w), true), zero_vector(dim)};
}

LayerNormParams make_layer_norm(std::size_t dim) {
  return {Tensor::full({dim}, Real(1), true), Tensor::zeros({dim}, true), Real(1e-5)};
}

GruParams make_gru(std::size_t in_dim, std::size_t hidden, Rng& rng) {
  auto direction = [&] {
    GruDirection d;
    d.input_weights = uniform_matrix(3 * hidden, in_dim, in_dim, rng);
    d.hidden_weights = uniform_matrix(3 * hidden, hidden, hidden, rng);
    d.bias = zero_vector(3 * hidden);
    return d;
  };
  GruParams p;
  p.forward = direction();
  p.backward = direction();
  return p;
}

CrossAttentionParams make_cross_attention(std::size_t dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  CrossAttentionParams p;
  p.query = uniform_matrix(dim, dim, dim, rng);
  p.key = uniform_matrix(dim, dim, dim, rng);
  p.value = uniform_matrix(dim, dim, dim, rng);
  p.output = uniform_matrix(dim, dim, dim, rng);
  p.heads = heads;
  return p;
}

AttentionPoolingParams make_attention_pooling(std::size_t dim, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  std::vector<Real> m(dim);
  for (auto& v : m) v = static_cast<Real>(dist(rng));
  return {Tensor({dim}, std::move(m), true)};
}

CslParams make_csl(std::size_t in_dim, std::size_t hidden_dim, std::size_t out_dim, Rng& rng) {
  CslParams p;
  p.fc1 = make_linear(in_dim, hidden_dim, rng);
  p.fc2 = make_linear(hidden_dim, out_dim, rng);
  return p;
}

Tensor linear(const LinearParams& p, const Tensor& x) {
  if (x.shape().back() != p.in_dim()) {
    throw DimensionError("linear expects trailing dim " + std::to_string(p.in_dim()) + ", got " +
                         shape_str(x.shape()));
  }
  return add(matmul(x, p.weight, true), p.bias);
}

Tensor layer_norm(const LayerNormParams& p, const Tensor& x) { return layer_norm(x, p.gain, p.shift, p.epsilon); }

std::vector<std::size_t> prefix_lengths(const Tensor& mask) {
  if (mask.rank() != 2) throw DimensionError("mask must be [B, T], got " + shape_str(mask.shape()));
  const std::size_t batch = mask.dim(0);
  const std::size_t steps = mask.dim(1);
  auto md = mask.data();
  std::vector<std::size_t> lengths(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t len = 0;
    while (len < steps && md[b * steps + len] == Real(1)) ++len;
    for (std::size_t t = len; t < steps; ++t) {
      if (md[b * steps + t] != Real(0)) {
        throw ContractError("mask row " + std::to_string(b) + " is not a right-padded prefix of ones");
      }
    }
    if (len == 0) throw DegenerateInputError("mask row " + std::to_string(b) + " has no valid positions");
    lengths[b] = len;
  }
  return lengths;
}

Tensor bi_gru(const GruParams& p, const Tensor& x, const Tensor& mask) {
  if (x.rank() != 3) throw DimensionError("bi_gru input must be [B, T, in], got " + shape_str(x.shape()));
  if (mask.shape() != Shape{x.dim(0), x.dim(1)}) {
    throw DimensionError("bi_gru mask " + shape_str(mask.shape()) + " does not match input " + shape_str(x.shape()));
  }
  const auto lengths = prefix_lengths(mask);
  auto run = [&](const GruDirection& d, bool reverse) {
    auto gates = add(matmul(x, d.input_weights, true), d.bias);
    return gru_scan(gates, d.hidden_weights, lengths, reverse);
  };
  return concat({run(p.forward, false), run(p.backward, true)}, -1);
}

Tensor cross_attention(const CrossAttentionParams& p, const Tensor& query_seq, const Tensor& key_value_seq,
                       const Tensor& kv_mask) {
  if (query_seq.rank() != 3 || key_value_seq.rank() != 3) {
    throw DimensionError("cross_attention expects [B, T, d] sequences");
  }
  const std::size_t batch = query_seq.dim(0);
  const std::size_t d = query_seq.dim(2);
  const std::size_t tk = key_value_seq.dim(1);
  if (key_value_seq.dim(0) != batch || key_value_seq.dim(2) != d || p.query.shape() != Shape{d, d}) {
    throw DimensionError("cross_attention dims disagree: query " + shape_str(query_seq.shape()) + ", keys " +
                         shape_str(key_value_seq.shape()) + ", weights " + shape_str(p.query.shape()));
  }
  if (kv_mask.shape() != Shape{batch, tk}) throw DimensionError("cross_attention mask must be [B, Tk]");
  auto md = kv_mask.data();
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < tk; ++t) any = any || md[b * tk + t] != Real(0);
    if (!any) throw DegenerateInputError("cross_attention row " + std::to_string(b) + " has every key masked");
  }

  const auto q = matmul(query_seq, p.query, true);
  const auto k = matmul(key_value_seq, p.key, true);
  const auto v = matmul(key_value_seq, p.value, true);
  const auto mask = mask_view(kv_mask, {batch, 1, tk});
  const std::size_t head_dim = d / p.heads;
  const Real inv_sqrt = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(head_dim)));

  auto attend = [&](const Tensor& qh, const Tensor& kh, const Tensor& vh) {
    auto weights = softmax(scale(matmul(qh, kh, true), inv_sqrt), -1, mask);
    return matmul(weights, vh);
  };

  Tensor context;
  if (p.heads == 1) {
    context = attend(q, k, v);
  } else {
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < p.heads; ++h) {
      heads.push_back(attend(slice(q, -1, h * head_dim, head_dim), slice(k, -1, h * head_dim, head_dim),
                             slice(v, -1, h * head_dim, head_dim)));
    }
    context = concat(heads, -1);
  }
  return matmul(context, p.output, true);
}

PooledSequence attention_pool(const AttentionPoolingParams& p, const Tensor& seq, const Tensor& mask) {
  if (seq.rank() != 3) throw DimensionError("attention_pool expects [B, T, D], got " + shape_str(seq.shape()));
  const std::size_t batch = seq.dim(0);
  const std::size_t steps = seq.dim(1);
  const std::size_t dim = seq.dim(2);
  if (p.query.shape() != Shape{dim}) {
    throw DimensionError("attention_pool query must be [" + std::to_string(dim) + "]");
  }
  if (mask.shape() != Shape{batch, steps}) throw DimensionError("attention_pool mask must be [B, T]");
  const Real inv_sqrt = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dim)));
  auto scores = scale(matmul(seq, reshape(p.query, {dim, 1})), inv_sqrt);  // [B, T, 1]
  auto weights = softmax(scores, 1, mask_view(mask, {batch, steps, 1}));
  auto pooled = sum(mul(seq, weights), 1);
  auto w = weights.detach();
  return {pooled, Tensor({batch, steps}, std::vector<Real>(w.data().begin(), w.data().end()))};
}

Tensor csl_forward(const CslParams& p, const Tensor& x) { return linear(p.fc2, relu(linear(p.fc1, x))); }

}  // namespace crab
