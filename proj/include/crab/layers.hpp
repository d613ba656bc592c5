#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "crab/ops.hpp"
#include "crab/tensor.hpp"

namespace crab {

using Rng = std::mt19937_64;

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }
};

struct LayerNormParams {
  Tensor gain;   // [dim]
  Tensor shift;  // [dim]
  Real epsilon = Real(1e-5);
};

// One GRU direction; gate blocks are stacked row-wise in the order z, r, n.
struct GruDirection {
  Tensor input_weights;   // [3h, in]
  Tensor hidden_weights;  // [3h, h]
  Tensor bias;            // [3h]
};

struct GruParams {
  GruDirection forward;
  GruDirection backward;

  std::size_t hidden() const { return forward.hidden_weights.dim(1); }
};

// Projection matrices are [d, d] and carry no bias.
struct CrossAttentionParams {
  Tensor query;
  Tensor key;
  Tensor value;
  Tensor output;
  std::size_t heads = 1;
};

struct AttentionPoolingParams {
  Tensor query;  // the trainable vector m, [D]
};

// Contrastive supervision leg: fc2(relu(fc1(x))).
struct CslParams {
  LinearParams fc1;
  LinearParams fc2;
};

// Initializers. Matrices draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) and
// biases start at zero.
LinearParams make_linear(std::size_t in_dim, std::size_t out_dim, Rng& rng);
LinearParams make_identity_linear(std::size_t dim);
LayerNormParams make_layer_norm(std::size_t dim);
GruParams make_gru(std::size_t in_dim, std::size_t hidden, Rng& rng);
CrossAttentionParams make_cross_attention(std::size_t dim, std::size_t heads, Rng& rng);
// m ~ N(0, 1/sqrt(D)) (standard deviation).
AttentionPoolingParams make_attention_pooling(std::size_t dim, Rng& rng);
CslParams make_csl(std::size_t in_dim, std::size_t hidden_dim, std::size_t out_dim, Rng& rng);

// x W^T + b over the trailing axis.
Tensor linear(const LinearParams& p, const Tensor& x);

Tensor layer_norm(const LayerNormParams& p, const Tensor& x);

// Valid length per row of a right-padded 0/1 mask [B, T]. Raises
// ContractError if a row is not a contiguous prefix of ones.
std::vector<std::size_t> prefix_lengths(const Tensor& mask);

// x [B, T, in], mask [B, T] -> [B, T, 2h]: forward states then backward
// states. Padded timesteps are zero.
Tensor bi_gru(const GruParams& p, const Tensor& x, const Tensor& mask);

// Scaled dot-product attention of query_seq [B, Tq, d] over key_value_seq
// [B, Tk, d]; kv_mask [B, Tk] marks valid keys. Returns [B, Tq, d] after the
// output projection. The residual connection belongs to the caller.
Tensor cross_attention(const CrossAttentionParams& p, const Tensor& query_seq, const Tensor& key_value_seq,
                       const Tensor& kv_mask);

struct PooledSequence {
  Tensor pooled;   // [B, D]
  Tensor weights;  // [B, T], detached diagnostics
};

// w_i = softmax_i(r_i . m / sqrt(D)) over valid positions; r = sum_i w_i r_i.
PooledSequence attention_pool(const AttentionPoolingParams& p, const Tensor& seq, const Tensor& mask);

Tensor csl_forward(const CslParams& p, const Tensor& x);

}  // namespace crab
