#pragma once

#include <optional>
#include <span>
#include <vector>

#include "crab/tensor.hpp"

// Differentiable primitives. Every op validates shapes, checks its output for
// NaN/Inf and, when recording, registers a backward rule on the active tape.
//
// Broadcasting follows trailing-axis alignment: shapes are right-aligned and
// each pair of extents must be equal or one of them 1. Masks are 0/1 tensors
// broadcastable to the tensor they mask and never receive gradients.
namespace crab {

// [.., m, k] x [.., k, n] -> [.., m, n]. Batch dims of a and b must match,
// or b may be a plain matrix shared across a's batch. With transpose_b the
// last two axes of b are read swapped ([.., n, k]).
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
// Raises DomainError for any x <= 0.
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Masked positions get an additive -1e9 before exponentiation and end up with
// probability 0; log_softmax reports them as a constant 0. A row whose positions are all masked raises
// DegenerateInputError.
Tensor softmax(const Tensor& x, std::ptrdiff_t axis, const std::optional<Tensor>& mask = std::nullopt);
Tensor log_softmax(const Tensor& x, std::ptrdiff_t axis, const std::optional<Tensor>& mask = std::nullopt);
// log(sum(exp(x))) over valid positions; the axis is removed.
Tensor logsumexp(const Tensor& x, std::ptrdiff_t axis, const std::optional<Tensor>& mask = std::nullopt);

// Full reductions to a scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Axis reductions; the axis is removed. A masked mean divides by the number
// of valid positions and raises DegenerateInputError when that is zero.
Tensor sum(const Tensor& x, std::ptrdiff_t axis, const std::optional<Tensor>& mask = std::nullopt);
Tensor mean(const Tensor& x, std::ptrdiff_t axis, const std::optional<Tensor>& mask = std::nullopt);

Tensor concat(std::span<const Tensor> parts, std::ptrdiff_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::ptrdiff_t axis);
Tensor slice(const Tensor& x, std::ptrdiff_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);

// Normalizes over the last axis with biased variance, then applies gain and
// shift (both shaped [D]).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, Real epsilon);

// Scales each vector along the last axis to unit Euclidean norm.
Tensor l2_normalize(const Tensor& x);

// GRU recurrence over precomputed input gate activations.
//   gates_x        [B, T, 3h]  rows ordered (z, r, n): W x_t + b per gate
//   hidden_weights [3h, h]     U_z, U_r, U_n stacked
//   lengths        per-row valid prefix length, 1..T
// Per step with h_0 = 0:
//   z = sigmoid(gx_z + U_z h), r = sigmoid(gx_r + U_r h)
//   n = tanh(gx_n + U_n (r * h)), h' = (1 - z) * h + z * n
// With reverse, row b is scanned from lengths[b]-1 down to 0. Outputs beyond
// a row's length are exactly zero.
Tensor gru_scan(const Tensor& gates_x, const Tensor& hidden_weights,
                std::span<const std::size_t> lengths, bool reverse);

// Wraps a value computed outside the primitive set as one op: checks it for
// NaN/Inf, counts it and, when an input requires grad, records `backward`,
// which must accumulate into the inputs' gradients itself.
Tensor custom_op(Shape shape, std::vector<Real> values, const std::vector<Tensor>& inputs, BackwardFn backward,
                 const char* name);

}  // namespace crab
