#include "crab/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "crab/errors.hpp"

namespace crab {

namespace {

using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

thread_local std::uint64_t g_op_counter = 0;


std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank) {
  auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis);
}

void check_finite(std::span<const Real> values, const char* op) {
  for (auto v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

template <class... Ts>
bool recording(const Ts&... inputs) {
  return Tape::active() != nullptr && (inputs.requires_grad() || ...);
}

// Adds src into the gradient buffer of `impl` when that tensor tracks grads.
void accumulate(const std::shared_ptr<detail::TensorImpl>& impl, std::span<const Real> src) {
  if (!impl->requires_grad) return;
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), Real(0));
  for (std::size_t i = 0; i < src.size(); ++i) impl->grad[i] += src[i];
}

std::span<Real> grad_buffer(const std::shared_ptr<detail::TensorImpl>& impl) {
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), Real(0));
  return impl->grad;
}

Tensor make_output(Shape shape, std::vector<Real> data, const char* op) {
  check_finite(data, op);
  ++g_op_counter;
  return Tensor(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Broadcasting

Shape broadcast_shape(const Shape& a, const Shape& b) {
  auto r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` expressed over the axes of `out`; broadcast axes get 0.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    auto o = k + (out.size() - in.size());
    strides[o] = in[k] == 1 ? 0 : stride;
    stride *= in[k];
  }
  return strides;
}

template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t r = out.size();
  const std::size_t n = numel(out);
  const std::size_t inner = out[r - 1];
  const std::size_t step_a = sa[r - 1];
  const std::size_t step_b = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * step_a, ib + j * step_b);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Expands a 0/1 mask to the full shape of x.
std::vector<unsigned char> expand_mask(const std::optional<Tensor>& mask, const Shape& shape) {
  std::vector<unsigned char> valid(numel(shape), 1);
  if (!mask) return valid;
  const auto& ms = mask->shape();
  if (ms.size() > shape.size() || broadcast_shape(shape, ms) != shape) {
    throw DimensionError("mask " + shape_str(ms) + " does not broadcast to " + shape_str(shape));
  }
  auto sm = broadcast_strides(ms, shape);
  std::vector<std::size_t> zero(shape.size(), 0);
  auto md = mask->data();
  for_each_broadcast(shape, sm, zero, [&](std::size_t o, std::size_t im, std::size_t) {
    Real v = md[im];
    if (v != Real(0) && v != Real(1)) throw ContractError("mask values must be 0 or 1");
    valid[o] = v != Real(0);
  });
  return valid;
}

struct AxisView {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const auto out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<Real> out(numel(out_shape));
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      switch (kind) {
        case BinaryKind::Add: out[i] = ad[i] + bd[i]; break;
        case BinaryKind::Sub: out[i] = ad[i] - bd[i]; break;
        case BinaryKind::Mul: out[i] = ad[i] * bd[i]; break;
      }
    }
  } else {
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case BinaryKind::Add: out[o] = ad[ia] + bd[ib]; break;
        case BinaryKind::Sub: out[o] = ad[ia] - bd[ib]; break;
        case BinaryKind::Mul: out[o] = ad[ia] * bd[ib]; break;
      }
    });
  }
  auto result = make_output(out_shape, std::move(out), name);
  if (recording(a, b)) {
    auto ai = a.impl();
    auto bi = b.impl();
    Tape::active()->record({a, b}, result, [ai, bi, out_shape, sa, sb, kind](std::span<const Real> g) {
      const bool need_a = ai->requires_grad;
      const bool need_b = bi->requires_grad;
      std::span<Real> ga = need_a ? grad_buffer(ai) : std::span<Real>{};
      std::span<Real> gb = need_b ? grad_buffer(bi) : std::span<Real>{};
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        switch (kind) {
          case BinaryKind::Add:
            if (need_a) ga[ia] += g[o];
            if (need_b) gb[ib] += g[o];
            break;
          case BinaryKind::Sub:
            if (need_a) ga[ia] += g[o];
            if (need_b) gb[ib] -= g[o];
            break;
          case BinaryKind::Mul:
            if (need_a) ga[ia] += g[o] * bi->data[ib];
            if (need_b) gb[ib] += g[o] * ai->data[ia];
            break;
        }
      });
    });
  }
  return result;
}

// Elementwise unary op; `deriv` maps (x, y) to dy/dx.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  auto xd = x.data();
  std::vector<Real> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  auto result = make_output(x.shape(), std::move(out), name);
  if (recording(x)) {
    auto xi = x.impl();
    auto yi = result.impl();
    Tape::active()->record({x}, result, [xi, yi, deriv](std::span<const Real> g) {
      auto gx = grad_buffer(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xi->data[i], yi->data[i]);
    });
  }
  return result;
}

enum class SoftKind { Softmax, LogSoftmax };

Tensor soft(const Tensor& x, std::ptrdiff_t axis_arg, const std::optional<Tensor>& mask, SoftKind kind) {
  const auto axis = normalize_axis(axis_arg, x.rank());
  const auto v = axis_view(x.shape(), axis);
  const auto valid = expand_mask(mask, x.shape());
  auto xd = x.data();
  std::vector<Real> out(xd.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t k = 0; k < v.n; ++k) {
        auto idx = base + k * v.inner;
        if (valid[idx]) mx = std::max(mx, xd[idx]);
      }
      if (!std::isfinite(mx)) throw DegenerateInputError("softmax row has no valid positions");
      double total = 0.0;
      for (std::size_t k = 0; k < v.n; ++k) {
        auto idx = base + k * v.inner;
        if (valid[idx]) total += std::exp(static_cast<double>(xd[idx] - mx));
      }
      const double lse = static_cast<double>(mx) + std::log(total);
      for (std::size_t k = 0; k < v.n; ++k) {
        auto idx = base + k * v.inner;
        // Masked positions are dropped from the normaliser, which is exactly what an
        // additive -1e9 gives once exp() underflows.
        // Their log-probability is reported as a constant 0 so that callers
        // weighting it by a zero target never see -1e9 magnitudes.
        if (!valid[idx]) {
          out[idx] = Real(0);
        } else if (kind == SoftKind::Softmax) {
          out[idx] = static_cast<Real>(std::exp(static_cast<double>(xd[idx]) - lse));
        } else {
          out[idx] = static_cast<Real>(static_cast<double>(xd[idx]) - lse);
        }
      }
    }
  }
  auto result = make_output(x.shape(), std::move(out),
                            kind == SoftKind::Softmax ? "softmax" : "log_softmax");
  if (recording(x)) {
    auto xi = x.impl();
    auto yi = result.impl();
    Tape::active()->record({x}, result, [xi, yi, v, valid, kind](std::span<const Real> g) {
      auto gx = grad_buffer(xi);
      const auto& y = yi->data;
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.n * v.inner + i;
          double acc = 0.0;
          for (std::size_t k = 0; k < v.n; ++k) {
            auto idx = base + k * v.inner;
            if (!valid[idx]) continue;
            acc += kind == SoftKind::Softmax ? static_cast<double>(g[idx]) * y[idx] : g[idx];
          }
          for (std::size_t k = 0; k < v.n; ++k) {
            auto idx = base + k * v.inner;
            if (!valid[idx]) continue;
            if (kind == SoftKind::Softmax) {
              gx[idx] += static_cast<Real>(y[idx] * (g[idx] - acc));
            } else {
              gx[idx] += static_cast<Real>(g[idx] - std::exp(static_cast<double>(y[idx])) * acc);
            }
          }
        }
      }
    });
  }
  return result;
}

Tensor axis_reduce(const Tensor& x, std::ptrdiff_t axis_arg, const std::optional<Tensor>& mask, bool average) {
  const auto axis = normalize_axis(axis_arg, x.rank());
  const auto v = axis_view(x.shape(), axis);
  const auto valid = expand_mask(mask, x.shape());
  auto xd = x.data();
  std::vector<Real> out(v.outer * v.inner);
  std::vector<Real> factor(out.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double acc = 0.0;
      std::size_t count = 0;
      for (std::size_t k = 0; k < v.n; ++k) {
        auto idx = base + k * v.inner;
        if (valid[idx]) {
          acc += xd[idx];
          ++count;
        }
      }
      if (average && count == 0) throw DegenerateInputError("masked mean over a row with no valid positions");
      const double f = average ? 1.0 / static_cast<double>(count) : 1.0;
      out[o * v.inner + i] = static_cast<Real>(acc * f);
      factor[o * v.inner + i] = static_cast<Real>(f);
    }
  }
  auto result = make_output(drop_axis(x.shape(), axis), std::move(out), average ? "mean" : "sum");
  if (recording(x)) {
    auto xi = x.impl();
    Tape::active()->record({x}, result, [xi, v, valid, factor](std::span<const Real> g) {
      auto gx = grad_buffer(xi);
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.n * v.inner + i;
          const Real gi = g[o * v.inner + i] * factor[o * v.inner + i];
          for (std::size_t k = 0; k < v.n; ++k) {
            auto idx = base + k * v.inner;
            if (valid[idx]) gx[idx] += gi;
          }
        }
      }
    });
  }
  return result;
}

}  // namespace

std::uint64_t op_counter() { return g_op_counter; }

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t bk = transpose_b ? bs.back() : bs[bs.size() - 2];
  const std::size_t n = transpose_b ? bs[bs.size() - 2] : bs.back();
  if (k != bk) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(as) + " x " + shape_str(bs) +
                         (transpose_b ? " (b transposed)" : ""));
  }
  const bool shared_b = bs.size() == 2;
  std::size_t batches = 1;
  if (!shared_b) {
    if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
      throw DimensionError("matmul batch dimensions differ: " + shape_str(as) + " x " + shape_str(bs));
    }
    for (std::size_t i = 0; i + 2 < as.size(); ++i) batches *= as[i];
  }
  // A shared right operand lets the whole left operand act as one tall matrix.
  const std::size_t rows = shared_b ? a.size() / k : m;
  if (shared_b) batches = 1;

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  std::vector<Real> out(numel(out_shape));
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t t = 0; t < batches; ++t) {
    CMapR A(ad.data() + t * rows * k, rows, k);
    MapR C(out.data() + t * rows * n, rows, n);
    if (transpose_b) {
      CMapR Bt(bd.data() + t * n * k, n, k);
      C.noalias() = A * Bt.transpose();
    } else {
      CMapR B(bd.data() + t * k * n, k, n);
      C.noalias() = A * B;
    }
  }
  auto result = make_output(std::move(out_shape), std::move(out), "matmul");
  if (recording(a, b)) {
    auto ai = a.impl();
    auto bi = b.impl();
    Tape::active()->record({a, b}, result, [ai, bi, rows, k, n, batches, transpose_b](std::span<const Real> g) {
      for (std::size_t t = 0; t < batches; ++t) {
        CMapR G(g.data() + t * rows * n, rows, n);
        if (ai->requires_grad) {
          MapR GA(grad_buffer(ai).data() + t * rows * k, rows, k);
          if (transpose_b) {
            GA.noalias() += G * CMapR(bi->data.data() + t * n * k, n, k);
          } else {
            GA.noalias() += G * CMapR(bi->data.data() + t * k * n, k, n).transpose();
          }
        }
        if (bi->requires_grad) {
          CMapR A(ai->data.data() + t * rows * k, rows, k);
          if (transpose_b) {
            MapR GB(grad_buffer(bi).data() + t * n * k, n, k);
            GB.noalias() += G.transpose() * A;
          } else {
            MapR GB(grad_buffer(bi).data() + t * k * n, k, n);
            GB.noalias() += A.transpose() * G;
          }
        }
      }
    });
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul, "mul"); }

Tensor scale(const Tensor& x, Real factor) {
  return unary(
      x, "scale", [factor](Real v) { return v * factor; }, [factor](Real, Real) { return factor; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](Real v) { return v > Real(0) ? v : Real(0); },
      [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& x) {
  for (auto v : x.data()) {
    if (!(v > Real(0))) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary(
      x, "log", [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](Real v) { return std::tanh(v); }, [](Real, Real y) { return Real(1) - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid", [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor softmax(const Tensor& x, std::ptrdiff_t axis, const std::optional<Tensor>& mask) {
  return soft(x, axis, mask, SoftKind::Softmax);
}

Tensor log_softmax(const Tensor& x, std::ptrdiff_t axis, const std::optional<Tensor>& mask) {
  return soft(x, axis, mask, SoftKind::LogSoftmax);
}

Tensor logsumexp(const Tensor& x, std::ptrdiff_t axis_arg, const std::optional<Tensor>& mask) {
  const auto axis = normalize_axis(axis_arg, x.rank());
  const auto v = axis_view(x.shape(), axis);
  const auto valid = expand_mask(mask, x.shape());
  auto xd = x.data();
  std::vector<Real> out(v.outer * v.inner);
  std::vector<Real> prob(xd.size(), Real(0));
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t k = 0; k < v.n; ++k) {
        auto idx = base + k * v.inner;
        if (valid[idx]) mx = std::max(mx, xd[idx]);
      }
      if (!std::isfinite(mx)) throw DegenerateInputError("logsumexp row has no valid positions");
      double total = 0.0;
      for (std::size_t k = 0; k < v.n; ++k) {
        auto idx = base + k * v.inner;
        if (valid[idx]) total += std::exp(static_cast<double>(xd[idx] - mx));
      }
      const double lse = static_cast<double>(mx) + std::log(total);
      out[o * v.inner + i] = static_cast<Real>(lse);
      for (std::size_t k = 0; k < v.n; ++k) {
        auto idx = base + k * v.inner;
        if (valid[idx]) prob[idx] = static_cast<Real>(std::exp(static_cast<double>(xd[idx]) - lse));
      }
    }
  }
  auto result = make_output(drop_axis(x.shape(), axis), std::move(out), "logsumexp");
  if (recording(x)) {
    auto xi = x.impl();
    Tape::active()->record({x}, result, [xi, v, prob = std::move(prob)](std::span<const Real> g) {
      auto gx = grad_buffer(xi);
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.n * v.inner + i;
          const Real gi = g[o * v.inner + i];
          for (std::size_t k = 0; k < v.n; ++k) {
            auto idx = base + k * v.inner;
            gx[idx] += gi * prob[idx];
          }
        }
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& x) { return axis_reduce(reshape(x, {x.size()}), 0, std::nullopt, false); }

Tensor mean(const Tensor& x) { return axis_reduce(reshape(x, {x.size()}), 0, std::nullopt, true); }

Tensor sum(const Tensor& x, std::ptrdiff_t axis, const std::optional<Tensor>& mask) {
  return axis_reduce(x, axis, mask, false);
}

Tensor mean(const Tensor& x, std::ptrdiff_t axis, const std::optional<Tensor>& mask) {
  return axis_reduce(x, axis, mask, true);
}

Tensor concat(std::span<const Tensor> parts, std::ptrdiff_t axis_arg) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const auto& first = parts.front().shape();
  const auto axis = normalize_axis(axis_arg, first.size());
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw DimensionError("concat operands " + shape_str(first) + " and " + shape_str(s) + " disagree");
    out_shape[axis] += s[axis];
  }
  const auto v = axis_view(out_shape, axis);
  std::vector<Real> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t block = p.shape()[axis] * v.inner;
    auto pd = p.data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(pd.begin() + o * block, block, out.begin() + o * v.n * v.inner + offset);
    }
    offsets.push_back(offset);
    offset += block;
  }
  auto result = make_output(out_shape, std::move(out), "concat");
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (Tape::active() != nullptr && any) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    Tape::active()->record(std::move(inputs), result, [impls, offsets, v, axis](std::span<const Real> g) {
      for (std::size_t j = 0; j < impls.size(); ++j) {
        if (!impls[j]->requires_grad) continue;
        auto gp = grad_buffer(impls[j]);
        const std::size_t block = impls[j]->shape[axis] * v.inner;
        for (std::size_t o = 0; o < v.outer; ++o) {
          const Real* src = g.data() + o * v.n * v.inner + offsets[j];
          Real* dst = gp.data() + o * block;
          for (std::size_t q = 0; q < block; ++q) dst[q] += src[q];
        }
      }
    });
  }
  return result;
}

Tensor concat(std::initializer_list<Tensor> parts, std::ptrdiff_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, std::ptrdiff_t axis_arg, std::size_t start, std::size_t length) {
  const auto axis = normalize_axis(axis_arg, x.rank());
  const auto& s = x.shape();
  if (length == 0 || start + length > s[axis]) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis of extent " + std::to_string(s[axis]));
  }
  const auto v = axis_view(s, axis);
  Shape out_shape = s;
  out_shape[axis] = length;
  std::vector<Real> out(numel(out_shape));
  auto xd = x.data();
  const std::size_t block = length * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(xd.begin() + o * v.n * v.inner + start * v.inner, block, out.begin() + o * block);
  }
  auto result = make_output(std::move(out_shape), std::move(out), "slice");
  if (recording(x)) {
    auto xi = x.impl();
    Tape::active()->record({x}, result, [xi, v, start, block](std::span<const Real> g) {
      auto gx = grad_buffer(xi);
      for (std::size_t o = 0; o < v.outer; ++o) {
        Real* dst = gx.data() + o * v.n * v.inner + start * v.inner;
        const Real* src = g.data() + o * block;
        for (std::size_t q = 0; q < block; ++q) dst[q] += src[q];
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<Real> out(x.data().begin(), x.data().end());
  auto result = make_output(std::move(shape), std::move(out), "reshape");
  if (recording(x)) {
    auto xi = x.impl();
    Tape::active()->record({x}, result, [xi](std::span<const Real> g) { accumulate(xi, g); });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, Real epsilon) {
  if (!(epsilon > Real(0))) throw ContractError("layer_norm epsilon must be positive");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || shift.shape() != Shape{d}) {
    throw DimensionError("layer_norm params must be [" + std::to_string(d) + "], got " +
                         shape_str(gain.shape()) + " and " + shape_str(shift.shape()));
  }
  const std::size_t rows = x.size() / d;
  auto xd = x.data();
  auto gd = gain.data();
  auto sd = shift.data();
  std::vector<Real> out(xd.size());
  std::vector<Real> xhat(xd.size());
  std::vector<Real> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + epsilon);
    rstd[r] = static_cast<Real>(inv);
    for (std::size_t j = 0; j < d; ++j) {
      const Real xh = static_cast<Real>((row[j] - mu) * inv);
      xhat[r * d + j] = xh;
      out[r * d + j] = xh * gd[j] + sd[j];
    }
  }
  auto result = make_output(x.shape(), std::move(out), "layer_norm");
  if (recording(x, gain, shift)) {
    auto xi = x.impl();
    auto gi = gain.impl();
    auto si = shift.impl();
    Tape::active()->record({x, gain, shift}, result,
                           [xi, gi, si, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](std::span<const Real> g) {
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* gr = g.data() + r * d;
        const Real* xh = xhat.data() + r * d;
        if (gi->requires_grad) {
          auto gg = grad_buffer(gi);
          for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xh[j];
        }
        if (si->requires_grad) {
          auto gs = grad_buffer(si);
          for (std::size_t j = 0; j < d; ++j) gs[j] += gr[j];
        }
        if (xi->requires_grad) {
          auto gx = grad_buffer(xi);
          double sum_dxh = 0.0;
          double sum_dxh_xh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(gr[j]) * gi->data[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
          }
          const double dd = static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(gr[j]) * gi->data[j];
            gx[r * d + j] += static_cast<Real>(rstd[r] / dd * (dd * dxh - sum_dxh - xh[j] * sum_dxh_xh));
          }
        }
      }
    });
  }
  return result;
}

Tensor l2_normalize(const Tensor& x) {
  constexpr double kMinNorm = 1e-12;
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  auto xd = x.data();
  std::vector<Real> out(xd.size());
  std::vector<Real> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(xd[r * d + j]) * xd[r * d + j];
    const double norm = std::max(std::sqrt(ss), kMinNorm);
    norms[r] = static_cast<Real>(norm);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<Real>(xd[r * d + j] / norm);
  }
  auto result = make_output(x.shape(), std::move(out), "l2_normalize");
  if (recording(x)) {
    auto xi = x.impl();
    auto yi = result.impl();
    Tape::active()->record({x}, result, [xi, yi, norms = std::move(norms), rows, d](std::span<const Real> g) {
      auto gx = grad_buffer(xi);
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* y = yi->data.data() + r * d;
        const Real* gr = g.data() + r * d;
        // Below the norm floor the map is linear (x / floor).
        const bool clamped = static_cast<double>(norms[r]) <= kMinNorm;
        double dot = 0.0;
        if (!clamped) {
          for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(y[j]) * gr[j];
        }
        for (std::size_t j = 0; j < d; ++j) {
          gx[r * d + j] += static_cast<Real>((gr[j] - y[j] * dot) / norms[r]);
        }
      }
    });
  }
  return result;
}

Tensor custom_op(Shape shape, std::vector<Real> values, const std::vector<Tensor>& inputs, BackwardFn backward,
                 const char* name) {
  if (values.size() != numel(shape)) throw DimensionError(std::string(name) + ": value count does not match shape");
  auto result = make_output(std::move(shape), std::move(values), name);
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (Tape::active() != nullptr && any) Tape::active()->record(inputs, result, std::move(backward));
  return result;
}

Tensor gru_scan(const Tensor& gates_x, const Tensor& hidden_weights, std::span<const std::size_t> lengths,
                bool reverse) {
  const auto& gs = gates_x.shape();
  const auto& us = hidden_weights.shape();
  if (gs.size() != 3 || us.size() != 2 || us[0] != 3 * us[1] || gs[2] != us[0]) {
    throw DimensionError("gru_scan expects gates [B, T, 3h] and weights [3h, h], got " + shape_str(gs) +
                         " and " + shape_str(us));
  }
  const std::size_t batch = gs[0];
  const std::size_t steps = gs[1];
  const std::size_t h = us[1];
  if (lengths.size() != batch) throw DimensionError("gru_scan needs one length per batch row");
  std::size_t max_len = 0;
  for (auto len : lengths) {
    if (len == 0 || len > steps) throw ContractError("gru_scan row length must lie in [1, T]");
    max_len = std::max(max_len, len);
  }

  const auto gx = gates_x.data();
  CMapR U(hidden_weights.data().data(), 3 * h, h);
  const auto U_zr = U.topRows(2 * h);
  const auto U_n = U.bottomRows(h);

  const std::size_t plane = batch * steps * h;
  // Saved per (b, t): previous state, z, r, n.
  std::vector<Real> saved_prev(plane, 0), saved_z(plane, 0), saved_r(plane, 0), saved_n(plane, 0);
  std::vector<Real> out(plane, Real(0));

  MatR H = MatR::Zero(batch, h);
  MatR RH(batch, h);
  MatR A_zr(batch, 2 * h);
  MatR A_n(batch, h);
  std::vector<Real> z(h), r(h);

  auto time_of = [&](std::size_t b, std::size_t s) { return reverse ? lengths[b] - 1 - s : s; };

  for (std::size_t s = 0; s < max_len; ++s) {
    A_zr.noalias() = H * U_zr.transpose();
    RH.setZero();
    for (std::size_t b = 0; b < batch; ++b) {
      if (s >= lengths[b]) continue;
      const std::size_t t = time_of(b, s);
      const Real* g = gx.data() + (b * steps + t) * 3 * h;
      const std::size_t cell = (b * steps + t) * h;
      for (std::size_t j = 0; j < h; ++j) {
        const Real zj = Real(1) / (Real(1) + std::exp(-(g[j] + A_zr(b, j))));
        const Real rj = Real(1) / (Real(1) + std::exp(-(g[h + j] + A_zr(b, h + j))));
        saved_z[cell + j] = zj;
        saved_r[cell + j] = rj;
        saved_prev[cell + j] = H(b, j);
        RH(b, j) = rj * H(b, j);
      }
    }
    A_n.noalias() = RH * U_n.transpose();
    for (std::size_t b = 0; b < batch; ++b) {
      if (s >= lengths[b]) continue;
      const std::size_t t = time_of(b, s);
      const Real* g = gx.data() + (b * steps + t) * 3 * h;
      const std::size_t cell = (b * steps + t) * h;
      for (std::size_t j = 0; j < h; ++j) {
        const Real nj = std::tanh(g[2 * h + j] + A_n(b, j));
        saved_n[cell + j] = nj;
        const Real zj = saved_z[cell + j];
        const Real hj = (Real(1) - zj) * H(b, j) + zj * nj;
        H(b, j) = hj;
        out[cell + j] = hj;
      }
    }
  }

  auto result = make_output(Shape{batch, steps, h}, std::move(out), "gru_scan");
  if (recording(gates_x, hidden_weights)) {
    auto gi = gates_x.impl();
    auto ui = hidden_weights.impl();
    std::vector<std::size_t> lens(lengths.begin(), lengths.end());
    Tape::active()->record(
        {gates_x, hidden_weights}, result,
        [gi, ui, lens = std::move(lens), saved_prev = std::move(saved_prev), saved_z = std::move(saved_z),
         saved_r = std::move(saved_r), saved_n = std::move(saved_n), batch, steps, h, max_len,
         reverse](std::span<const Real> gout) {
          CMapR U(ui->data.data(), 3 * h, h);
          const auto U_zr = U.topRows(2 * h);
          const auto U_n = U.bottomRows(h);
          MatR dH = MatR::Zero(batch, h);
          MatR dH_next(batch, h);
          MatR DA_zr(batch, 2 * h), DA_n(batch, h), dRH(batch, h);
          MatR Hprev(batch, h), RH(batch, h);
          MatR dU = MatR::Zero(3 * h, h);
          std::span<Real> dgx = gi->requires_grad ? grad_buffer(gi) : std::span<Real>{};
          auto time_of = [&](std::size_t b, std::size_t s) { return reverse ? lens[b] - 1 - s : s; };

          for (std::size_t s = max_len; s-- > 0;) {
            DA_zr.setZero();
            DA_n.setZero();
            Hprev.setZero();
            RH.setZero();
            dH_next.setZero();
            for (std::size_t b = 0; b < batch; ++b) {
              if (s >= lens[b]) continue;
              const std::size_t cell = (b * steps + time_of(b, s)) * h;
              for (std::size_t j = 0; j < h; ++j) {
                const Real dh = dH(b, j) + gout[cell + j];
                const Real zj = saved_z[cell + j];
                const Real nj = saved_n[cell + j];
                const Real hp = saved_prev[cell + j];
                Hprev(b, j) = hp;
                RH(b, j) = saved_r[cell + j] * hp;
                DA_zr(b, j) = dh * (nj - hp) * zj * (Real(1) - zj);
                DA_n(b, j) = dh * zj * (Real(1) - nj * nj);
                dH_next(b, j) = dh * (Real(1) - zj);
              }
            }
            dRH.noalias() = DA_n * U_n;
            for (std::size_t b = 0; b < batch; ++b) {
              if (s >= lens[b]) continue;
              const std::size_t cell = (b * steps + time_of(b, s)) * h;
              for (std::size_t j = 0; j < h; ++j) {
                const Real rj = saved_r[cell + j];
                DA_zr(b, h + j) = dRH(b, j) * Hprev(b, j) * rj * (Real(1) - rj);
                dH_next(b, j) += dRH(b, j) * rj;
              }
            }
            dH_next.noalias() += DA_zr * U_zr;
            if (ui->requires_grad) {
              dU.topRows(2 * h).noalias() += DA_zr.transpose() * Hprev;
              dU.bottomRows(h).noalias() += DA_n.transpose() * RH;
            }
            if (gi->requires_grad) {
              for (std::size_t b = 0; b < batch; ++b) {
                if (s >= lens[b]) continue;
                Real* dst = dgx.data() + (b * steps + time_of(b, s)) * 3 * h;
                for (std::size_t j = 0; j < 2 * h; ++j) dst[j] += DA_zr(b, j);
                for (std::size_t j = 0; j < h; ++j) dst[2 * h + j] += DA_n(b, j);
              }
            }
            dH.swap(dH_next);
          }
          if (ui->requires_grad) accumulate(ui, std::span<const Real>(dU.data(), dU.size()));
        });
  }
  return result;
}

}  // namespace crab
