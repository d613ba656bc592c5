#pragma once

// Scalar double-precision transcriptions of the layer equations, shared by
// the layer, loss and model tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "crab/layers.hpp"
#include "crab/tensor.hpp"

namespace crab::oracle {

using Vec = std::vector<double>;

inline Vec row(const Tensor& t, std::size_t offset, std::size_t n) {
  Vec v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = t.data()[offset + i];
  return v;
}

// y = W x for W [out, in] stored row-major.
inline Vec matvec(const Tensor& w, const Vec& x) {
  const std::size_t out = w.dim(0), in = w.dim(1);
  Vec y(out, 0.0);
  for (std::size_t i = 0; i < out; ++i)
    for (std::size_t j = 0; j < in; ++j) y[i] += double(w.data()[i * in + j]) * x[j];
  return y;
}

inline double dot(const Vec& a, const Vec& b, std::size_t from = 0, std::size_t n = SIZE_MAX) {
  double s = 0;
  for (std::size_t i = from; i < std::min(a.size(), from + n); ++i) s += a[i] * b[i];
  return s;
}

inline Tensor prefix_mask(std::size_t batch, std::size_t steps, const std::vector<std::size_t>& lengths) {
  auto m = Tensor::zeros({batch, steps});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < lengths[b]; ++t) m.data()[b * steps + t] = 1;
  return m;
}

// Straight scalar transcription of the GRU equations for one direction.
inline std::vector<Vec> gru_oracle(const GruDirection& d, const std::vector<Vec>& xs, bool reverse) {
  const std::size_t h = d.hidden_weights.dim(1);
  const std::size_t in = d.input_weights.dim(1);
  std::vector<Vec> out(xs.size(), Vec(h, 0.0));
  Vec state(h, 0.0);
  for (std::size_t s = 0; s < xs.size(); ++s) {
    const std::size_t t = reverse ? xs.size() - 1 - s : s;
    auto gate_in = [&](std::size_t gate, std::size_t i) {
      double v = d.bias.data()[gate * h + i];
      for (std::size_t j = 0; j < in; ++j) v += double(d.input_weights.data()[(gate * h + i) * in + j]) * xs[t][j];
      return v;
    };
    auto gate_h = [&](std::size_t gate, std::size_t i, const Vec& hv) {
      double v = 0;
      for (std::size_t j = 0; j < h; ++j) v += double(d.hidden_weights.data()[(gate * h + i) * h + j]) * hv[j];
      return v;
    };
    Vec z(h), r(h), rh(h), next(h);
    for (std::size_t i = 0; i < h; ++i) {
      z[i] = 1 / (1 + std::exp(-(gate_in(0, i) + gate_h(0, i, state))));
      r[i] = 1 / (1 + std::exp(-(gate_in(1, i) + gate_h(1, i, state))));
      rh[i] = r[i] * state[i];
    }
    for (std::size_t i = 0; i < h; ++i) {
      const double cand = std::tanh(gate_in(2, i) + gate_h(2, i, rh));
      next[i] = (1 - z[i]) * state[i] + z[i] * cand;
    }
    state = next;
    out[t] = state;
  }
  return out;
}

inline Vec attention_oracle(const CrossAttentionParams& p, const Vec& query, const std::vector<Vec>& keys) {
  const std::size_t d = query.size(), dh = d / p.heads;
  const Vec q = matvec(p.query, query);
  std::vector<Vec> k, v;
  for (const auto& y : keys) {
    k.push_back(matvec(p.key, y));
    v.push_back(matvec(p.value, y));
  }
  Vec ctx(d, 0.0);
  for (std::size_t h = 0; h < p.heads; ++h) {
    Vec s(keys.size());
    for (std::size_t j = 0; j < keys.size(); ++j) s[j] = dot(q, k[j], h * dh, dh) / std::sqrt(double(dh));
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0;
    for (auto& x : s) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < keys.size(); ++j)
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) ctx[c] += s[j] / z * v[j][c];
  }
  return matvec(p.output, ctx);
}

// W x + b
inline Vec affine(const LinearParams& p, const Vec& x) {
  Vec y = matvec(p.weight, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += p.bias.data()[i];
  return y;
}

inline Vec layer_norm_oracle(const LayerNormParams& p, const Vec& x) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= double(x.size());
  for (double v : x) var += (v - mu) * (v - mu);
  var /= double(x.size());
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = (x[i] - mu) / std::sqrt(var + double(p.epsilon)) * p.gain.data()[i] + p.shift.data()[i];
  return y;
}

inline Vec pool_oracle(const AttentionPoolingParams& p, const std::vector<Vec>& seq) {
  const std::size_t d = seq.front().size();
  const Vec m = row(p.query, 0, d);
  Vec s(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) s[i] = dot(seq[i], m) / std::sqrt(double(d));
  const double mx = *std::max_element(s.begin(), s.end());
  double z = 0;
  for (auto& v : s) z += (v = std::exp(v - mx));
  Vec out(d, 0.0);
  for (std::size_t i = 0; i < seq.size(); ++i)
    for (std::size_t c = 0; c < d; ++c) out[c] += s[i] / z * seq[i][c];
  return out;
}

// Contrastive and cross-entropy losses.

using Mat = std::vector<std::vector<double>>;

inline Mat normalized(const Tensor& e) {
  const std::size_t b = e.dim(0), d = e.dim(1);
  Mat out(b, std::vector<double>(d));
  for (std::size_t i = 0; i < b; ++i) {
    double n = 0;
    for (std::size_t j = 0; j < d; ++j) n += double(e.data()[i * d + j]) * e.data()[i * d + j];
    n = std::max(std::sqrt(n), 1e-12);
    for (std::size_t j = 0; j < d; ++j) out[i][j] = e.data()[i * d + j] / n;
  }
  return out;
}

inline double sim(const Mat& u, std::size_t a, std::size_t i, double tau) {
  double s = 0;
  for (std::size_t j = 0; j < u[a].size(); ++j) s += u[a][j] * u[i][j];
  return s / tau;
}

// q over candidates i != a, c spread over same-label candidates, term
// -sum_i c_i log q_i. NaN for anchors without a positive.
inline Vec mpcl_oracle_terms(const Tensor& e, const std::vector<int>& y, double tau) {
  const auto u = normalized(e);
  const std::size_t b = y.size();
  Vec terms(b, std::nan(""));
  for (std::size_t a = 0; a < b; ++a) {
    int positives = 0;
    for (std::size_t i = 0; i < b; ++i) positives += (i != a && y[i] == y[a]);
    if (positives == 0) continue;
    double z = 0;
    for (std::size_t i = 0; i < b; ++i)
      if (i != a) z += std::exp(sim(u, a, i, tau));
    double loss = 0;
    for (std::size_t i = 0; i < b; ++i) {
      if (i == a) continue;
      const double q = std::exp(sim(u, a, i, tau)) / z;
      const double c = y[i] == y[a] ? 1.0 / positives : 0.0;
      if (c > 0) loss -= c * std::log(q);
    }
    terms[a] = loss;
  }
  return terms;
}

// One log-ratio per positive pair, averaged per anchor.
inline Vec scl_oracle_terms(const Tensor& e, const std::vector<int>& y, double tau) {
  const auto u = normalized(e);
  const std::size_t b = y.size();
  Vec terms(b, std::nan(""));
  for (std::size_t a = 0; a < b; ++a) {
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < b; ++i)
      if (i != a && y[i] == y[a]) pos.push_back(i);
    if (pos.empty()) continue;
    double denom = 0;
    for (std::size_t n = 0; n < b; ++n)
      if (n != a) denom += std::exp(sim(u, a, n, tau));
    double acc = 0;
    for (auto p : pos) acc += std::log(std::exp(sim(u, a, p, tau)) / denom);
    terms[a] = -acc / double(pos.size());
  }
  return terms;
}

// Mean over anchors with a positive; NaN when there are none.
inline double mean_of_terms(const Vec& terms) {
  double total = 0;
  int anchors = 0;
  for (double t : terms)
    if (!std::isnan(t)) total += t, ++anchors;
  return anchors ? total / anchors : std::nan("");
}

inline double mpcl_oracle(const Tensor& e, const std::vector<int>& y, double tau) {
  return mean_of_terms(mpcl_oracle_terms(e, y, tau));
}

inline double scl_oracle(const Tensor& e, const std::vector<int>& y, double tau) {
  return mean_of_terms(scl_oracle_terms(e, y, tau));
}

inline double wce_oracle(const Tensor& logits, const std::vector<int>& y, const std::vector<double>& w) {
  const std::size_t b = logits.dim(0), e = logits.dim(1);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < e; ++j) mx = std::max(mx, double(logits.data()[i * e + j]));
    double z = 0;
    for (std::size_t j = 0; j < e; ++j) z += std::exp(logits.data()[i * e + j] - mx);
    const double nll = -(logits.data()[i * e + y[i]] - mx - std::log(z));
    const double wi = w.empty() ? 1.0 : w[y[i]];
    num += wi * nll;
    den += wi;
  }
  return num / den;
}

}  // namespace crab::oracle
