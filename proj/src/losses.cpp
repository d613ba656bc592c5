#include "crab/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "crab/errors.hpp"
#include "crab/ops.hpp"

namespace crab {

namespace {

void check_labels(std::span<const int> labels, std::size_t batch, std::size_t classes) {
  if (labels.size() != batch) {
    throw DimensionError("expected " + std::to_string(batch) + " labels, got " + std::to_string(labels.size()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ContractError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

// Both contrastive losses are evaluated in double and enter the tape as one
// op each (the scalar loss and the per-anchor terms), so float32 rounding
// only touches the returned values.
struct ContrastiveState {
  std::size_t batch = 0, dim = 0;
  double tau = 0.0;
  std::vector<double> unit;    // [B, d] l2-normalized rows
  std::vector<double> norms;   // [B], floored at kMinNorm
  std::vector<double> dterm;   // [B, B] d term_a / d S_ai = p_ai - c_ai
  std::vector<double> terms;   // [B], 0 for anchors without a positive
  std::vector<double> weight;  // [B], 1/A for anchors with a positive
  double loss = 0.0;
  std::size_t anchors = 0;
};

constexpr double kMinNorm = 1e-12;

std::shared_ptr<ContrastiveState> contrastive_state(const Tensor& embeddings, std::span<const int> labels,
                                                    const ContrastiveConfig& cfg) {
  if (embeddings.rank() != 2) {
    throw DimensionError("contrastive loss expects [B, d] embeddings, got " + shape_str(embeddings.shape()));
  }
  if (embeddings.dim(0) < 2) throw ContractError("contrastive loss needs a batch of at least 2");
  if (!(cfg.tau > 0.0)) throw ConfigError("contrastive temperature must be positive");
  if (labels.size() != embeddings.dim(0)) throw DimensionError("one label per embedding required");

  auto st = std::make_shared<ContrastiveState>();
  const std::size_t b = embeddings.dim(0), d = embeddings.dim(1);
  st->batch = b;
  st->dim = d;
  st->tau = cfg.tau;
  st->unit.resize(b * d);
  st->norms.resize(b);
  const auto e = embeddings.data();
  for (std::size_t r = 0; r < b; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(e[r * d + j]) * e[r * d + j];
    st->norms[r] = std::max(std::sqrt(ss), kMinNorm);
    for (std::size_t j = 0; j < d; ++j) st->unit[r * d + j] = e[r * d + j] / st->norms[r];
  }

  st->dterm.assign(b * b, 0.0);
  st->terms.assign(b, 0.0);
  st->weight.assign(b, 0.0);
  std::vector<double> sim(b);
  for (std::size_t a = 0; a < b; ++a) {
    std::size_t positives = 0;
    for (std::size_t i = 0; i < b; ++i) positives += i != a && labels[i] == labels[a];
    if (positives == 0) continue;
    ++st->anchors;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < b; ++i) {
      if (i == a) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += st->unit[a * d + j] * st->unit[i * d + j];
      sim[i] = dot / cfg.tau;
      mx = std::max(mx, sim[i]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < b; ++i)
      if (i != a) z += std::exp(sim[i] - mx);
    const double log_z = mx + std::log(z);
    double term = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      if (i == a) continue;
      const bool pos = labels[i] == labels[a];
      if (cfg.variant == ContrastiveVariant::MPCL) {
        // -sum_i c_i log q_i with c uniform over the positives.
        const double c = pos ? 1.0 / static_cast<double>(positives) : 0.0;
        if (c > 0.0) term -= c * (sim[i] - log_z);
      } else if (pos) {
        // -(1/|P|) sum_p log(exp(s_ap) / sum_n exp(s_an))
        term -= (sim[i] - log_z) / static_cast<double>(positives);
      }
      st->dterm[a * b + i] = std::exp(sim[i] - log_z) - (pos ? 1.0 / static_cast<double>(positives) : 0.0);
    }
    st->terms[a] = term;
    st->weight[a] = 1.0;
  }
  for (auto& w : st->weight) w /= static_cast<double>(st->anchors == 0 ? 1 : st->anchors);
  for (std::size_t a = 0; a < b; ++a) st->loss += st->weight[a] * st->terms[a];
  return st;
}

// Accumulates d/dE of sum_a g_a * term_a.
void contrastive_backward(const ContrastiveState& st, std::span<const double> g, Tensor& embeddings) {
  if (!embeddings.requires_grad()) return;
  const std::size_t b = st.batch, d = st.dim;
  // dS_ai = g_a (p_ai - c_ai); S = U U^T / tau, so dU = (dS + dS^T) U / tau.
  std::vector<double> du(b * d, 0.0);
  for (std::size_t a = 0; a < b; ++a) {
    if (g[a] == 0.0) continue;
    for (std::size_t i = 0; i < b; ++i) {
      const double ds = g[a] * st.dterm[a * b + i] / st.tau;
      if (ds == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) {
        du[a * d + j] += ds * st.unit[i * d + j];
        du[i * d + j] += ds * st.unit[a * d + j];
      }
    }
  }
  auto ge = embeddings.ensure_grad();
  for (std::size_t r = 0; r < b; ++r) {
    // Below the norm floor the normalization is linear (x / floor).
    double dot = 0.0;
    if (st.norms[r] > kMinNorm) {
      for (std::size_t j = 0; j < d; ++j) dot += st.unit[r * d + j] * du[r * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) {
      ge[r * d + j] += static_cast<Real>((du[r * d + j] - st.unit[r * d + j] * dot) / st.norms[r]);
    }
  }
}

ContrastiveResult contrastive(const Tensor& embeddings, std::span<const int> labels, const ContrastiveConfig& cfg,
                              const char* name) {
  auto st = contrastive_state(embeddings, labels, cfg);
  ContrastiveResult r;
  r.anchors = st->anchors;
  r.skipped = st->anchors == 0;
  r.value = st->loss;
  r.terms = st->terms;
  Tensor e = embeddings;
  r.loss = custom_op({1}, {static_cast<Real>(st->loss)}, {embeddings},
                     [st, e](std::span<const Real> g) mutable {
                       std::vector<double> per(st->batch);
                       for (std::size_t a = 0; a < st->batch; ++a) per[a] = static_cast<double>(g[0]) * st->weight[a];
                       contrastive_backward(*st, per, e);
                     },
                     name);
  std::vector<Real> terms(st->terms.begin(), st->terms.end());
  r.per_anchor = custom_op({st->batch}, std::move(terms), {embeddings},
                           [st, e](std::span<const Real> g) mutable {
                             std::vector<double> per(g.begin(), g.end());
                             contrastive_backward(*st, per, e);
                           },
                           name);
  return r;
}

}  // namespace

ClassWeights class_weights_from_counts(std::span<const std::int64_t> counts) {
  if (counts.empty()) throw ConfigError("class weights need at least one class");
  ClassWeights w;
  for (auto c : counts) {
    if (c <= 0) throw ConfigError("class weights need every class count > 0");
    w.total += c;
  }
  for (auto c : counts) {
    w.class_counts.push_back(c);
    w.weights.push_back(static_cast<double>(w.total) / static_cast<double>(c));
  }
  return w;
}

std::string to_string(Objective objective) {
  switch (objective) {
    case Objective::CE: return "CE";
    case Objective::CE_PLUS_MPCL: return "CE+MPCL";
    case Objective::MLS_CE: return "MLS+CE";
    case Objective::MLCS: return "MLCS";
    case Objective::MLCS_SCL: return "MLCS_SCL";
  }
  return "?";
}

Objective objective_from_string(const std::string& name) {
  if (name == "CE") return Objective::CE;
  if (name == "CE+MPCL" || name == "CE_PLUS_MPCL") return Objective::CE_PLUS_MPCL;
  if (name == "MLS+CE" || name == "MLS_CE") return Objective::MLS_CE;
  if (name == "MLCS") return Objective::MLCS;
  if (name == "MLCS_SCL") return Objective::MLCS_SCL;
  throw ConfigError("unknown objective '" + name + "'");
}

Tensor weighted_cross_entropy(const Tensor& logits, std::span<const int> labels,
                              const std::optional<ClassWeights>& weights) {
  if (logits.rank() != 2) throw DimensionError("logits must be [B, E], got " + shape_str(logits.shape()));
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  check_labels(labels, batch, classes);
  if (weights && weights->weights.size() != classes) {
    throw DimensionError("class weights cover " + std::to_string(weights->weights.size()) + " classes, logits have " +
                         std::to_string(classes));
  }
  double total = 0.0;
  for (int y : labels) total += weights ? weights->weights[static_cast<std::size_t>(y)] : 1.0;
  std::vector<Real> pick(batch * classes, Real(0));
  for (std::size_t b = 0; b < batch; ++b) {
    const auto y = static_cast<std::size_t>(labels[b]);
    const double w = weights ? weights->weights[y] : 1.0;
    pick[b * classes + y] = static_cast<Real>(-w / total);
  }
  return sum(mul(log_softmax(logits, 1), Tensor({batch, classes}, std::move(pick))));
}

ContrastiveResult mpcl_loss(const Tensor& embeddings, std::span<const int> labels, const ContrastiveConfig& cfg) {
  ContrastiveConfig c = cfg;
  c.variant = ContrastiveVariant::MPCL;
  return contrastive(embeddings, labels, c, "mpcl_loss");
}

ContrastiveResult scl_loss(const Tensor& embeddings, std::span<const int> labels, const ContrastiveConfig& cfg) {
  ContrastiveConfig c = cfg;
  c.variant = ContrastiveVariant::SCL;
  return contrastive(embeddings, labels, c, "scl_loss");
}

ContrastiveResult contrastive_loss(const Tensor& embeddings, std::span<const int> labels,
                                   const ContrastiveConfig& cfg) {
  return cfg.variant == ContrastiveVariant::MPCL ? mpcl_loss(embeddings, labels, cfg)
                                                 : scl_loss(embeddings, labels, cfg);
}

ObjectiveResult combined_objective(const Tensor& logits, std::span<const Tensor> legs, std::span<const int> labels,
                                   const LossConfig& cfg) {
  if (cfg.alpha < 0.0) throw ConfigError("alpha must be non-negative");
  ObjectiveResult result;
  auto wce = weighted_cross_entropy(logits, labels, cfg.class_weights);
  result.breakdown.wce = wce.item();
  if (cfg.objective == Objective::CE || cfg.alpha == 0.0) {
    // Legs carry no weight; they are neither required nor evaluated.
    result.total = wce;
    result.breakdown.total = result.breakdown.wce;
    return result;
  }

  std::vector<Tensor> terms;
  switch (cfg.objective) {
    case Objective::CE:
      break;
    case Objective::CE_PLUS_MPCL: {
      if (legs.empty()) throw ContractError("CE+MPCL needs the classifier leg embedding");
      auto cc = cfg.contrastive;
      cc.variant = ContrastiveVariant::MPCL;
      terms.push_back(mpcl_loss(legs.back(), labels, cc).loss);
      break;
    }
    case Objective::MLS_CE:
      if (legs.empty()) throw ContractError("MLS+CE needs at least one probe head output");
      for (const auto& leg : legs) terms.push_back(weighted_cross_entropy(leg, labels, cfg.class_weights));
      break;
    case Objective::MLCS:
    case Objective::MLCS_SCL: {
      if (legs.empty()) throw ContractError(to_string(cfg.objective) + " needs at least one CSL embedding");
      auto cc = cfg.contrastive;
      cc.variant = cfg.objective == Objective::MLCS ? ContrastiveVariant::MPCL : ContrastiveVariant::SCL;
      for (const auto& leg : legs) terms.push_back(contrastive_loss(leg, labels, cc).loss);
      break;
    }
  }

  for (const auto& t : terms) result.breakdown.legs.push_back(t.item());
  Tensor acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  result.total = add(wce, scale(acc, static_cast<Real>(cfg.alpha / static_cast<double>(terms.size()))));
  result.breakdown.total = result.total.item();
  return result;
}

}  // namespace crab
