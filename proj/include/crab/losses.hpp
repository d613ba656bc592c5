#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crab/tensor.hpp"

namespace crab {

// Inverse-frequency class weights, w_j = N / N_j.
struct ClassWeights {
  std::vector<double> weights;
  std::vector<std::int64_t> class_counts;
  std::int64_t total = 0;
};

ClassWeights class_weights_from_counts(std::span<const std::int64_t> counts);

enum class ContrastiveVariant { MPCL, SCL };

struct ContrastiveConfig {
  double tau = 0.1;
  ContrastiveVariant variant = ContrastiveVariant::MPCL;
  bool exclude_self = true;  // fixed: an anchor is never its own candidate
};

enum class Objective { CE, CE_PLUS_MPCL, MLS_CE, MLCS, MLCS_SCL };

std::string to_string(Objective objective);
Objective objective_from_string(const std::string& name);

struct LossConfig {
  Objective objective = Objective::MLCS;
  double alpha = 2.0;
  ContrastiveConfig contrastive;
  std::optional<ClassWeights> class_weights;  // unset: every class weighs 1
};

// Mean of w_{y_b} * (-log softmax(logits_b)[y_b]), normalized by the sum of
// the applied weights. Without weights this is plain mean cross-entropy.
Tensor weighted_cross_entropy(const Tensor& logits, std::span<const int> labels,
                              const std::optional<ClassWeights>& weights);

struct ContrastiveResult {
  Tensor loss;                // scalar
  Tensor per_anchor;          // [B] per-anchor terms, 0 where an anchor has no positive
  double value = 0.0;         // the loss before rounding to Real
  std::vector<double> terms;  // per_anchor before rounding to Real
  std::size_t anchors = 0;    // anchors with at least one positive
  bool skipped = false;       // true when no anchor had a positive; loss is 0
};

// Multi-positive contrastive loss over in-batch candidates (self excluded).
// Embeddings [B, d] are l2-normalized internally. q is the softmax of
// anchor-candidate similarities / tau; c spreads mass uniformly over the
// candidates sharing the anchor's label; the per-anchor loss is
// -sum_i c_i log q_i, averaged over anchors that have a positive.
ContrastiveResult mpcl_loss(const Tensor& embeddings, std::span<const int> labels, const ContrastiveConfig& cfg);

// Supervised contrastive loss:
//   -(1/|P(a)|) sum_{p in P(a)} log( exp(a.p/tau) / sum_{n != a} exp(a.n/tau) )
// averaged over anchors with positives.
ContrastiveResult scl_loss(const Tensor& embeddings, std::span<const int> labels, const ContrastiveConfig& cfg);

ContrastiveResult contrastive_loss(const Tensor& embeddings, std::span<const int> labels,
                                   const ContrastiveConfig& cfg);

struct LossBreakdown {
  double wce = 0.0;
  std::vector<double> legs;  // one entry per supervised leg
  double total = 0.0;
};

struct ObjectiveResult {
  Tensor total;
  LossBreakdown breakdown;
};

// total = WCE + alpha * mean_i leg_term_i, where the leg terms depend on the
// objective:
//   CE            no legs (legs must be empty or are ignored)
//   CE_PLUS_MPCL  MPCL on the last leg (classifier embedding) only
//   MLS_CE        weighted CE on each leg; legs hold per-leg probe logits
//   MLCS          MPCL on every leg
//   MLCS_SCL      SCL on every leg
ObjectiveResult combined_objective(const Tensor& logits, std::span<const Tensor> legs, std::span<const int> labels,
                                   const LossConfig& cfg);

}  // namespace crab
