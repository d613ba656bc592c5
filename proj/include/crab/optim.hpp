#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "crab/errors.hpp"
#include "crab/tensor.hpp"

namespace crab {

struct OptimConfig {
  double lr_main = 1e-5;
  double lr_encoder = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::size_t grad_accum = 4;
  double eta_min = 0.0;
};

// eta_min + (base_lr - eta_min) * (1 + cos(pi * t / total)) / 2, 0 <= t <= total.
double cosine_lr(double base_lr, std::size_t t, std::size_t total, double eta_min);

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

// One decoupled-weight-decay Adam update of a flat parameter block:
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
// `step` is the 1-based update count used for bias correction. Moments are
// kept in double regardless of T.
template <class T>
void adamw_update(std::span<T> theta, std::span<const T> grad, AdamMoments& mom, std::uint64_t step, double lr,
                  const OptimConfig& cfg) {
  if (grad.size() != theta.size()) throw DimensionError("adamw: gradient and parameter sizes differ");
  if (mom.m.empty()) {
    mom.m.assign(theta.size(), 0.0);
    mom.v.assign(theta.size(), 0.0);
  }
  if (mom.m.size() != theta.size()) throw DimensionError("adamw: moment and parameter sizes differ");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
    mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = mom.m[i] / c1;
    const double v_hat = mom.v[i] / c2;
    const double th = static_cast<double>(theta[i]);
    theta[i] = static_cast<T>(th - lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * th));
  }
}

struct ParamGroupSpec {
  std::string name;
  std::vector<Tensor> params;
  double base_lr = 0.0;
};

// AdamW over named parameter groups. Parameters without a gradient in a
// given step are left untouched (no decay, no moment update).
class AdamW {
 public:
  AdamW(std::vector<ParamGroupSpec> groups, OptimConfig cfg);

  // Applies one update with an explicit learning rate per group.
  void step(std::span<const double> group_lrs);
  // Releases every gradient buffer.
  void zero_grad();
  void scale_grads(double factor);

  std::uint64_t steps() const { return steps_; }
  const std::vector<ParamGroupSpec>& groups() const { return groups_; }
  // Per-group learning rates at optimizer step t of `total` under the
  // cosine schedule.
  std::vector<double> scheduled_lrs(std::size_t t, std::size_t total) const;

 private:
  std::vector<ParamGroupSpec> groups_;
  std::vector<std::vector<AdamMoments>> moments_;
  OptimConfig cfg_;
  std::uint64_t steps_ = 0;
};

// Averages gradients accumulated over `micro_batches` backward passes, takes
// one AdamW step and clears the gradients.
void accumulate_and_step(AdamW& optimizer, std::size_t micro_batches, std::span<const double> group_lrs);

}  // namespace crab
