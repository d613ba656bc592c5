#include "crab/optim.hpp"

#include <numbers>

namespace crab {

double cosine_lr(double base_lr, std::size_t t, std::size_t total, double eta_min) {
  if (total == 0) throw ContractError("cosine schedule needs total steps > 0");
  if (t > total) throw ContractError("cosine schedule step beyond total");
  if (t == 0) return base_lr;
  if (t == total) return eta_min;
  const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(total);
  return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + std::cos(phase));
}

AdamW::AdamW(std::vector<ParamGroupSpec> groups, OptimConfig cfg) : groups_(std::move(groups)), cfg_(cfg) {
  for (const auto& g : groups_) moments_.emplace_back(g.params.size());
}

void AdamW::step(std::span<const double> group_lrs) {
  if (group_lrs.size() != groups_.size()) throw ContractError("one learning rate per parameter group required");
  ++steps_;
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& group = groups_[gi];
    for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
      auto& p = group.params[pi];
      if (!p.has_grad()) continue;
      auto grad = p.grad();
      adamw_update<Real>(p.data(), std::span<const Real>(grad.data(), grad.size()), moments_[gi][pi], steps_,
                         group_lrs[gi], cfg_);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& g : groups_) {
    for (auto& p : g.params) {
      if (p.defined()) p.impl()->grad.clear();
    }
  }
}

void AdamW::scale_grads(double factor) {
  for (auto& g : groups_) {
    for (auto& p : g.params) {
      if (!p.has_grad()) continue;
      for (auto& v : p.grad()) v = static_cast<Real>(v * factor);
    }
  }
}

std::vector<double> AdamW::scheduled_lrs(std::size_t t, std::size_t total) const {
  std::vector<double> lrs;
  for (const auto& g : groups_) lrs.push_back(cosine_lr(g.base_lr, t, total, cfg_.eta_min));
  return lrs;
}

void accumulate_and_step(AdamW& optimizer, std::size_t micro_batches, std::span<const double> group_lrs) {
  if (micro_batches == 0) throw ContractError("accumulate_and_step needs at least one micro-batch");
  if (micro_batches > 1) optimizer.scale_grads(1.0 / static_cast<double>(micro_batches));
  optimizer.step(group_lrs);
  optimizer.zero_grad();
}

}  // namespace crab
