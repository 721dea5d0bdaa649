#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdasc/tensor.hpp"

namespace kdasc {

/// Linear warmup followed by cosine decay to zero.
struct LrSchedule {
  double base_lr = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  double at(std::size_t step) const {
    if (warmup_steps > 0 && step < warmup_steps) {
      return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    if (total_steps <= warmup_steps) return base_lr;
    const double progress = std::min(
        1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps));
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter Adam moments.
struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
};

struct AdamState {
  std::vector<AdamSlot> slots;
  std::size_t step = 0;

  static AdamState for_params(const std::vector<Tensor>& params) {
    AdamState s;
    for (const auto& p : params) s.slots.push_back({std::vector<double>(p.numel(), 0.0),
                                                    std::vector<double>(p.numel(), 0.0)});
    return s;
  }
};

/// One Adam update with the given learning rate, reading each parameter's grad.
inline void optimizer_step(std::vector<Tensor>& params, AdamState& state, double lr,
                           const AdamOptions& opt = {}) {
  if (params.size() != state.slots.size()) {
    throw std::invalid_argument("optimizer_step: " + std::to_string(state.slots.size()) +
                                " state slots for " + std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    AdamSlot& slot = state.slots[i];
    if (!p.requires_grad()) continue;
    if (slot.m.size() != p.numel()) {
      throw std::invalid_argument("optimizer_step: state slot " + std::to_string(i) + " sized " +
                                  std::to_string(slot.m.size()) + ", parameter has " +
                                  std::to_string(p.numel()) + " elements");
    }
    const auto& g = p.grad();
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double gk = g[k];
      slot.m[k] = opt.beta1 * slot.m[k] + (1.0 - opt.beta1) * gk;
      slot.v[k] = opt.beta2 * slot.v[k] + (1.0 - opt.beta2) * gk * gk;
      const double mhat = slot.m[k] / bc1;
      const double vhat = slot.v[k] / bc2;
      p[k] = static_cast<float>(p[k] - lr * mhat / (std::sqrt(vhat) + opt.eps));
    }
  }
}

}  // namespace kdasc
