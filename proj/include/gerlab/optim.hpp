// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gerlab/errors.hpp"
#include "gerlab/tensor.hpp"

namespace gerlab {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Holds first/second moment buffers per parameter;
// step() consumes and zeroes the gradients.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {})
      : cfg_(cfg) {
    for (Tensor& p : params) {
      if (!p.requires_grad())
        throw ContractError("Adam: parameter without requires_grad");
      slots_.push_back(Slot{p, std::vector<double>(p.numel(), 0.0),
                            std::vector<double>(p.numel(), 0.0)});
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Slot& s : slots_) {
      if (!s.param.has_grad())
        throw ContractError("Adam: parameter has no gradient");
      auto g = s.param.grad();
      auto v = s.param.values();
      for (std::size_t i = 0; i < v.size(); ++i) {
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mh = s.m[i] / bc1;
        const double vh = s.v[i] / bc2;
        v[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
      }
      s.param.zero_grad();
    }
  }

  long step_count() const { return t_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  AdamConfig cfg_;
  long t_ = 0;
};

// Linear warm-up to `peak`, constant afterwards. lr(0) == 0.
struct WarmupSchedule {
  std::size_t warmup_steps = 0;
  double peak = 1e-3;

  double lr(std::size_t step) const {
    if (warmup_steps == 0 || step >= warmup_steps) return peak;
    return peak * static_cast<double>(step) /
           static_cast<double>(warmup_steps);
  }
};

}  // namespace gerlab
