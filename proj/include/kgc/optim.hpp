#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "kgc/param.hpp"

namespace kgc {

// Adam with bias correction: p -= lr * m_hat / (sqrt(v_hat) + eps).
// Frozen parameters are untouched; all gradients are cleared after a step.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const ParamList& params);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };

  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, Slot> slots_;
};

}  // namespace kgc
