#include "kgc/optim.hpp"

#include <cmath>

#include "kgc/error.hpp"

namespace kgc {

void check_unique_names(const ParamList& params) {
  std::unordered_map<std::string, int> seen;
  for (const Parameter* p : params) {
    if (++seen[p->name] > 1) {
      throw contract_error("duplicate parameter name: " + p->name);
    }
  }
}

void clear_grads(const ParamList& params) {
  for (Parameter* p : params) p->value.clear_grad();
}

void Adam::step(const ParamList& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (Parameter* p : params) {
    if (p->frozen) {
      p->value.clear_grad();
      continue;
    }
    const std::size_t n = static_cast<std::size_t>(p->value.numel());
    Slot& slot = slots_[p->name];
    if (slot.m.empty()) {
      slot.m.assign(n, 0.0);
      slot.v.assign(n, 0.0);
    }
    // Absent gradient means the parameter was unreachable this step; the
    // moments still decay, which is the usual sparse-step behavior.
    const std::vector<double>* g = p->value.has_grad() ? &p->value.grad() : nullptr;
    double* w = p->value.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * gi;
      slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * gi * gi;
      const double m_hat = slot.m[i] / bc1;
      const double v_hat = slot.v[i] / bc2;
      w[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
    p->value.clear_grad();
  }
}

}  // namespace kgc
