#pragma once

#include <string>
#include <vector>

#include "kgc/tensor.hpp"

namespace kgc {

// A named model weight. Frozen parameters take no gradient and are skipped
// by the optimizer, so their bytes stay identical across training.
struct Parameter {
  std::string name;
  Tensor value;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    value.set_requires_grad(true);
  }

  void freeze() {
    frozen = true;
    value.set_requires_grad(false);
    value.clear_grad();
  }
};

using ParamList = std::vector<Parameter*>;

// Throws contract_error on duplicate names.
void check_unique_names(const ParamList& params);

void clear_grads(const ParamList& params);

}  // namespace kgc
