// Copyright 2026 The HFUS Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <span>
#include <string>

#include "hfus/error.hpp"
#include "hfus/tensor.hpp"

namespace hfus {

// Plain stochastic gradient descent: p <- p - lr * g for every parameter,
// then every gradient buffer is zeroed. Parameters that received no gradient
// are left untouched. If any gradient is non-finite nothing is updated.
inline void sgd_step(std::span<Tensor> params, double lr) {
  if (!(lr > 0.0)) throw DomainError("sgd_step: learning rate must be > 0");
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double g : params[i].grad()) {
      if (!std::isfinite(g)) {
        throw NonFiniteError("sgd_step: non-finite gradient in parameter " + std::to_string(i) +
                             " " + shape_str(params[i].shape()) + "; step aborted");
      }
    }
  }
  for (Tensor& p : params) {
    const auto g = p.grad();
    if (g.empty()) continue;
    auto v = p.mutable_values();
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= lr * g[j];
    p.zero_grad();
  }
}

}  // namespace hfus
