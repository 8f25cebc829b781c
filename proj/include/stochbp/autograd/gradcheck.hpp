// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>

#include "stochbp/errors.hpp"
#include "stochbp/tensor.hpp"

namespace stochbp {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_difference_grad: eps must be positive");
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

}  // namespace stochbp
