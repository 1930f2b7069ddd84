// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>

#include "lkt/parameters.hpp"

namespace lkt {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares parameter gradients against central differences.
/// `loss` evaluates the scalar loss; `gradients` fills the parameter grads
/// for the same loss. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult check_gradients(ParameterSet<double>& params, const std::function<double()>& loss,
                                const std::function<void()>& gradients, double h = 1e-4,
                                double floor = 1e-3);

}  // namespace lkt
