// SPDX-License-Identifier: Apache-2.0
#include "lkt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace lkt {

GradCheckResult check_gradients(ParameterSet<double>& params, const std::function<double()>& loss,
                                const std::function<void()>& gradients, double h, double floor) {
  params.zero_grad();
  gradients();
  GradCheckResult out;
  for (auto& p : params) {
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double saved = p.value[j];
      p.value[j] = saved + h;
      const double up = loss();
      p.value[j] = saved - h;
      const double down = loss();
      p.value[j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad[j];
      const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double rel = std::abs(analytic - numeric) / scale;
      if (out.checked++ == 0 || rel > out.max_relative_error) {
        out.max_relative_error = rel;
        out.worst_parameter = p.name;
        out.worst_index = j;
        out.analytic = analytic;
        out.numeric = numeric;
      }
    }
  }
  return out;
}

}  // namespace lkt
