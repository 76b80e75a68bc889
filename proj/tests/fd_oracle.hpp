#pragma once

// Central finite-difference gradient oracle used by several test binaries.

#include <cmath>
#include <functional>
#include <vector>

#include "perpcs/autodiff.hpp"

namespace perpcs::testing {

struct GradCheck {
  double max_rel_err = 0;
  double max_abs_err = 0;
  std::size_t checked = 0;
};

// rel err = |a - n| / max(|a| + |n|, floor); the floor keeps near-zero
// gradients from dominating through roundoff.
inline GradCheck check_gradients(const std::function<double()>& loss_value,
                                 const std::vector<Parameter<double>*>& params,
                                 const std::vector<std::vector<double>>& analytic, double h = 1e-5,
                                 double floor = 1e-6, std::size_t max_per_param = 64) {
  GradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    const std::size_t n = p.value.numel();
    const std::size_t stride = n > max_per_param ? n / max_per_param : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p.value.data[i];
      p.value.data[i] = orig + h;
      const double up = loss_value();
      p.value.data[i] = orig - h;
      const double down = loss_value();
      p.value.data[i] = orig;
      const double num = (up - down) / (2 * h);
      const double ana = analytic[k][i];
      const double abs_err = std::abs(num - ana);
      const double rel = abs_err / std::max(std::abs(num) + std::abs(ana), floor);
      out.max_rel_err = std::max(out.max_rel_err, rel);
      out.max_abs_err = std::max(out.max_abs_err, abs_err);
      ++out.checked;
    }
  }
  return out;
}

}  // namespace perpcs::testing
