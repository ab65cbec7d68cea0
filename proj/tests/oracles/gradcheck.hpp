#pragma once

// Central finite differences against the tape. Include from 64-bit test
// translation units only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "patchmoe/tensor.hpp"

namespace oracle {

struct GradReport {
  double max_rel_error = 0;
  std::string worst;  // "<input>[<element>]"
  std::size_t checked = 0;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

/// `loss` must build a one-element tensor from `inputs` using only tape ops.
inline GradReport gradcheck(std::vector<patchmoe::f64::Tensor> inputs,
                            const std::function<patchmoe::f64::Tensor(const std::vector<patchmoe::f64::Tensor>&)>& loss,
                            double h = 1e-5, std::size_t max_elements_per_input = 0) {
  using patchmoe::f64::Tape;
  using patchmoe::f64::Tensor;
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor l = loss(inputs);
    tape.backward(l);
  }
  GradReport report;
  patchmoe::f64::NoGradScope no_grad;
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    Tensor& t = inputs[n];
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const std::size_t count = max_elements_per_input ? std::min(max_elements_per_input, t.size()) : t.size();
    const std::size_t stride = std::max<std::size_t>(1, t.size() / count);
    for (std::size_t i = 0; i < t.size(); i += stride) {
      const double saved = t[i];
      t[i] = saved + h;
      const double up = loss(inputs).item();
      t[i] = saved - h;
      const double down = loss(inputs).item();
      t[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = relative_error(analytic[i], numeric);
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = std::to_string(n) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace oracle
