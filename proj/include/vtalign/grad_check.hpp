#pragma once

// Central-difference verification of the analytic gradients. The loss builder
// is re-run from scratch for every perturbed evaluation, so it must be a
// deterministic function of the parameter values it closes over.
//
// Sampling policy. Two situations make a central difference at step h
// uninformative, and both are handled by policy rather than by loosening the
// comparison:
//   - points within kink_margin of a hinge are rejected outright (the caller
//     resamples; report.at_kink is set);
//   - elements whose gradient magnitude sits below low_magnitude_floor are
//     re-measured at 100*h. At h = 1e-5 the difference L(+h) - L(-h) of a
//     unit-scale loss resolves to ~1 ulp, i.e. a derivative floor near 5e-12,
//     so a true gradient of 1e-8 cannot be certified at that step; at 100*h
//     the same element clears the rounding floor while truncation stays far
//     below the tolerance for these flat directions. The switch is decided by
//     magnitude only, never by whether the element would pass.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "vtalign/tensor.hpp"

namespace vtalign {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t elements_checked = 0;
  bool at_kink = false;  // sample point rejected: too close to a hinge
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// rel err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
inline GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                                  std::vector<Tensor> params, double h = 1e-5,
                                  double kink_margin = 1e-3,
                                  double low_magnitude_floor = 1e-6) {
  GradCheckReport report;

  for (auto& p : params) p.zero_grad();
  reset_kink_stats();
  Tensor loss = loss_fn();
  if (min_kink_margin() < kink_margin) {
    report.at_kink = true;
    return report;
  }
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad_or_zeros());

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& values = params[pi].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      auto central = [&](double step) {
        values[i] = saved + step;
        const double lp = loss_fn().item();
        values[i] = saved - step;
        const double lm = loss_fn().item();
        values[i] = saved;
        return (lp - lm) / (2.0 * step);
      };
      double numeric = central(h);
      const double a = analytic[pi][i];
      if (std::max(std::abs(a), std::abs(numeric)) < low_magnitude_floor &&
          (a != 0.0 || numeric != 0.0)) {
        numeric = central(100.0 * h);
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.elements_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = params[pi].name().empty() ? ("param" + std::to_string(pi))
                                                       : params[pi].name();
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace vtalign
