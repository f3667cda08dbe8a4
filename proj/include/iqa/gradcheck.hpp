#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "iqa/tensor.hpp"

// Central-difference gradient verification in double precision.

namespace iqa {

struct GradCheckResult {
  double max_rel_err = 0;
  double max_abs_err = 0;
  int64_t checked = 0;
  std::string worst;  // "param_idx[elem]" of the worst entry
};

// loss_fn rebuilds the scalar loss from the current parameter values on every
// call. Each sampled parameter element is perturbed by +/-h and the numeric
// slope is compared against the analytic gradient of one backward pass.
// Relative error uses a symmetric denominator: |a-n| / (|a|+|n|+guard).
// Elements whose absolute slope discrepancy is at or below `atol` do not
// contribute to max_rel_err: for deep compositions the central-difference
// estimate bottoms out at a roundoff floor of roughly eps*|loss|/h, and on
// near-zero gradient elements that floor dominates the relative metric while
// saying nothing about the analytic gradient. max_abs_err still covers them.
inline GradCheckResult grad_check(
    const std::vector<Tensor<double>*>& params,
    const std::function<Tensor<double>()>& loss_fn, double h = 1e-5,
    int64_t max_per_param = 64, double guard = 1e-8, double atol = 0.0) {
  for (auto* p : params) p->zero_grad();
  Tensor<double> loss = loss_fn();
  if (loss.size() != 1) throw ShapeError("grad_check: loss must be scalar");
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params)
    analytic.emplace_back(p->grad().begin(), p->grad().end());

  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& p = *params[pi];
    int64_t n = p.size();
    int64_t step = std::max<int64_t>(1, n / max_per_param);
    for (int64_t i = 0; i < n; i += step) {
      double saved = p.data()[i];
      double fp, fm;
      {
        NoGradGuard ng;
        p.data()[i] = saved + h;
        fp = loss_fn().item();
        p.data()[i] = saved - h;
        fm = loss_fn().item();
      }
      p.data()[i] = saved;
      double numeric = (fp - fm) / (2 * h);
      double a = analytic[pi][i];
      double abs_err = std::abs(a - numeric);
      double rel = abs_err / (std::abs(a) + std::abs(numeric) + guard);
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
      if (abs_err <= atol) rel = 0.0;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = std::to_string(pi) + "[" + std::to_string(i) + "]";
      }
      ++res.checked;
    }
  }
  return res;
}

}  // namespace iqa
