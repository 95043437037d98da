#pragma once

// Central-difference gradient checking. The taped function is built once;
// finite differences reuse Tape::replay_forward() so every evaluation runs
// the identical op sequence at perturbed parameter values.

#include "owtta/types.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

namespace owtta {

struct GradCheckResult {
  double max_rel_error = 0.0;
  // Location of the worst coordinate, for diagnostics.
  std::string worst_param;
  Eigen::Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the tape's reverse-mode gradient of `build(tape)` against
/// central differences over every coordinate of `params`. Error metric per
/// coordinate: |analytic - fd| / max(1, |fd|).
inline GradCheckResult grad_check(const std::function<Var(Tape&)>& build,
                                  const std::vector<Parameter*>& params, double h = 1e-6) {
  if (h <= 0) throw std::invalid_argument("grad_check: step must be positive");
  for (Parameter* p : params) p->zero_grad();

  Tape tape;
  Var loss = build(tape);
  if (loss.rows() != 1 || loss.cols() != 1)
    throw std::invalid_argument("grad_check: function must produce a scalar");
  tape.backward(loss);

  std::vector<Mat> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double v = p.value(i);
      p.value(i) = v + h;
      tape.replay_forward();
      const double f_plus = loss.scalar();
      p.value(i) = v - h;
      tape.replay_forward();
      const double f_minus = loss.scalar();
      p.value(i) = v;
      const double fd = (f_plus - f_minus) / (2.0 * h);
      const double err = std::abs(analytic[pi](i) - fd) / std::max(1.0, std::abs(fd));
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = p.name;
        res.worst_index = i;
        res.analytic = analytic[pi](i);
        res.numeric = fd;
      }
    }
  }
  tape.replay_forward();  // leave node values consistent with restored params
  return res;
}

}  // namespace owtta
