#pragma once

#include <functional>
#include <string>
#include <vector>

#include "apaseg/autograd.hpp"

namespace apaseg {

struct GradCheckResult {
  double max_rel_error = 0.0;
  bool finite = true;
  Index elements_checked = 0;
  std::string worst_location;  // "input#k[i]"

  bool passed(double tol) const { return finite && max_rel_error < tol; }
};

/// Compares the reverse-mode gradient of the scalar `f` with respect to each
/// input against central finite differences, step 1e-4 * max(1, |x|).
///
/// Relative error per element is |a - n| / max(|a|, |n|, floor), where the
/// floor is 1e-3 of the largest numerical gradient magnitude (and at least
/// 1e-10) so that near-zero entries are judged on the gradient's own scale.
/// A non-finite analytic or numerical gradient is reported through `finite`.
GradCheckResult grad_check(const std::function<Var<double>()>& f,
                           std::vector<Var<double>> inputs, double rel_step = 1e-4);

}  // namespace apaseg
