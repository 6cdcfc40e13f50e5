#include "apaseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace apaseg {

GradCheckResult grad_check(const std::function<Var<double>()>& f,
                           std::vector<Var<double>> inputs, double rel_step) {
  GradCheckResult result;
  for (auto& in : inputs) in.zero_grad();
  {
    Var<double> y = f();
    if (y.value().numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
    backward(y);
  }

  std::vector<Tensor<double>> analytic;
  std::vector<Tensor<double>> numeric;
  analytic.reserve(inputs.size());
  numeric.reserve(inputs.size());
  double scale = 0.0;
  for (auto& in : inputs) {
    analytic.push_back(in.has_grad() ? in.grad() : Tensor<double>(in.shape(), 0.0));
    Tensor<double> num(in.shape(), 0.0);
    Tensor<double>& x = in.mutable_value();
    for (Index i = 0; i < x.numel(); ++i) {
      const double orig = x[i];
      const double h = rel_step * std::max(1.0, std::abs(orig));
      x[i] = orig + h;
      const double fp = f().value()[0];
      x[i] = orig - h;
      const double fm = f().value()[0];
      x[i] = orig;
      num[i] = (fp - fm) / (2.0 * h);
      if (std::isfinite(num[i])) scale = std::max(scale, std::abs(num[i]));
    }
    numeric.push_back(std::move(num));
  }

  const double floor = std::max(1e-10, 1e-3 * scale);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Index i = 0; i < analytic[k].numel(); ++i) {
      const double a = analytic[k][i];
      const double n = numeric[k][i];
      ++result.elements_checked;
      if (!std::isfinite(a) || !std::isfinite(n)) {
        result.finite = false;
        result.worst_location = "input#" + std::to_string(k) + "[" + std::to_string(i) + "]";
        continue;
      }
      const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        if (result.finite) {
          result.worst_location = "input#" + std::to_string(k) + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  return result;
}

}  // namespace apaseg
